import numpy as np
import pytest

import anisocont as ac


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rect_mesh():
    return ac.build_rect_mesh(2 * np.pi, np.pi, 17, 9)


@pytest.fixture
def square_mesh():
    return ac.build_rect_mesh(1.0, 1.0, 9, 9)


@pytest.fixture
def box_mesh():
    return ac.build_box_mesh(1.0, 1.0, 1.0, 4, 4, 4)


def cos_problem(d=0.0, lam=-0.2, c=1.0, gamma=1.0):
    """Cubic-quintic problem with the cosine Dirichlet profile on the right
    edge and homogeneous Dirichlet data elsewhere."""
    return ac.ProblemDef(
        c=c, lam=lam, gamma=gamma, aux={"d": d}, active_param="lambda",
        bc={k: ac.dirichlet("cos_half" if k == 2 else "zero")
            for k in (1, 2, 3, 4)})


def spot_problem_2d(xi=0.0, lam=-0.25, c=0.5, gamma=1.0, active="xi"):
    """Gaussian boundary-spot problem: spot on the top edge, zero on the
    bottom, no-flux on the sides."""
    return ac.ProblemDef(
        c=c, lam=lam, gamma=gamma, aux={"xi": xi}, active_param=active,
        bc={1: ac.dirichlet("zero"), 2: ac.neumann(),
            3: ac.dirichlet("gauss_spot"), 4: ac.neumann()})


def spot_problem_3d(xi=0.0, lam=0.0, c=0.5, gamma=1.0):
    """3D spot on the front face, zero on the back, no-flux elsewhere."""
    return ac.ProblemDef(
        c=c, lam=lam, gamma=gamma, aux={"xi": xi}, active_param="xi",
        bc={1: ac.neumann(), 2: ac.neumann(), 3: ac.dirichlet("gauss_spot"),
            4: ac.neumann(), 5: ac.dirichlet("zero"), 6: ac.neumann()})
