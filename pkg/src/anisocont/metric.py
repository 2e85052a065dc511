"""Anisotropic metric field from nodal scalar data.

The metric is (1/eta) * det(|H|)^(-1/(2p+d)) * |H|, where |H| is the nodal
recovered Hessian with eigenvalues replaced by their absolute values and
floored away from zero. Edges measured with this metric drive adaptation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import lumped_mass, p1_element_gradients
from .mesh import signed_volumes


@dataclass
class MetricField:
    """One symmetric positive definite d x d matrix per node."""

    tensors: np.ndarray   # (n_nodes, d, d)
    floor_eps: float = 0.0

    @property
    def dim(self):
        return self.tensors.shape[-1]

    def restrict(self, keep):
        return MetricField(self.tensors[keep], self.floor_eps)


@dataclass(frozen=True)
class EtaPolicy:
    """Scaling factor policy; larger eta yields fewer elements to adapt.

    mode "constant" evaluates to `coefficient`; mode "linear_np" evaluates to
    `coefficient * np` so the factor tracks the current node count.
    """

    mode: str = "constant"
    coefficient: float = 1e-3

    @classmethod
    def constant(cls, value=1e-3):
        return cls("constant", float(value))

    @classmethod
    def linear_in_np(cls, prefactor=1e-5):
        return cls("linear_np", float(prefactor))


def eval_eta(policy, n_points):
    if n_points < 1:
        raise ValueError("node count must be >= 1")
    if policy.mode == "constant":
        eta = policy.coefficient
    elif policy.mode == "linear_np":
        eta = policy.coefficient * n_points
    else:
        raise ValueError(f"unknown eta policy mode '{policy.mode}'")
    if eta <= 0:
        raise ValueError(f"eta policy evaluated to non-positive value {eta}")
    return float(eta)


def select_field(u, selector=None):
    """Pick the scalar field driving adaptation; identity by default.

    `selector` may transform the solution (e.g. np.exp) for problems where a
    scaled field gives better metrics.
    """
    u = np.asarray(u, dtype=float)
    if selector is None:
        return u
    return np.asarray(selector(u), dtype=float)


def recover_hessian(mesh, z):
    """Nodal Hessian of a P1 field by two lumped-mass L2 gradient projections.

    Boundary nodes get the same averaged recovery as interior ones (no
    one-sided extrapolation), so their values are O(1) accurate only.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (mesh.num_nodes,):
        raise ValueError("field length does not match node count")
    d = mesh.dim
    vols = signed_volumes(mesh.nodes, mesh.elements)
    if np.any(vols <= 0):
        raise RuntimeError("degenerate element in Hessian recovery")
    grads = p1_element_gradients(mesh)            # (ne, d+1, d)
    mlumped = lumped_mass(mesh)

    def project(values):
        # values: nodal field -> lumped L2 projection of its elementwise gradient
        elem_grad = np.einsum("ev,evd->ed", values[mesh.elements], grads)
        contrib = (vols / (d + 1))[:, None] * elem_grad
        out = np.zeros((mesh.num_nodes, d))
        np.add.at(out, mesh.elements.ravel(),
                  np.repeat(contrib, d + 1, axis=0))
        return out / mlumped[:, None]

    g = project(z)                                 # (n, d) nodal gradient
    H = np.empty((mesh.num_nodes, d, d))
    for k in range(d):
        H[:, k, :] = project(g[:, k])
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


def compute_metric(hessians, eta, ppar, dim=None):
    """Build the metric field from nodal Hessians.

    Eigenvalues are replaced by absolute values and floored at
    1e-10 * max(1, max nodal Hessian magnitude) so locally affine fields
    yield a large, nearly isotropic target size instead of a singular metric.
    """
    H = np.asarray(hessians, dtype=float)
    d = H.shape[-1]
    if dim is not None and dim != d:
        raise ValueError(f"dimension mismatch: hessians are {d}x{d}, dim={dim}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    if ppar < 1:
        raise ValueError("norm order must be >= 1")
    w, Q = np.linalg.eigh(0.5 * (H + np.transpose(H, (0, 2, 1))))
    floor = 1e-10 * max(1.0, float(np.abs(H).max(initial=0.0)))
    w = np.maximum(np.abs(w), floor)
    det = np.prod(w, axis=1)
    scale = det ** (-1.0 / (2.0 * ppar + d)) / eta
    scaled = w * scale[:, None]
    tensors = np.einsum("nij,nj,nkj->nik", Q, scaled, Q)
    tensors = 0.5 * (tensors + np.transpose(tensors, (0, 2, 1)))
    return MetricField(tensors, floor_eps=floor)


def edge_length_metric(mesh, psi, edge):
    """Length of one mesh edge under the endpoint-averaged metric."""
    a, b = int(edge[0]), int(edge[1])
    v = mesh.nodes[b] - mesh.nodes[a]
    Mbar = 0.5 * (psi.tensors[a] + psi.tensors[b])
    return float(np.sqrt(max(v @ Mbar @ v, 0.0)))


def edge_lengths(nodes, tensors, edges):
    """Vectorized metric lengths of (m, 2) node-id pairs."""
    a, b = edges[:, 0], edges[:, 1]
    v = nodes[b] - nodes[a]
    Mbar = 0.5 * (tensors[a] + tensors[b])
    return np.sqrt(np.maximum(np.einsum("ij,ijk,ik->i", v, Mbar, v), 0.0))


def metric_for_field(mesh, u, eta_policy, ppar, selector=None):
    """Convenience: select field, recover Hessian, evaluate eta, build metric."""
    z = select_field(u, selector)
    H = recover_hessian(mesh, z)
    eta = eval_eta(eta_policy, mesh.num_nodes)
    return compute_metric(H, eta, ppar)
