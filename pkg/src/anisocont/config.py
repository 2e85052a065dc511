"""Declarative run configuration: sectioned key=value files.

Numeric values may use simple expressions of pi and sqrt, e.g. `lx = 2*pi`
or `l_low = 1/sqrt(2)`.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from .adapt import AdaptOptions, CoarsenOptions
from .continuation import ContinuationSettings
from .fem import (PROFILE_COS_HALF, PROFILE_GAUSS_SPOT, PROFILE_ZERO,
                  BoundaryCondition, ProblemDef)
from .mesh import build_box_mesh, build_rect_mesh, segment_table
from .metric import EtaPolicy


class ConfigError(ValueError):
    pass


_EVAL_NAMES = {"pi": math.pi, "e": math.e, "sqrt": math.sqrt}
_PROFILES = (PROFILE_ZERO, PROFILE_COS_HALF, PROFILE_GAUSS_SPOT)


def parse_number(text):
    """Parse a float, allowing pi/sqrt expressions like `3*pi/2`."""
    try:
        return float(text)
    except ValueError:
        pass
    if not set(text) <= set("0123456789.+-*/() pietsqr"):
        raise ConfigError(f"cannot parse number '{text}'")
    try:
        return float(eval(text, {"__builtins__": {}}, _EVAL_NAMES))
    except Exception as exc:
        raise ConfigError(f"cannot parse number '{text}': {exc}") from None


@dataclass
class RunConfig:
    name: str
    dim: int
    extents: tuple              # (lx, ly[, lz])
    counts: tuple               # (nx, ny[, nz])
    prob: ProblemDef
    trop: AdaptOptions
    trcop: CoarsenOptions
    cont: ContinuationSettings
    direction: int = 1
    initial_adapt: bool = False
    output_dir: str = "out"
    snapshot_stride: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def build_mesh(self):
        if self.dim == 2:
            return build_rect_mesh(self.extents[0], self.extents[1],
                                   self.counts[0], self.counts[1])
        return build_box_mesh(*self.extents, *self.counts)


def _get(section, key, conv, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"[{section.name}] missing required key '{key}'")
        return default
    try:
        return conv(section[key])
    except Exception as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_bc(text):
    parts = text.split()
    if parts[0] == "neumann":
        return BoundaryCondition("neumann")
    if parts[0] == "dirichlet":
        if len(parts) != 2 or parts[1] not in _PROFILES:
            raise ValueError(f"dirichlet needs a profile from {_PROFILES}")
        return BoundaryCondition("dirichlet", parts[1])
    raise ValueError(f"unknown bc '{text}'")


def _parse_eta(section):
    has_const = "eta" in section
    has_np = "eta_np" in section
    if has_const and has_np:
        raise ConfigError(f"[{section.name}] eta and eta_np are mutually exclusive")
    if has_np:
        return EtaPolicy.linear_in_np(_get(section, "eta_np", parse_number))
    return EtaPolicy.constant(_get(section, "eta", parse_number, default=1e-3))


def _parse_trop(section, dim):
    kwargs = dict(
        eta_policy=_parse_eta(section),
        ppar=_get(section, "ppar", int, default=1000),
        innerit=_get(section, "innerit", int, default=2),
        l_low=_get(section, "l_low", parse_number, default=1.0 / math.sqrt(2.0)),
        l_up=_get(section, "l_up", parse_number, default=math.sqrt(2.0)),
        qual_p=_get(section, "qual_p", parse_number,
                    default=0.0 if dim == 2 else 2.0),
        sw=_get(section, "sw", int, default=15),
    )
    try:
        return AdaptOptions(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}]: {exc}") from None


def load_config(path):
    """Parse and validate a run configuration file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    for req in ("problem", "mesh", "cont"):
        if req not in parser:
            raise ConfigError(f"{path}: missing [{req}] section")

    mesh_sec = parser["mesh"]
    dim = _get(mesh_sec, "dim", int, required=True)
    if dim not in (2, 3):
        raise ConfigError("[mesh] dim must be 2 or 3")
    ext_keys = ("lx", "ly", "lz")[:dim]
    cnt_keys = ("nx", "ny", "nz")[:dim]
    extents = tuple(_get(mesh_sec, k, parse_number, required=True) for k in ext_keys)
    counts = tuple(_get(mesh_sec, k, int, required=True) for k in cnt_keys)

    prob_sec = parser["problem"]
    aux = {}
    for key in ("d", "xi"):
        if key in prob_sec:
            aux[key] = _get(prob_sec, key, parse_number)
    bc = {}
    for seg in segment_table(dim):
        bc[seg] = _get(prob_sec, f"bc{seg}", _parse_bc, required=True)

    cont_sec = parser["cont"]
    active_param = _get(cont_sec, "active_param", str.strip, required=True)
    try:
        prob = ProblemDef(
            c=_get(prob_sec, "c", parse_number, default=1.0),
            lam=_get(prob_sec, "lambda", parse_number, default=0.0),
            gamma=_get(prob_sec, "gamma", parse_number, default=1.0),
            aux=aux, active_param=active_param, bc=bc)
    except ValueError as exc:
        raise ConfigError(f"[problem]: {exc}") from None

    trop_sec = parser["trop"] if "trop" in parser else parser["DEFAULT"]
    trop = _parse_trop(trop_sec, dim) if "trop" in parser \
        else AdaptOptions.for_dim(dim)
    if "trcop" in parser:
        sec = parser["trcop"]
        merged = {k: sec[k] for k in sec}
        # trcop inherits trop values unless overridden
        base = dict(trop_sec) if "trop" in parser else {}
        if "eta" in merged:
            base.pop("eta_np", None)
        if "eta_np" in merged:
            base.pop("eta", None)
        base.update(merged)
        proxy = configparser.ConfigParser()
        proxy["trcop"] = base
        tr_sec = proxy["trcop"]
        try:
            trcop = CoarsenOptions(
                eta_policy=_parse_eta(tr_sec),
                ppar=_get(tr_sec, "ppar", int, default=trop.ppar),
                innerit=_get(tr_sec, "innerit", int, default=trop.innerit),
                l_low=_get(tr_sec, "l_low", parse_number, default=trop.l_low),
                l_up=_get(tr_sec, "l_up", parse_number, default=trop.l_up),
                qual_p=_get(tr_sec, "qual_p", parse_number, default=trop.qual_p),
                sw=_get(tr_sec, "sw", int, default=5),
                npb=_get(tr_sec, "npb", int, default=0),
                crmax=_get(tr_sec, "crmax", int, default=10))
        except ValueError as exc:
            raise ConfigError(f"[trcop]: {exc}") from None
    else:
        trcop = CoarsenOptions.from_trop(trop)

    try:
        cont = ContinuationSettings(
            ds0=_get(cont_sec, "ds0", parse_number, default=0.02),
            ds_min=_get(cont_sec, "ds_min", parse_number, default=1e-6),
            ds_max=_get(cont_sec, "ds_max", parse_number, default=0.1),
            newton_tol=_get(cont_sec, "newton_tol", parse_number, default=1e-8),
            newton_max_it=_get(cont_sec, "newton_max_it", int, default=10),
            amod=_get(cont_sec, "amod", int, default=0),
            ngen=_get(cont_sec, "ngen", int, default=1),
            nsteps=_get(cont_sec, "nsteps", int, default=100),
            bif_detection=_get(cont_sec, "bif_detection", _parse_bool, default=True),
            param_min=_get(cont_sec, "param_min", parse_number),
            param_max=_get(cont_sec, "param_max", parse_number))
    except ValueError as exc:
        raise ConfigError(f"[cont]: {exc}") from None

    out_sec = parser["output"] if "output" in parser else {}
    name = str(path).rsplit("/", 1)[-1]
    name = name[:-4] if name.endswith(".cfg") else name

    cfg = RunConfig(
        name=name, dim=dim, extents=extents, counts=counts, prob=prob,
        trop=trop, trcop=trcop, cont=cont,
        direction=_get(cont_sec, "direction", int, default=1),
        initial_adapt=_get(cont_sec, "initial_adapt", _parse_bool, default=False),
        output_dir=out_sec.get("dir", "out") if out_sec else "out",
        snapshot_stride=int(out_sec.get("snapshot_stride", 0)) if out_sec else 0)

    missing = [seg for seg in segment_table(dim) if seg not in cfg.prob.bc]
    if missing:
        raise ConfigError(f"[problem]: missing boundary conditions for "
                          f"segments {missing}")
    return cfg
