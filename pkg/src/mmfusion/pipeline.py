"""Outer fusion loop: solve, sparsify, rewrite every index, repeat."""

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .index import SparseIndex
from .solver import AlmConfig, as_dense, solve

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    alm: AlmConfig = field(default_factory=AlmConfig)
    theta1: float = 0.01
    theta2: float = None
    fusion_iters: int = 3
    inflate_factor: float = 10.0

    def __post_init__(self):
        if self.theta2 is None:
            self.theta2 = self.theta1
        if self.theta1 < 0 or self.theta2 < 0:
            raise ValueError("thresholds must be nonnegative")
        if self.fusion_iters < 1:
            raise ValueError("fusion_iters must be at least 1")
        if self.inflate_factor <= 0:
            raise ValueError("inflate_factor must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class FusionReport:
    iterations: list = field(default_factory=list)
    theta1: float = 0.0
    theta2: float = 0.0
    final_density: list = field(default_factory=list)

    @property
    def all_converged(self):
        return all(rec["converged"] for rec in self.iterations)

    def to_dict(self):
        return asdict(self)


def sparsify(a, theta):
    """Zero every entry with ``|a_ij| < theta``; entries at or above are kept."""
    if theta < 0:
        raise ValueError(f"threshold must be nonnegative, got {theta}")
    a = np.array(a, dtype=float)
    a[np.abs(a) < theta] = 0.0
    return a


sparsify_z = sparsify


def aggregate_operator(z_all):
    """``I + (1/V) * sum_v (Z_v + Z_v^T)``."""
    z_all = [as_dense(z) for z in z_all]
    n = z_all[0].shape[0]
    s = sum(z + z.T for z in z_all)
    return np.eye(n) + s / len(z_all)


def normalize_columns(x):
    norms = np.linalg.norm(x, axis=0)
    out = x.copy()
    nz = norms > 0
    out[:, nz] /= norms[nz]
    return out


def update_indexes(x_all, z_all):
    """Multiply every index by the shared aggregate operator, then L2-normalize columns."""
    a = aggregate_operator(z_all)
    out = []
    for x in x_all:
        x = as_dense(x)
        if x.shape[1] != a.shape[0]:
            raise ValueError(f"index has {x.shape[1]} images, functional matrix {a.shape[0]}")
        out.append(normalize_columns(x @ a))
    return out


def run_fusion(x_all, config, on_iteration=None):
    """Fuse the given views and return ``(fused indexes, FusionReport)``.

    ``on_iteration`` is called after every outer iteration with the record
    just appended to the report and the current dense indexes.
    """
    xs = [as_dense(x) for x in x_all]
    if not xs:
        raise ValueError("need at least one index")
    n = xs[0].shape[1]
    if any(x.shape[1] != n for x in xs):
        raise ValueError("all indexes must cover the same images")
    report = FusionReport(theta1=config.theta1, theta2=config.theta2)
    alm = config.alm
    for t in range(1, config.fusion_iters + 1):
        t0 = time.perf_counter()
        result = solve(xs, alm)
        z_sparse = [sparsify(z, config.theta1) for z in result.Z]
        xs = update_indexes(xs, z_sparse)
        record = {
            "iteration": t,
            "lam": alm.lam,
            "sigma": alm.sigma,
            "converged": result.converged,
            "inner_iterations": result.iterations,
            "residuals": asdict(result.residuals),
            "trace": result.trace,
            "z_nonzero_fraction": [float(np.count_nonzero(z)) / z.size for z in z_sparse],
            "x_nonzero_fraction": [float(np.count_nonzero(x)) / x.size if x.size else 0.0 for x in xs],
            "seconds": time.perf_counter() - t0,
        }
        if not result.converged:
            log.warning("fusion iteration %d: inner solver did not converge", t)
        report.iterations.append(record)
        if on_iteration is not None:
            on_iteration(record, xs)
        alm = replace(alm, lam=alm.lam * config.inflate_factor,
                      sigma=alm.sigma * config.inflate_factor)
    fused = [SparseIndex(sparsify(x, config.theta2)) for x in xs]
    report.final_density = [f.density() for f in fused]
    return fused, report
