"""Synthetic multi-view corpora with planted cluster structure.

Each cluster owns, per view, a nonnegative basis supported on a random set of
feature coordinates. An image is a random nonnegative combination of its
cluster's basis plus half-normal noise, truncated to its largest coordinates
and L2-normalized. Ground truth is cluster co-membership.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .index import GroundTruth, SparseIndex


@dataclass
class SynthSpec:
    n_clusters: int = 25
    per_cluster: int = 4
    views: int = 3
    dims: list = field(default_factory=lambda: [128])
    intra_noise: list = field(default_factory=lambda: [0.0])
    view_corruption: list = field(default_factory=lambda: [0.0])
    sparsity: float = 0.25
    subspace_dim: int = 4
    seed: int = 0

    def __post_init__(self):
        self.dims = _per_view(self.dims, self.views, "dims")
        self.intra_noise = _per_view(self.intra_noise, self.views, "intra_noise")
        self.view_corruption = _per_view(self.view_corruption, self.views, "view_corruption")
        for name in ("n_clusters", "per_cluster", "views", "subspace_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be at least 1")
        if any(s < 0 for s in self.intra_noise):
            raise ValueError("intra_noise must be nonnegative")
        if any(not 0 <= c <= 1 for c in self.view_corruption):
            raise ValueError("view_corruption must lie in [0, 1]")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must lie in (0, 1]")
        for d in self.dims:
            if self.nonzeros(d) < 1:
                raise ValueError(f"sparsity {self.sparsity} leaves no coordinates in dim {d}")

    @property
    def n_images(self):
        return self.n_clusters * self.per_cluster

    def nonzeros(self, dim):
        return int(np.floor(self.sparsity * dim + 1e-9))

    def labels(self):
        return np.repeat(np.arange(self.n_clusters), self.per_cluster)

    def to_dict(self):
        return asdict(self)


def _per_view(value, views, name):
    if np.isscalar(value):
        return [value] * views
    value = list(value)
    if len(value) == 1:
        return value * views
    if len(value) != views:
        raise ValueError(f"{name} needs 1 or {views} entries, got {len(value)}")
    return value


def _keep_largest(vec, k):
    if np.count_nonzero(vec) <= k:
        return vec
    out = np.zeros_like(vec)
    top = np.argsort(-np.abs(vec), kind="stable")[:k]
    out[top] = vec[top]
    return out


def _unit(vec):
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else vec


def generate(spec):
    """Build ``(indexes, truth)`` for ``spec``; bit-identical for a fixed seed."""
    labels = spec.labels()
    n = spec.n_images
    indexes = []
    for v in range(spec.views):
        d = spec.dims[v]
        k = spec.nonzeros(d)
        # independent streams per view so one view's settings don't shift another's data
        vrng = np.random.default_rng([spec.seed, v])
        bases = []
        for _ in range(spec.n_clusters):
            support = vrng.choice(d, size=k, replace=False)
            basis = np.zeros((d, spec.subspace_dim))
            basis[support] = np.abs(vrng.standard_normal((k, spec.subspace_dim)))
            bases.append(basis)
        x = np.zeros((d, n))
        corrupted = np.zeros(n, dtype=bool)
        corrupted[vrng.permutation(n)[:int(round(spec.view_corruption[v] * n))]] = True
        for j in range(n):
            coef = vrng.random(spec.subspace_dim)
            signal = _unit(bases[labels[j]] @ coef)
            noise = np.abs(vrng.standard_normal(d))
            if corrupted[j]:
                vec = noise
            else:
                vec = signal + spec.intra_noise[v] * noise
            x[:, j] = _unit(_keep_largest(vec, k))
        indexes.append(SparseIndex(x))
    return indexes, GroundTruth.from_labels(labels)
