"""Augmented-Lagrangian solver for the multi-view functional matrices.

Solves, for index matrices ``X_v`` (``d_v x N``),

    min  lam * ||E||_{2,1} + ||Phi(Z_1..Z_V)||_tnn + sigma * sum_v ||Z_v||_1
    s.t. X_v = X_v Z_v + E_v

by splitting ``Z`` into an auxiliary tensor ``G`` (nuclear-norm block) and
auxiliary matrices ``M_v`` (l1 block), alternating closed-form block updates
with dual ascent and geometric penalty growth.

With ``AlmConfig.normalized_tnn`` (the default) the nuclear-norm term is
``||.||_tnn / N``, i.e. the mean rather than the sum of the Fourier-slice
nuclear norms. That keeps ``lam`` and ``sigma`` on the scale where values
around 0.01 and 0.001 are meaningful for unit-norm indexes; the unscaled
sum overwhelms both terms and drives every ``Z_v`` to zero.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .index import SparseIndex
from .proximal import l21_shrink, soft_threshold, tnn_prox
from .tensor_algebra import phi_merge, tnn

log = logging.getLogger(__name__)


@dataclass
class AlmConfig:
    lam: float = 0.01
    sigma: float = 0.001
    mu0: float = 1e-5
    rho0: float = 1e-5
    xi0: float = 1e-5
    eta: float = 2.0
    mu_max: float = 1e10
    rho_max: float = 1e10
    xi_max: float = 1e10
    epsilon: float = 1e-7
    max_inner_iters: int = 200
    # weight the nuclear-norm block by 1/N (per-slice SVT threshold 1/rho)
    normalized_tnn: bool = True

    def __post_init__(self):
        for name in ("lam", "mu0", "rho0", "xi0", "mu_max", "rho_max", "xi_max", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.eta > 1:
            raise ValueError(f"eta must exceed 1, got {self.eta}")
        if self.mu_max < self.mu0 or self.rho_max < self.rho0 or self.xi_max < self.xi0:
            raise ValueError("penalty caps must not be below the initial penalties")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class AlmState:
    """All primal, auxiliary and dual variables of one solve."""

    Z: list
    E: list
    M: list
    Y: list
    N: list
    G: np.ndarray
    W: np.ndarray
    mu: float
    rho: float
    xi: float
    iter: int = 0

    @classmethod
    def zeros(cls, dims, n, config):
        """Zero-initialized state for views of feature dimensions ``dims``."""
        v = len(dims)
        return cls(
            Z=[np.zeros((n, n)) for _ in dims],
            E=[np.zeros((d, n)) for d in dims],
            M=[np.zeros((n, n)) for _ in dims],
            Y=[np.zeros((d, n)) for d in dims],
            N=[np.zeros((n, n)) for _ in dims],
            G=np.zeros((n, v, n)),
            W=np.zeros((n, v, n)),
            mu=config.mu0,
            rho=config.rho0,
            xi=config.xi0,
        )

    @property
    def n_views(self):
        return len(self.Z)


@dataclass(frozen=True)
class Residuals:
    err1: float
    err2: float
    err3: float

    def max(self):
        return max(self.err1, self.err2, self.err3)


@dataclass
class SolveResult:
    """Outcome of :func:`solve`; non-convergence is reported, not raised."""

    Z: list
    converged: bool
    iterations: int
    residuals: Residuals
    trace: list = field(default_factory=list)
    state: AlmState = None


def as_dense(x):
    if isinstance(x, SparseIndex):
        return x.to_dense()
    return np.asarray(x, dtype=float)


class _ZFactor:
    """Cholesky factor of ``I + c * X^T X``, refreshed only when ``c`` changes."""

    def __init__(self, gram):
        self.gram = gram
        self.ratio = None
        self.factor = None

    def get(self, ratio):
        if ratio != self.ratio:
            a = ratio * self.gram
            a[np.diag_indices_from(a)] += 1.0
            try:
                self.factor = cho_factor(a, lower=True, check_finite=True)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    "Z-update system is not positive definite; input is corrupted"
                ) from exc
            self.ratio = ratio
        return self.factor


def update_z(state, x_v, v, gram=None, factor=None):
    """Closed-form minimizer of the Lagrangian over ``Z_v``.

    Solves ``(mu X^T X + (rho + xi) I) Z = X^T Y + mu X^T X - mu X^T E - W_v - N_v
    + rho G_v + xi M_v`` through a cached factorization of
    ``I + mu / (rho + xi) X^T X``.
    """
    x = as_dense(x_v)
    if gram is None:
        gram = x.T @ x
    if factor is None:
        factor = _ZFactor(gram)
    mu, rho, xi = state.mu, state.rho, state.xi
    rhs = (
        x.T @ state.Y[v]
        + mu * (gram - x.T @ state.E[v])
        - state.W[:, v, :]
        - state.N[v]
        + rho * state.G[:, v, :]
        + xi * state.M[v]
    )
    return cho_solve(factor.get(mu / (rho + xi)), rhs / (rho + xi))


def update_e(state, x_all, lam):
    """Joint column-wise l2,1 shrinkage of the stacked reconstruction residuals."""
    xs = [as_dense(x) for x in x_all]
    blocks = [x - x @ z + y / state.mu for x, z, y in zip(xs, state.Z, state.Y)]
    e = l21_shrink(np.vstack(blocks), lam / state.mu)
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]
    return np.split(e, splits, axis=0)


def update_m(state, v, sigma):
    return soft_threshold(state.Z[v] + state.N[v] / state.xi, sigma / state.xi)


def update_g(state, normalized_tnn=False):
    """Nuclear-norm block: ``tnn_prox(Phi(Z) + W / rho)``.

    With ``normalized_tnn`` the prox is taken for ``||G||_tnn / N``, which
    is the same as calling :func:`tnn_prox` with penalty ``N * rho``.
    """
    scale = state.G.shape[2] if normalized_tnn else 1
    return tnn_prox(phi_merge(state.Z) + state.W / state.rho, state.rho * scale)


def update_multipliers(state, x_all, config):
    """Dual ascent on all three constraints, then penalty growth (in place)."""
    for v, x in enumerate(x_all):
        x = as_dense(x)
        state.Y[v] = state.Y[v] + state.mu * (x - x @ state.Z[v] - state.E[v])
        state.N[v] = state.N[v] + state.xi * (state.Z[v] - state.M[v])
    state.W = state.W + state.rho * (phi_merge(state.Z) - state.G)
    state.mu = min(config.eta * state.mu, config.mu_max)
    state.rho = min(config.eta * state.rho, config.rho_max)
    state.xi = min(config.eta * state.xi, config.xi_max)
    return state


def residuals(state, x_all):
    err1 = err2 = err3 = 0.0
    for v, x in enumerate(x_all):
        x = as_dense(x)
        err1 = max(err1, float(np.max(np.abs(x - x @ state.Z[v] - state.E[v]), initial=0.0)))
        err2 = max(err2, float(np.max(np.abs(state.Z[v] - state.G[:, v, :]), initial=0.0)))
        err3 = max(err3, float(np.max(np.abs(state.Z[v] - state.M[v]), initial=0.0)))
    return Residuals(err1, err2, err3)


def check_convergence(state, x_all, epsilon):
    res = residuals(state, x_all)
    return (res.err1 < epsilon and res.err2 < epsilon and res.err3 < epsilon), res


def augmented_lagrangian(state, x_all, config):
    """Value of the augmented Lagrangian at ``state`` (for diagnostics and tests)."""
    total = 0.0
    es = []
    for v, x in enumerate(x_all):
        x = as_dense(x)
        r = x - x @ state.Z[v] - state.E[v]
        c = state.Z[v] - state.M[v]
        total += config.sigma * np.abs(state.M[v]).sum()
        total += np.vdot(state.Y[v], r) + 0.5 * state.mu * np.vdot(r, r)
        total += np.vdot(state.N[v], c) + 0.5 * state.xi * np.vdot(c, c)
        es.append(state.E[v])
    e = np.vstack(es)
    total += config.lam * np.linalg.norm(e, axis=0).sum()
    g_norm = tnn(state.G)
    total += g_norm / state.G.shape[2] if config.normalized_tnn else g_norm
    d = phi_merge(state.Z) - state.G
    total += np.vdot(state.W, d) + 0.5 * state.rho * np.vdot(d, d)
    return float(total)


def solve(x_all, config, state=None):
    """Run the alternating updates until the residuals fall below ``epsilon``.

    Parameters
    ----------
    x_all : list of SparseIndex or ndarray
        One ``d_v x N`` index matrix per view, all with the same ``N``.
    config : AlmConfig
    state : AlmState, optional
        Starting point; zeros by default.

    Returns
    -------
    SolveResult
        ``trace`` holds one record per iteration with the three residuals and
        the penalties used in that iteration.
    """
    xs = [as_dense(x) for x in x_all]
    if not xs:
        raise ValueError("need at least one view")
    n = xs[0].shape[1]
    if any(x.shape[1] != n for x in xs):
        raise ValueError("all views must index the same number of images")
    if state is None:
        state = AlmState.zeros([x.shape[0] for x in xs], n, config)
    grams = [x.T @ x for x in xs]
    factors = [_ZFactor(g) for g in grams]
    trace = []
    converged = False
    res = residuals(state, xs)
    for it in range(1, config.max_inner_iters + 1):
        mu, rho, xi = state.mu, state.rho, state.xi
        state.Z = [update_z(state, x, v, grams[v], factors[v]) for v, x in enumerate(xs)]
        state.E = update_e(state, xs, config.lam)
        state.M = [update_m(state, v, config.sigma) for v in range(len(xs))]
        state.G = update_g(state, config.normalized_tnn)
        update_multipliers(state, xs, config)
        state.iter = it
        converged, res = check_convergence(state, xs, config.epsilon)
        trace.append(
            {"iteration": it, "err1": res.err1, "err2": res.err2, "err3": res.err3,
             "mu": mu, "rho": rho, "xi": xi}
        )
        if converged:
            break
    if not converged:
        log.warning("inner loop did not converge in %d iterations (max residual %.3e)",
                    config.max_inner_iters, res.max())
    return SolveResult(
        Z=[z.copy() for z in state.Z],
        converged=converged,
        iterations=state.iter,
        residuals=res,
        trace=trace,
        state=state,
    )
