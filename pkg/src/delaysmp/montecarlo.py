"""Seeded Brownian ensembles, regression estimators and stochastic quadrature."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .calculus import SampledProcess, TimeGrid
from .errors import AdaptednessError

logger = logging.getLogger(__name__)

BLOCK_SIZE = 256
ENSEMBLE_FORMAT_VERSION = 1
COND_WARN = 1e10


@dataclass(frozen=True)
class PathEnsemble:
    """Brownian increments and paths on a grid.

    ``increments[:, i, :]`` is ``W(t_{i+1}) - W(t_i)``; steps that end at or
    before 0 carry zero increments so ``W`` vanishes on ``[t_start, 0]``.
    """

    grid: TimeGrid
    increments: np.ndarray
    cumulative: np.ndarray
    seed: Optional[int] = None

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def brownian_dim(self) -> int:
        return self.increments.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return self.grid.dt

    def W(self, i: int) -> np.ndarray:
        return self.cumulative[:, i, :]

    def as_process(self) -> SampledProcess:
        return SampledProcess(self.grid, self.cumulative)

    # -- derived ensembles --------------------------------------------------

    def restrict(self, t_from: float, t_to: float) -> "PathEnsemble":
        """Same paths on the sub-grid between two nodes (``W`` is not re-based)."""
        sub, a = self.grid.slice(t_from, t_to)
        b = a + sub.n_steps
        return PathEnsemble(sub, self.increments[:, a:b, :], self.cumulative[:, a:b + 1, :], self.seed)

    def coarsen(self, factor: int) -> "PathEnsemble":
        """Same Brownian paths observed every ``factor`` steps."""
        if factor < 1 or self.grid.n_steps % factor:
            raise ValueError(f"cannot coarsen {self.grid.n_steps} steps by {factor}")
        nodes = self.grid.nodes[::factor]
        grid = TimeGrid(nodes, self.grid.T, self.grid.spacing)
        inc = self.increments.reshape(self.n_paths, -1, factor, self.brownian_dim).sum(axis=2)
        return PathEnsemble(grid, _ro(inc), _ro(self.cumulative[:, ::factor, :]), self.seed)

    def paths(self, n: int) -> "PathEnsemble":
        """First ``n`` paths; equal to regenerating with ``n_paths=n``."""
        return PathEnsemble(self.grid, self.increments[:n], self.cumulative[:n], self.seed)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "version": ENSEMBLE_FORMAT_VERSION,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "d": self.brownian_dim,
            "T": self.grid.T,
            "spacing": self.grid.spacing,
        }
        np.savez(path, header=np.array(json.dumps(header)), nodes=np.asarray(self.grid.nodes),
                 increments=np.asarray(self.increments))

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("version") != ENSEMBLE_FORMAT_VERSION:
                raise ValueError(f"unsupported ensemble format version {header.get('version')}")
            grid = TimeGrid(data["nodes"], header["T"], header["spacing"])
            inc = np.array(data["increments"])
        if inc.shape != (header["n_paths"], grid.n_steps, header["d"]):
            raise ValueError("ensemble header does not match stored increments")
        return cls(grid, _ro(inc), _ro(_cumulate(inc)), header["seed"])


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


def _cumulate(inc: np.ndarray) -> np.ndarray:
    P, n, d = inc.shape
    out = np.zeros((P, n + 1, d))
    np.cumsum(inc, axis=1, out=out[:, 1:, :])
    return out


def generate_brownian(grid: TimeGrid, n_paths: int, d: int = 1, seed: int = 0) -> PathEnsemble:
    """Gaussian increments with variance ``dt_i`` on every step after 0.

    Paths are produced in blocks of :data:`BLOCK_SIZE`, block ``b`` drawing
    from its own stream ``SeedSequence(seed, spawn_key=(b,))``.  The first
    ``n`` paths are therefore the same whatever the total path count, and the
    output does not depend on how blocks are scheduled.
    """
    if n_paths < 1 or d < 1:
        raise ValueError("need n_paths >= 1 and d >= 1")
    dt = grid.dt
    active = grid.nodes[1:] > grid._tol(0.0)
    sd = np.sqrt(dt[active])
    n_active = int(active.sum())
    inc = np.zeros((n_paths, grid.n_steps, d))
    n_blocks = -(-n_paths // BLOCK_SIZE)
    for b in range(n_blocks):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        draw = rng.standard_normal((BLOCK_SIZE, n_active, d))
        lo, hi = b * BLOCK_SIZE, min(n_paths, (b + 1) * BLOCK_SIZE)
        inc[lo:hi, active, :] = draw[: hi - lo] * sd[None, :, None]
    return PathEnsemble(grid, _ro(inc), _ro(_cumulate(inc)), seed)


# ----------------------------------------------------------------------------
# regression


def _default_state(ensemble: PathEnsemble, i: int) -> np.ndarray:
    return ensemble.cumulative[:, i, :]


@dataclass
class RegressionBasis:
    """Polynomial basis of total degree ``degree`` in a time-``t`` state.

    ``state_extractor(ensemble, i)`` returns the ``(n_paths, k)`` regressors at
    node ``i``; by default it is ``W(t_i)``.  Extra state (e.g. a current
    iterate) can be passed per call to :func:`conditional_expectation`.
    Orthonormalised designs are cached per ``(ensemble, node)`` when no extra
    state is used.
    """

    degree: int = 3
    state_extractor: Callable[[PathEnsemble, int], np.ndarray] = _default_state
    kind: str = "polynomial"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.kind != "polynomial":
            raise ValueError(f"unsupported basis kind {self.kind!r}")

    def design(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.ndim == 1:
            state = state[:, None]
        P = state.shape[0]
        sd = state.std(axis=0)
        keep = sd > 1e-14 * np.maximum(1.0, np.abs(state).max(axis=0))
        x = (state[:, keep] - state[:, keep].mean(axis=0)) / sd[keep]
        cols = [np.ones(P)]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(x.shape[1]), deg):
                cols.append(np.prod(x[:, combo], axis=1))
        return np.column_stack(cols)

    def projector(self, ensemble: PathEnsemble, i: int, extra_state: np.ndarray | None = None) -> np.ndarray:
        """Orthonormal columns spanning the basis at node ``i``."""
        key = (id(ensemble), i)
        if extra_state is None and key in self._cache:
            return self._cache[key][1]
        state = self.state_extractor(ensemble, i) if self.degree > 0 else np.zeros((ensemble.n_paths, 0))
        if extra_state is not None:
            state = np.column_stack([state, np.asarray(extra_state).reshape(ensemble.n_paths, -1)])
        X = self.design(state)
        U, s, _ = np.linalg.svd(X, full_matrices=False)
        cutoff = s[0] * max(X.shape) * np.finfo(float).eps
        rank = int(np.sum(s > cutoff))
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        if cond > COND_WARN:
            logger.warning("regression design at node %d is ill-conditioned (cond=%.3g, rank %d of %d); "
                           "using pseudo-inverse", i, cond, rank, X.shape[1])
        Q = U[:, :rank]
        if extra_state is None:
            if len(self._cache) > 20000:
                self._cache.clear()
            # keep a reference to the ensemble so its id stays unique
            self._cache[key] = (ensemble, Q)
        return Q


def conditional_expectation(
    target: np.ndarray,
    cond_index: int,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    extra_state: np.ndarray | None = None,
) -> np.ndarray:
    """Least-squares estimate of ``E[target | F_t]`` at node ``cond_index``.

    ``target`` has shape ``(n_paths,)`` or ``(n_paths, k)``; the result has
    the same shape.  Columns that are identical across paths are returned
    unchanged, and a degree-0 basis gives the cross-path mean.
    """
    y = np.asarray(target, dtype=float)
    squeeze = y.ndim == 1
    Y = y[:, None] if squeeze else y.reshape(y.shape[0], -1)
    if not np.all(np.isfinite(Y)):
        raise ValueError("regression target must be finite on all paths")
    const = np.all(Y == Y[:1], axis=0)
    out = np.array(Y)
    if not np.all(const):
        var = ~const
        if basis.degree == 0 and extra_state is None:
            out[:, var] = Y[:, var].mean(axis=0)
        else:
            Q = basis.projector(ensemble, cond_index, extra_state)
            out[:, var] = Q @ (Q.T @ Y[:, var])
    if squeeze:
        return out[:, 0]
    return out.reshape(y.shape)


# ----------------------------------------------------------------------------
# martingales and integrals


def exponential_martingale(lam, ensemble: PathEnsemble) -> SampledProcess:
    """``M = exp(-int lam dW - 1/2 int |lam|^2 dt)`` on the ensemble grid.

    A constant ``lam`` (scalar or length-``d``) uses the closed form
    ``exp(-lam.W(t) - |lam|^2 t/2)``.  An array with one row per grid step
    gives a time-varying rate integrated with left-point sums, which is the
    exact exponential of the discrete stochastic integral.
    """
    lam = np.asarray(lam, dtype=float)
    d = ensemble.brownian_dim
    nodes = ensemble.grid.nodes
    if lam.ndim == 0 or (lam.ndim == 1 and lam.size == d):
        vec = np.broadcast_to(lam.reshape(-1), (d,))
        tplus = np.maximum(nodes, 0.0)
        expo = -(ensemble.cumulative @ vec) - 0.5 * float(vec @ vec) * tplus[None, :]
        return SampledProcess(ensemble.grid, np.exp(expo)[:, :, None])
    rate = lam.reshape(ensemble.grid.n_steps, -1)
    rate = np.broadcast_to(rate, (ensemble.grid.n_steps, d))
    active = (nodes[1:] > ensemble.grid._tol(0.0)).astype(float)
    drift = 0.5 * np.sum(rate ** 2, axis=1) * ensemble.dt * active
    step = -np.einsum("psd,sd->ps", ensemble.increments, rate) - drift[None, :]
    expo = np.zeros((ensemble.n_paths, ensemble.grid.n_nodes))
    np.cumsum(step, axis=1, out=expo[:, 1:])
    return SampledProcess(ensemble.grid, np.exp(expo)[:, :, None])


def _solve_steps(grid: TimeGrid) -> np.ndarray:
    tol = grid._tol(grid.T)
    return (grid.nodes[:-1] >= -grid._tol(0.0)) & (grid.nodes[1:] <= grid.T + tol)


def ito_and_time_integrals(
    integrand: SampledProcess,
    ensemble: PathEnsemble,
    mode: str = "ito",
    running: bool = False,
) -> np.ndarray:
    """Left-point sums ``sum g(t_i) dW_i`` or ``sum g(t_i) dt_i`` over ``[0, T]``.

    Returns per-path terminal values ``(n_paths, dim)``, or with
    ``running=True`` the partial sums at every node ``(n_paths, n_nodes, dim)``.
    In ``ito`` mode an integrand with ``d`` components is contracted with the
    ``d`` Brownian components; a scalar integrand multiplies each component.
    """
    if not integrand.adapted:
        raise AdaptednessError("stochastic integral of a non-adapted integrand")
    if mode not in ("ito", "lebesgue"):
        raise ValueError(f"mode must be 'ito' or 'lebesgue', got {mode!r}")
    if integrand.grid.n_nodes != ensemble.grid.n_nodes or not np.array_equal(integrand.grid.nodes, ensemble.grid.nodes):
        raise ValueError("integrand and ensemble must share a grid")
    mask = _solve_steps(ensemble.grid).astype(float)
    g = integrand.values[:, :-1, :]
    if mode == "lebesgue":
        terms = g * (ensemble.dt * mask)[None, :, None]
    else:
        dW = ensemble.increments * mask[None, :, None]
        d = ensemble.brownian_dim
        if integrand.dim == d and d > 1:
            terms = np.sum(g * dW, axis=2, keepdims=True)
        elif d == 1:
            terms = g * dW
        elif integrand.dim == 1:
            terms = g * dW
        else:
            raise ValueError(f"integrand dim {integrand.dim} incompatible with Brownian dim {d}")
    if not running:
        return terms.sum(axis=1)
    out = np.zeros((terms.shape[0], terms.shape[1] + 1, terms.shape[2]))
    np.cumsum(terms, axis=1, out=out[:, 1:, :])
    return out
