"""Sparse continuous-time Markov chain representation and solvers.

A chain is described by a :class:`StateSpace` (opaque descriptors mapped to
dense indices) and a :class:`Generator` (sparse rate matrix ``Q`` with zero
row sums).  Steady-state distributions are computed with a sparse direct
solve (dense below a cutoff, power iteration as a last resort), transient
distributions with uniformization and a truncated Poisson sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla
from scipy import stats

ROWSUM_TOL = 1e-12
PROB_TOL = 1e-9


class CtmcError(Exception):
    """Base error for chain construction and solving."""


class StructuralError(CtmcError):
    """The chain is reducible (more than one closed communicating class)."""


class ConvergenceError(CtmcError):
    """Iterative solver did not reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class StateSpace:
    """Ordered set of opaque state descriptors with a dense index."""

    def __init__(self, states: Iterable[Hashable]):
        self.states = list(states)
        if not self.states:
            raise CtmcError("empty state space")
        self.index = {s: i for i, s in enumerate(self.states)}
        if len(self.index) != len(self.states):
            raise CtmcError("duplicate state descriptors")

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> Hashable:
        return self.states[i]

    def index_of(self, state: Hashable) -> int:
        return self.index[state]

    def __iter__(self):
        return iter(self.states)


class Generator:
    """Sparse infinitesimal generator ``Q``.

    Off-diagonal entries are nonnegative transition rates; each diagonal
    entry is the negated row sum so that rows sum to zero.  Instances are
    immutable after construction.
    """

    def __init__(self, n: int, rows, cols, rates, *, validate: bool = True):
        if n <= 0:
            raise CtmcError("empty state space")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        rates = np.asarray(rates, dtype=np.float64)
        if validate and rates.size and rates.min() < 0.0:
            raise CtmcError("negative off-diagonal rate")
        if validate and rows.size and (rows == cols).any():
            raise CtmcError("diagonal entries are derived, do not pass them")
        off = sp.coo_matrix((rates, (rows, cols)), shape=(n, n)).tocsr()
        off.sum_duplicates()
        diag = np.asarray(off.sum(axis=1)).ravel()
        self.q = (off - sp.diags(diag)).tocsr()
        self.n = n
        self._outflow = diag  # total exit rate per state, >= 0

    @classmethod
    def from_dense(cls, q: np.ndarray) -> "Generator":
        q = np.asarray(q, dtype=np.float64)
        n = q.shape[0]
        if q.shape != (n, n):
            raise CtmcError("generator must be square")
        rs = np.abs(q.sum(axis=1))
        scale = np.maximum(np.abs(q).sum(axis=1), 1.0)
        if (rs / scale > ROWSUM_TOL).any():
            raise CtmcError("row sums of a generator must be zero")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        rows, cols = np.nonzero(off)
        return cls(n, rows, cols, off[rows, cols])

    @property
    def max_exit_rate(self) -> float:
        return float(self._outflow.max()) if self.n else 0.0

    @property
    def outflow(self) -> np.ndarray:
        return self._outflow

    def dense(self) -> np.ndarray:
        return self.q.toarray()

    def dump_triples(self) -> str:
        """Debug dump as ``src dst rate`` lines (off-diagonal only)."""
        coo = self.q.tocoo()
        lines = [
            f"{i} {j} {r:.17g}"
            for i, j, r in zip(coo.row, coo.col, coo.data)
            if i != j
        ]
        return "\n".join(lines)


@dataclass(frozen=True)
class UniformizedChain:
    """DTMC subordinated to a Poisson process: ``P = I + Q / rate``."""

    rate: float
    dtmc: sp.csr_matrix


def validate_prob_vector(p: np.ndarray, tol: float = PROB_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.min() < -tol:
        raise CtmcError(f"negative probability entry {p.min():g}")
    if abs(p.sum() - 1.0) > tol:
        raise CtmcError(f"probability vector sums to {p.sum():.12g}")
    return p


def is_irreducible(g: Generator) -> bool:
    """True iff the chain is a single communicating class."""
    n, _labels = csgraph.connected_components(
        g.q, directed=True, connection="strong"
    )
    return n == 1


DENSE_CUTOFF = 2000


def steady_state(
    g: Generator,
    tol: float = 1e-10,
    *,
    max_iter: int = 200_000,
    check_irreducible: bool = True,
) -> np.ndarray:
    """Stationary distribution: ``pi Q = 0``, ``sum(pi) = 1``.

    Small chains go through a dense factorization; larger ones through a
    sparse LU of the normalized system, with uniformized power iteration as
    a fallback.  The infinity-norm residual of ``pi Q`` is verified against
    ``tol`` before returning.
    """
    n = g.n
    if check_irreducible and not is_irreducible(g):
        raise StructuralError("reducible chain: not a single communicating class")
    if n == 1:
        return np.ones(1)

    pi = None
    if n <= DENSE_CUTOFF:
        a = g.q.toarray().T
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            pi = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            pi = None
    if pi is None:
        a = g.q.T.tolil()
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            pi = spla.splu(a.tocsc()).solve(b)
        except RuntimeError:
            pi = _power_iteration(g, tol, max_iter)

    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    residual = float(np.abs(pi @ g.q).max())
    if residual > tol:
        pi = _power_iteration(g, tol, max_iter, start=pi)
        residual = float(np.abs(pi @ g.q).max())
        if residual > tol:
            raise ConvergenceError(
                f"steady-state residual {residual:g} above tol {tol:g}", residual
            )
    return pi


def _power_iteration(g, tol, max_iter, start=None):
    uc = uniformize(g)
    pt = uc.dtmc.T.tocsr()
    pi = np.full(g.n, 1.0 / g.n) if start is None else start.copy()
    check_every = 50
    for it in range(max_iter):
        pi = pt @ pi
        if (it + 1) % check_every == 0:
            s = pi.sum()
            if s <= 0:
                raise ConvergenceError("power iteration lost all mass", np.inf)
            pi /= s
            if np.abs(pi @ g.q).max() <= tol:
                return pi
    residual = float(np.abs(pi @ g.q).max())
    raise ConvergenceError(
        f"power iteration stalled at residual {residual:g} after {max_iter} steps",
        residual,
    )


UNIFORMIZATION_MARGIN = 1.1


def uniformize(g: Generator) -> UniformizedChain:
    """Uniformized DTMC with rate ``1.1 * max |q_jj|``.

    Any rate at least the largest exit rate is valid; the margin keeps the
    embedded chain aperiodic.  A zero generator yields rate 1 and ``P = I``.
    """
    lam = UNIFORMIZATION_MARGIN * g.max_exit_rate
    if lam <= 0.0:
        return UniformizedChain(1.0, sp.identity(g.n, format="csr"))
    p = (sp.identity(g.n, format="csr") + g.q * (1.0 / lam)).tocsr()
    return UniformizedChain(lam, p)


def poisson_window(rate_t: float, eps: float) -> tuple[int, int, np.ndarray]:
    """Left/right truncation points and weights of a Poisson(rate_t) sum.

    The returned weights cover ``[left, right]`` and leave at most ``eps``
    total mass outside; they are renormalized to sum to one.  Weights are
    evaluated through the scipy Poisson pmf, which is overflow-safe for
    large ``rate_t``.
    """
    if rate_t < 0:
        raise CtmcError("negative Poisson rate")
    if rate_t == 0.0:
        return 0, 0, np.ones(1)
    left = int(stats.poisson.ppf(eps / 4.0, rate_t))
    right = int(stats.poisson.isf(eps / 4.0, rate_t))
    left = max(left - 1, 0)
    right = max(right + 1, left)
    ks = np.arange(left, right + 1)
    w = stats.poisson.pmf(ks, rate_t)
    total = w.sum()
    if total <= 0.0:
        raise CtmcError(f"Poisson window lost all mass at rate {rate_t:g}")
    return left, right, w / total


def transient(
    g: Generator, p0: np.ndarray, t: float, eps: float = 1e-10
) -> np.ndarray:
    """Distribution at time ``t``: ``p0 expm(Q t)`` via uniformization.

    The Poisson-weighted sum over DTMC powers is truncated so the result is
    within ``eps`` total variation of the exact action.
    """
    if eps <= 0.0:
        raise CtmcError("eps must be positive")
    if t < 0.0:
        raise CtmcError("time must be nonnegative")
    p0 = validate_prob_vector(p0)
    if t == 0.0:
        return p0.copy()
    uc = uniformize(g)
    left, _right, weights = poisson_window(uc.rate * t, eps)
    pt = uc.dtmc.T.tocsr()
    v = p0.copy()
    for _ in range(left):
        v = pt @ v
    out = weights[0] * v
    for w in weights[1:]:
        v = pt @ v
        out += w * v
    out = np.maximum(out, 0.0)
    return out / out.sum()
