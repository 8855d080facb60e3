"""Hierarchical approximate federation model, one layer per cloud.

Layer ``i`` is a CTMC over ``(q, s, o, a)``: own requests queued or in
service, own VMs lent, VMs borrowed, and shared VMs held by the clouds of
the previous layers.  Layer 1 gives its cloud exclusive access to the
shared pool; each later layer conditions its transitions on the solved
previous layer through three interaction probability vectors (arrival,
local departure, remote departure), each a distribution over allocation
pairs ``(a_loc, a_rem)`` = (VMs of this cloud, VMs of other clouds) held
by the earlier layers after a mean inter-event time.

Two implementation paths exist.  The reference path follows the
definitions state by state (:func:`map_prev_state_to_alloc`,
:func:`interaction_vectors`) and is what the tests check against.  The
production path used by :func:`build_layer` exploits two structural facts
verified in the test suite: the ``a`` coordinate never influences rates or
destinations, so the chain lumps exactly onto ``(q, s, o)`` for the steady
state; and every interaction vector is a Poisson-weighted combination of
pair-projected DTMC powers of the previous layer, so one power sweep
serves all conditioning classes and event timescales.

With ``donor_aware`` (default) the arrival vector also carries, per pair,
the probability that the previous layer could actually hand over an idle
VM, and the remote-departure vector the probability that the lender is
starved; borrowing and VM-return transitions are split accordingly.  This
keeps the borrow transition honest about "can provide at least one VM"
instead of trusting the share quota alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from . import ctmc
from .clouds import (
    FederationSpec,
    PerfEstimates,
    SmallCloudSpec,
    SolverSettings,
    SpecError,
    stable_or_raise,
)
from .solo import no_forward_prob, queue_cutoff, queueing_prob

log = logging.getLogger(__name__)

# beyond this many expected uniformization events the previous layer is
# treated as mixed and its stationary allocation distribution is used
MIX_CUTOFF_EVENTS = 400.0


class ApproxState(NamedTuple):
    q: int
    s: int
    o: int
    a: int


@dataclass
class InteractionVectors:
    """Allocation-pair distributions conditioning one state's transitions.

    The ``*_available``/``*_starved`` entries are joint sub-masses of the
    corresponding vectors: the probability that, in addition to the pair,
    the earlier layers could hand over an idle VM (available) or have
    queued work of their own (starved).  A ``None`` departure vector means
    no such departure can fire.
    """

    arrival: dict[tuple[int, int], float] | None
    dep_local: dict[tuple[int, int], float] | None
    dep_remote: dict[tuple[int, int], float] | None
    arrival_available: dict[tuple[int, int], float] | None = None
    local_starved: dict[tuple[int, int], float] | None = None
    remote_starved: dict[tuple[int, int], float] | None = None


def hypergeom_pmf(v: int, s_pool: int, rem_pool: int) -> dict[int, float]:
    """P(draws from the s_pool side = k) for ``v`` draws without replacement."""
    if v == 0:
        return {0: 1.0}
    total = s_pool + rem_pool
    if total <= 0:
        return {0: 1.0}
    v = min(v, total)
    lo = max(0, v - rem_pool)
    hi = min(v, s_pool)
    out = {}
    # stable log-space start plus a ratio recursion
    log_c = (
        math.lgamma(s_pool + 1)
        - math.lgamma(lo + 1)
        - math.lgamma(s_pool - lo + 1)
        + math.lgamma(rem_pool + 1)
        - math.lgamma(v - lo + 1)
        - math.lgamma(rem_pool - (v - lo) + 1)
        - (math.lgamma(total + 1) - math.lgamma(v + 1) - math.lgamma(total - v + 1))
    )
    for k in range(lo, hi + 1):
        out[k] = math.exp(log_c)
        if k < hi:
            log_c += math.log((s_pool - k) * (v - k)) - math.log(
                (k + 1) * (rem_pool - v + k + 1)
            )
    norm = sum(out.values())
    return {k: p / norm for k, p in out.items()}


def map_prev_state_to_alloc(
    prev_state: ApproxState, pools: tuple[int, int], b_next: int
) -> dict[tuple[int, int], float]:
    """Distribution over ``(a_loc, a_rem)`` induced by one previous-layer state.

    The previous layer's own lent VMs sit in its own pool, which is not the
    next cloud's, so they count wholly into ``a_rem``; its borrowed and
    inherited allocations are indistinguishable draws from the union of the
    next cloud's pool and the remaining pools, split hypergeometrically.
    Pairs outside the feasible range are dropped and the rest renormalized.
    """
    s_pool, rem_pool = pools
    u = prev_state.s
    v = prev_state.o + prev_state.a
    dist: dict[tuple[int, int], float] = {}
    for a_loc, p in hypergeom_pmf(v, s_pool, rem_pool).items():
        # attributions beyond the next pool saturate at its size
        a_rem = min(u + (v - a_loc), b_next)
        dist[(a_loc, a_rem)] = dist.get((a_loc, a_rem), 0.0) + p
    return dist


def lending_headroom(q: int, s: int, sc: SmallCloudSpec) -> int:
    """Shareable VMs not occupied by this cloud's own work.

    Own work fills the never-shared VMs first; only the overflow blocks the
    shareable pool, so earlier layers are compatible with holding at most
    this many of this cloud's VMs.
    """
    own_busy = min(q, sc.n_vms - s)
    overflow = max(0, own_busy - (sc.n_vms - sc.share_cap))
    return sc.share_cap - overflow


def _avail_bit(st: ApproxState, sc: SmallCloudSpec) -> bool:
    """Previous-layer cloud has an idle VM and spare share quota."""
    return st.q + st.s < sc.n_vms and st.s < sc.share_cap


def _starved_bit(st: ApproxState, sc: SmallCloudSpec) -> bool:
    """Previous-layer cloud has queued work of its own."""
    return st.q > sc.n_vms - st.s


# ---------------------------------------------------------------------------
# layer state-space geometry


class _Geometry:
    """Index bookkeeping for one layer's (q, s, o, a) box."""

    def __init__(self, q_max: int, s_cap: int, pool: int, a_cap: int):
        self.q_max = q_max
        self.s_cap = s_cap
        self.pool = pool
        self.a_cap = a_cap
        self.oa_index = {}
        oa = []
        for o in range(pool + 1):
            for a in range(min(a_cap, pool - o) + 1):
                self.oa_index[(o, a)] = len(oa)
                oa.append((o, a))
        self.oa_list = oa
        self.n_oa = len(oa)
        self.n_y = (q_max + 1) * (s_cap + 1) * (pool + 1)
        self.n_full = (q_max + 1) * (s_cap + 1) * self.n_oa

    def y_index(self, q: int, s: int, o: int) -> int:
        return (q * (self.s_cap + 1) + s) * (self.pool + 1) + o

    def y_state(self, idx: int) -> tuple[int, int, int]:
        q, rest = divmod(idx, (self.s_cap + 1) * (self.pool + 1))
        s, o = divmod(rest, self.pool + 1)
        return q, s, o

    def full_index(self, q: int, s: int, o: int, a: int) -> int:
        return (q * (self.s_cap + 1) + s) * self.n_oa + self.oa_index[(o, a)]

    def full_state(self, idx: int) -> ApproxState:
        qs, oa = divmod(idx, self.n_oa)
        q, s = divmod(qs, self.s_cap + 1)
        o, a = self.oa_list[oa]
        return ApproxState(q, s, o, a)

    def iter_full(self):
        for q in range(self.q_max + 1):
            for s in range(self.s_cap + 1):
                for (o, a) in self.oa_list:
                    yield ApproxState(q, s, o, a)


@dataclass
class LayerModel:
    """One solved layer: spaces, generator, steady state, interaction data."""

    index: int
    sc: SmallCloudSpec
    pool: int
    geom: _Geometry
    lumped: ctmc.Generator
    steady_y: np.ndarray
    steady_full: np.ndarray
    g_table: tuple  # (src_y, dst_full, rate) arrays driving the full chain
    settings: SolverSettings
    fallback_classes: int = 0  # conditioning classes that lost all support
    # True when s counts VMs lent to clouds *after* this layer (the
    # capacity-feedback overlay), which must not map into allocation pairs
    lent_external: bool = False

    @property
    def n_states(self) -> int:
        return self.geom.n_full

    def state_space(self) -> ctmc.StateSpace:
        return ctmc.StateSpace(self.geom.iter_full())

    def full_generator(self, max_entries: int = 2_000_000) -> ctmc.Generator:
        """Materialize the generator over (q, s, o, a); small layers only.

        Transitions out of ``(y, a)`` do not depend on ``a``, so every row
        of a block shares the same targets.
        """
        src_y, dst_full, rate = self.g_table
        geom = self.geom
        order = np.argsort(src_y, kind="stable")
        src_sorted = src_y[order]
        bounds = np.searchsorted(src_sorted, np.arange(geom.n_y + 1))
        rows, cols, rates = [], [], []
        nnz = 0
        for y in range(geom.n_y):
            lo, hi = bounds[y], bounds[y + 1]
            if lo == hi:
                continue
            q, s, o = geom.y_state(y)
            dsts = dst_full[order[lo:hi]]
            rts = rate[order[lo:hi]]
            for a in range(min(geom.a_cap, geom.pool - o) + 1):
                f = geom.full_index(q, s, o, a)
                rows.append(np.full(dsts.shape, f))
                cols.append(dsts)
                rates.append(rts)
                nnz += dsts.size
                if nnz > max_entries:
                    raise SpecError(
                        "full generator too large; use the lumped form"
                    )
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        rates = np.concatenate(rates)
        keep = rows != cols
        return ctmc.Generator(geom.n_full, rows[keep], cols[keep], rates[keep])


def layer_queue_cutoff(
    sc: SmallCloudSpec, pool: int, tail_eps: float, *, servers: int | None = None
) -> int:
    """Queue truncation for a layer; validated post-solve."""
    if math.isinf(sc.sla_wait):
        stable_or_raise(sc.arrival_rate, (sc.n_vms + pool) * sc.service_rate, sc.id)
    if sc.arrival_rate == 0.0:
        return sc.n_vms + 1
    n_servers = sc.n_vms + pool if servers is None else servers
    return queue_cutoff(
        n_servers, sc.arrival_rate, sc.service_rate, sc.sla_wait, tail_eps
    )


# ---------------------------------------------------------------------------
# interaction engine (production path)


class InteractionEngine:
    """Pair distributions of a solved layer, for building the next one.

    For every conditioning class (lending headroom, remaining pool room)
    and every mean inter-event time the engine returns the previous layer's
    allocation-pair distribution: restrict the steady state to compatible
    states, evolve by uniformized powers, map through the hypergeometric
    split, clip to feasible pairs and renormalize.  One DTMC power sweep is
    shared by all classes and times; the pair projection also carries the
    donor-availability and lender-starvation masses.
    """

    def __init__(self, prev: LayerModel | None, next_sc: SmallCloudSpec,
                 b_next: int, settings: SolverSettings):
        self.prev = prev
        self.s_pool = next_sc.share_cap
        self.b_next = b_next
        self.next_sc = next_sc
        self.settings = settings
        self.fallbacks = 0
        self._cache: dict = {}
        if prev is None:
            return

        geom = prev.geom
        rem_pool = prev.pool - self.s_pool
        if rem_pool < 0:
            raise SpecError("next cloud's share cap exceeds the previous pool")

        # split distributions per (u, v) = (own lent, borrowed + inherited)
        uv_index: dict[tuple[int, int], int] = {}
        uv_splits: list[dict[tuple[int, int], float]] = []
        pair_index: dict[tuple[int, int], int] = {}
        full_uv = np.empty(geom.n_full, dtype=np.int64)
        for idx in range(geom.n_full):
            st = geom.full_state(idx)
            # an overlay layer's lent VMs belong to later clouds, not to
            # the earlier layers this mapping describes
            uv = (0 if prev.lent_external else st.s, st.o + st.a)
            slot = uv_index.get(uv)
            if slot is None:
                split = map_prev_state_to_alloc(
                    ApproxState(0, uv[0], uv[1], 0), (self.s_pool, rem_pool), b_next
                )
                slot = len(uv_splits)
                uv_index[uv] = slot
                uv_splits.append(split)
                for pair in split:
                    pair_index.setdefault(pair, len(pair_index))
            full_uv[idx] = slot
        self._uv_splits = uv_splits
        self.pair_index = pair_index
        self.pairs = np.array(sorted(pair_index, key=pair_index.get), dtype=np.int64)
        n_pairs = len(pair_index)

        # basis: steady-state mass per conditioning level set.  Normally a
        # set is one (u, v) combination; for an overlay layer the external
        # lent count joins the key so it can be tied to the borrower's
        # holdings in single-donor federations.
        self._single_donor = prev.lent_external and b_next == prev.sc.share_cap
        ext = np.zeros(geom.n_full, dtype=np.int64)
        if prev.lent_external:
            for idx in range(geom.n_full):
                ext[idx] = geom.full_state(idx).s
        key_of: dict[tuple[int, int, int], int] = {}
        full_key = np.empty(geom.n_full, dtype=np.int64)
        for idx in range(geom.n_full):
            st = geom.full_state(idx)
            k = (
                int(full_uv[idx]),
                int(ext[idx]),
                1 if _avail_bit(st, prev.sc) else 0,
            )
            slot = key_of.get(k)
            if slot is None:
                slot = len(key_of)
                key_of[k] = slot
            full_key[idx] = slot
        key_list = sorted(key_of, key=key_of.get)
        key_mass = np.zeros(len(key_list))
        np.add.at(key_mass, full_key, prev.steady_full)
        keep = [
            b
            for b in range(len(key_list))
            if key_mass[b] > settings.interaction_mass_eps
            and uv_splits[key_list[b][0]]
        ]
        if not keep:
            keep = [b for b in range(len(key_list)) if uv_splits[key_list[b][0]]]
        self._basis_ids = keep
        self._basis_keys = key_list
        self._basis_mass = key_mass
        basis = np.zeros((geom.n_full, len(keep)))
        col_of = {b: c for c, b in enumerate(keep)}
        for idx in range(geom.n_full):
            c = col_of.get(int(full_key[idx]))
            if c is not None:
                basis[idx, c] = prev.steady_full[idx]

        # pair projections over the full previous space: total mass, mass
        # where the donor side can provide a VM, mass where it is starved
        rows, cols, val_t, val_a, val_h = [], [], [], [], []
        prev_sc = prev.sc
        for idx in range(geom.n_full):
            st = geom.full_state(idx)
            avail = _avail_bit(st, prev_sc)
            starved = _starved_bit(st, prev_sc)
            own_lent = 0 if prev.lent_external else st.s
            for pair, p in uv_splits[full_uv[idx]].items():
                rows.append(idx)
                cols.append(pair_index[pair])
                val_t.append(p)
                # pools beyond the previous cloud's are not modeled: count
                # their free quota as available
                rest_free = (b_next - prev_sc.share_cap) - (pair[1] - own_lent)
                val_a.append(p if (avail or rest_free >= 1) else 0.0)
                val_h.append(p if starved else 0.0)
        shape = (geom.n_full, n_pairs)
        m_total = sp.coo_matrix((val_t, (rows, cols)), shape=shape).tocsr()
        m_avail = sp.coo_matrix((val_a, (rows, cols)), shape=shape).tocsr()
        m_starv = sp.coo_matrix((val_h, (rows, cols)), shape=shape).tocsr()

        # event times of the next layer needing a transient evaluation
        lam, mu = next_sc.arrival_rate, next_sc.service_rate
        t_keys: dict[tuple, float] = {}
        if lam > 0:
            t_keys[("A",)] = 1.0 / lam
        for busy in range(1, next_sc.n_vms + 1):
            t_keys[("L", busy)] = 1.0 / (busy * mu)
        for o in range(1, b_next + 1):
            t_keys[("O", o)] = 1.0 / (o * mu)

        rate = ctmc.UNIFORMIZATION_MARGIN * max(prev.lumped.outflow.max(), 1e-300)
        self.rate = rate
        windows = {}
        mixed = []
        for key, t in t_keys.items():
            if rate * t > MIX_CUTOFF_EVENTS:
                mixed.append(key)
            else:
                windows[key] = self._weights(rate, t, settings.fox_glynn_eps)
        k_max = max((w.size for w in windows.values()), default=0)

        # shared power sweep of the uniformized previous chain
        src_y, dst_full, g_rate = prev.g_table
        gf = sp.coo_matrix(
            (g_rate, (src_y, dst_full)), shape=(geom.n_y, geom.n_full)
        ).tocsr()
        collapse_rows = np.fromiter(
            (
                geom.y_index(*geom.full_state(i)[:3])
                for i in range(geom.n_full)
            ),
            dtype=np.int64,
            count=geom.n_full,
        )
        collapse = sp.coo_matrix(
            (np.ones(geom.n_full), (collapse_rows, np.arange(geom.n_full))),
            shape=(geom.n_y, geom.n_full),
        ).tocsr()
        stay = 1.0 - prev.lumped.outflow[collapse_rows] / rate
        gf_t = (gf.T * (1.0 / rate)).tocsr()

        acc = {
            key: [np.zeros((n_pairs, len(keep))) for _ in range(3)]
            for key in windows
        }
        v = basis
        for k in range(k_max):
            cks = (m_total.T @ v, m_avail.T @ v, m_starv.T @ v)
            for key, w in windows.items():
                if k < w.size and w[k] != 0.0:
                    for part in range(3):
                        acc[key][part] += w[k] * cks[part]
            if k + 1 < k_max:
                v = v * stay[:, None] + gf_t @ (collapse @ v)
        self._acc = acc

        stationary = (
            m_total.T @ prev.steady_full,
            m_avail.T @ prev.steady_full,
            m_starv.T @ prev.steady_full,
        )
        self._stationary = stationary
        kept_mass = key_mass[np.array(keep)]
        for key in mixed:
            self._acc[key] = [
                np.repeat(stationary[part][:, None], len(keep), axis=1)
                * kept_mass[None, :]
                for part in range(3)
            ]

    @staticmethod
    def _weights(rate: float, t: float, eps: float) -> np.ndarray:
        left, right, w = ctmc.poisson_window(rate * t, eps)
        full = np.zeros(right + 1)
        full[left : right + 1] = w
        return full

    def pair_dist(self, cls: tuple[int, int, int], t_key: tuple):
        """Clipped pair distribution for one conditioning class and event.

        ``cls`` is ``(s, cap_loc, cap_rem)``: the earlier layers hold
        exactly ``s`` of this cloud's VMs right now, can grow to at most
        ``cap_loc`` of them (lending headroom), and at most ``cap_rem`` of
        the remaining pools.  Returns arrays ``(a_loc, a_rem, p, p_avail,
        p_starved)``, the last two joint sub-masses of ``p``.
        """
        key = (cls, t_key)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.prev is None:
            z = np.zeros(1, dtype=np.int64)
            one = np.ones(1)
            out = (z, z, one, one.copy(), np.zeros(1))
            self._cache[key] = out
            return out
        s_cur, cap_loc, cap_rem, backlogged = cls
        o_cur = self.b_next - cap_rem

        def cond_weights(require_blocked: bool) -> np.ndarray:
            w = np.empty(len(self._basis_ids))
            for col, b in enumerate(self._basis_ids):
                uv_slot, s_ext, avail = self._basis_keys[b]
                if self._single_donor and s_ext != o_cur:
                    # the donor's lent VMs are exactly this cloud's borrowings
                    w[col] = 0.0
                    continue
                if require_blocked and avail:
                    # a backlog means the last saturated arrival found no
                    # donor; start from unavailable donor states
                    w[col] = 0.0
                    continue
                w[col] = sum(
                    p
                    for (al, ar), p in self._uv_splits[uv_slot].items()
                    if al == s_cur and ar <= cap_rem
                )
            return w

        wgt = cond_weights(bool(backlogged))
        z = float((wgt * self._basis_mass[self._basis_ids]).sum())
        if z <= self.settings.interaction_mass_eps and backlogged:
            wgt = cond_weights(False)
            z = float((wgt * self._basis_mass[self._basis_ids]).sum())
        if z <= self.settings.interaction_mass_eps:
            self.fallbacks += 1
            log.debug("empty conditional support for class %s; using steady state", cls)
            wgt = np.ones(len(self._basis_ids))
            z = float(self._basis_mass[self._basis_ids].sum())
        coeff = wgt / z
        raw, raw_avail, raw_starv = (self._acc[t_key][part] @ coeff for part in range(3))
        total = raw.sum()
        if total <= 0.0:
            self.fallbacks += 1
            raw, raw_avail, raw_starv = self._stationary
            total = raw.sum()

        # evolved holdings saturate at the headroom and the pool room:
        # excess demand piles up at the cap instead of being renormalized
        al = np.minimum(self.pairs[:, 0], cap_loc)
        ar = np.minimum(self.pairs[:, 1], cap_rem)
        code = al * (self.b_next + 1) + ar
        codes, inv = np.unique(code, return_inverse=True)
        acc = np.zeros((codes.size, 3))
        np.add.at(acc, inv, np.stack([raw, raw_avail, raw_starv], axis=1))
        keep = acc[:, 0] > 0.0
        acc = acc[keep] / total
        codes = codes[keep]
        out = (
            codes // (self.b_next + 1),
            codes % (self.b_next + 1),
            acc[:, 0],
            np.minimum(acc[:, 1], acc[:, 0]),
            np.minimum(acc[:, 2], acc[:, 0]),
        )
        self._cache[key] = out
        return out


# ---------------------------------------------------------------------------
# layer construction


def _assemble_layer(
    index: int,
    sc: SmallCloudSpec,
    pool: int,
    engine: InteractionEngine,
    settings: SolverSettings,
    *,
    layer1: bool,
) -> LayerModel:
    lam, mu, sla = sc.arrival_rate, sc.service_rate, sc.sla_wait
    n, cap = sc.n_vms, sc.share_cap
    donor_aware = settings.donor_aware

    if layer1:
        # the literal first-layer rules thin arrivals on the own VM count
        # and always return freed borrowed VMs; the donor-aware variant
        # completes the layer's pool optimism consistently (a queued
        # request holds a freed borrowed VM instead of returning it)
        servers = None if donor_aware else n
        q_max = layer_queue_cutoff(sc, pool, settings.tail_eps, servers=servers)
        s_cap = 0
        a_cap = 0
    else:
        q_max = layer_queue_cutoff(sc, pool, settings.tail_eps)
        s_cap = min(cap, int(engine.pairs[:, 0].max()) + 1)
        a_cap = min(pool, int(engine.pairs[:, 1].max()) + 1)

    geom = _Geometry(q_max, s_cap, pool, a_cap)

    src_y: list[np.ndarray] = []
    dst_y: list[np.ndarray] = []
    dst_full: list[np.ndarray] = []
    rate: list[np.ndarray] = []

    def emit(src, al, ar, q2, o2, p, scale):
        if al.size == 0 or scale <= 0.0:
            return
        s2 = np.minimum(al, s_cap)
        d_y = (q2 * (s_cap + 1) + s2) * (pool + 1) + o2
        a2 = np.minimum(np.minimum(ar, a_cap), pool - o2)
        oa = np.fromiter(
            (geom.oa_index[(int(o_), int(a_))] for o_, a_ in zip(o2, a2)),
            dtype=np.int64,
            count=len(o2),
        )
        d_f = (q2 * (s_cap + 1) + s2) * geom.n_oa + oa
        src_y.append(np.full(al.shape, src, dtype=np.int64))
        dst_y.append(d_y)
        dst_full.append(d_f)
        rate.append(p * scale)

    for y in range(geom.n_y):
        q, s, o = geom.y_state(y)
        backlogged = 1 if q > n - s else 0
        cls = (s, lending_headroom(q, s, sc), pool - o, backlogged)

        # --- arrivals
        if lam > 0:
            al, ar, p, p_avail, _ = engine.pair_dist(cls, ("A",))
            if not donor_aware:
                p_avail = p
            at_cap = q + al >= n
            room = o + ar < pool
            qq = np.full(al.shape, q, dtype=np.int64)
            oo = np.full(al.shape, o, dtype=np.int64)
            # free own VM
            sel = ~at_cap
            emit(y, al[sel], ar[sel], qq[sel] + 1, oo[sel], p[sel], lam)
            # borrow when the pool has room and a donor can provide
            sel = at_cap & room
            emit(y, al[sel], ar[sel], qq[sel], oo[sel] + 1, p_avail[sel], lam)
            # queue with the SLA thinning (or forward: no transition):
            # quota exhausted, plus the no-donor share of roomy pairs
            if q + 1 <= q_max:
                if donor_aware:
                    # thin on the true backlog: all VMs working for this
                    # cloud (own unlent plus borrowed) drain its queue
                    thin = queueing_prob(q - (n - s), n - s + o, mu, sla)
                else:
                    v_i = n - s + o if not layer1 else n
                    if v_i >= 1:
                        thin = no_forward_prob(q, v_i, mu, sla)
                    else:
                        thin = 1.0 if math.isinf(sla) else 0.0
                if thin > 0.0:
                    sel = at_cap & ~room
                    emit(y, al[sel], ar[sel], qq[sel] + 1, oo[sel], p[sel], lam * thin)
                    sel = at_cap & room
                    p_blocked = p[sel] - p_avail[sel]
                    emit(y, al[sel], ar[sel], qq[sel] + 1, oo[sel], p_blocked, lam * thin)

        # --- local departures: the completing VM frees before the freed-VM
        # decision, so the holdings cap reflects the post-departure state
        busy = min(q, n - s)
        if busy > 0:
            dep_cls = (s, lending_headroom(max(q - 1, 0), s, sc), pool - o, backlogged)
            al, ar, p, _, p_starv = engine.pair_dist(dep_cls, ("L", busy))
            scale = busy * mu
            qq = np.full(al.shape, q, dtype=np.int64)
            oo = np.full(al.shape, o, dtype=np.int64)
            own_queued = q + al > n
            emit(y, al[own_queued], ar[own_queued], qq[own_queued] - 1,
                 oo[own_queued], p[own_queued], scale)
            idle = ~own_queued
            if layer1:
                can_lend = np.zeros(al.shape, dtype=bool)
            else:
                can_lend = idle & (al + 1 <= cap)
            if donor_aware:
                # lend the freed VM with the probability that the earlier
                # layers have queued work of their own
                lend_mass = np.where(can_lend, np.minimum(p_starv, p), 0.0)
            elif settings.eager_lending:
                lend_mass = np.where(can_lend, p, 0.0)
            else:
                lend_mass = np.where(can_lend & (al >= cls[1]), p, 0.0)
            emit(y, al + 1, ar, qq - 1, oo, lend_mass, scale)
            rest = np.where(idle, p - lend_mass, 0.0)
            emit(y, al, ar, qq - 1, oo, rest, scale)

        # --- remote departures
        if o > 0:
            al, ar, p, _, p_starv = engine.pair_dist(cls, ("O", o))
            scale = o * mu
            qq = np.full(al.shape, q, dtype=np.int64)
            oo = np.full(al.shape, o, dtype=np.int64)
            if donor_aware:
                # owner's reclaim (or a starving peer) takes the VM first,
                # then this cloud's own queue holds it, else it returns
                p_taken = np.minimum(p_starv, p)
                emit(y, al, ar, qq, oo - 1, p_taken, scale)
                p_free = p - p_taken
                keep = q + al > n
                emit(y, al[keep], ar[keep], qq[keep] - 1, oo[keep], p_free[keep], scale)
                ret = ~keep
                emit(y, al[ret], ar[ret], qq[ret], oo[ret] - 1, p_free[ret], scale)
            elif layer1:
                # literal first-layer rule: always return
                emit(y, al, ar, qq, oo - 1, p, scale)
            else:
                # literal branch order: share with a starving earlier layer
                # (saturation proxy), else serve own queue, else return
                if settings.eager_lending:
                    relend = np.ones(al.shape, dtype=bool)
                else:
                    relend = ar >= cls[2]
                relend &= (ar + 1 <= pool - (o - 1)) & (ar + 1 > 0)
                sel = relend
                emit(y, al[sel], ar[sel] + 1, qq[sel], oo[sel] - 1, p[sel], scale)
                keep = ~relend & (q + al > n)
                emit(y, al[keep], ar[keep], qq[keep] - 1, oo[keep], p[keep], scale)
                ret = ~relend & ~(q + al > n)
                emit(y, al[ret], ar[ret], qq[ret], oo[ret] - 1, p[ret], scale)

    src = np.concatenate(src_y) if src_y else np.zeros(0, dtype=np.int64)
    d_y = np.concatenate(dst_y) if dst_y else np.zeros(0, dtype=np.int64)
    d_f = np.concatenate(dst_full) if dst_full else np.zeros(0, dtype=np.int64)
    rts = np.concatenate(rate) if rate else np.zeros(0)

    # every event moves q or o, so same-y entries cannot occur; drop zeros
    keep = (rts > 0.0) & (src != d_y)
    src, d_y, d_f, rts = src[keep], d_y[keep], d_f[keep], rts[keep]

    lumped = ctmc.Generator(geom.n_y, src, d_y, rts)
    steady_y = _solve_lumped(lumped, settings)
    steady_full = _reconstruct_full(geom, lumped, steady_y, (src, d_f, rts))

    tail = steady_y.reshape(q_max + 1, -1)[q_max].sum()
    if tail > 1e-6:
        log.warning("layer %d: truncated-queue mass %.2e", index, tail)

    return LayerModel(
        index=index,
        sc=sc,
        pool=pool,
        geom=geom,
        lumped=lumped,
        steady_y=steady_y,
        steady_full=steady_full,
        g_table=(src, d_f, rts),
        settings=settings,
        fallback_classes=engine.fallbacks,
    )


def _solve_lumped(gen: ctmc.Generator, settings: SolverSettings) -> np.ndarray:
    """Steady state restricted to the recurrent class seen from empty.

    Truncation can leave unreachable corners in the (q, s, o) box; the
    physical chain starts empty, so the stationary mass lives on the
    single closed class reachable from there.
    """
    if ctmc.is_irreducible(gen):
        return ctmc.steady_state(gen, settings.steady_tol, check_irreducible=False)
    n_comp, labels = csgraph.connected_components(
        gen.q, directed=True, connection="strong"
    )
    coo = gen.q.tocoo()
    cross = labels[coo.row] != labels[coo.col]
    open_comp = np.zeros(n_comp, dtype=bool)
    open_comp[np.unique(labels[coo.row[cross]])] = True
    reach = csgraph.breadth_first_order(
        gen.q, 0, directed=True, return_predecessors=False
    )
    sinks = [c for c in np.unique(labels[reach]) if not open_comp[c]]
    if len(sinks) != 1:
        raise ctmc.StructuralError(
            f"lumped layer chain has {len(sinks)} reachable closed classes"
        )
    members = np.nonzero(labels == sinks[0])[0]
    remap = -np.ones(gen.n, dtype=np.int64)
    remap[members] = np.arange(len(members))
    inside = (remap[coo.row] >= 0) & (remap[coo.col] >= 0) & (coo.row != coo.col)
    sub = ctmc.Generator(
        len(members), remap[coo.row[inside]], remap[coo.col[inside]], coo.data[inside]
    )
    pi_sub = ctmc.steady_state(sub, settings.steady_tol, check_irreducible=False)
    pi = np.zeros(gen.n)
    pi[members] = pi_sub
    return pi


def _reconstruct_full(geom, lumped, steady_y, table) -> np.ndarray:
    """Exact stationary mass over (q, s, o, a) from the lumped solution.

    Rates never depend on the source ``a``, so the stationary inflow into a
    full state is the lumped mass of its sources times the recorded rates,
    normalized by the state's exit rate.
    """
    src, d_f, rts = table
    inflow = np.zeros(geom.n_full)
    np.add.at(inflow, d_f, steady_y[src] * rts)
    out = np.zeros(geom.n_full)
    d = lumped.outflow
    for idx in range(geom.n_full):
        q, s, o = geom.full_state(idx)[:3]
        y = geom.y_index(q, s, o)
        if d[y] > 0:
            out[idx] = inflow[idx] / d[y]
        elif geom.full_state(idx).a == 0:
            out[idx] = steady_y[y]
    total = out.sum()
    if total > 0:
        out = out / total
    return out


def build_layer1(
    spec: SmallCloudSpec, b1: int, settings: SolverSettings | None = None
) -> LayerModel:
    """First layer: exclusive access to the whole shared pool."""
    settings = settings or SolverSettings()
    engine = InteractionEngine(None, spec, b1, settings)
    return _assemble_layer(1, spec, b1, engine, settings, layer1=True)


def build_layer1_with_lending(
    spec: SmallCloudSpec,
    b1: int,
    demand_rate: float,
    return_rate: float,
    settings: SolverSettings,
) -> LayerModel:
    """First layer rebuilt with its own lending load as a state coordinate.

    The plain first layer models its cloud at full capacity even though
    later clouds borrow from it.  Here VMs are lent to an external demand
    stream at ``demand_rate`` whenever one is idle and the share cap has
    room, and each lent VM returns at ``return_rate``; everything else
    follows the pool-optimistic first-layer rules.
    """
    lam, mu, sla = spec.arrival_rate, spec.service_rate, spec.sla_wait
    n, cap = spec.n_vms, spec.share_cap
    if math.isinf(sla):
        stable_or_raise(lam, (n + b1) * mu, spec.id)
    q_max = layer_queue_cutoff(spec, b1, settings.tail_eps)
    s_cap = cap if demand_rate > 0 else 0
    geom = _Geometry(q_max, s_cap, b1, 0)

    src, d_y, d_f, rts = [], [], [], []

    def emit(y, q2, s2, o2, rate):
        if rate <= 0.0:
            return
        y2 = geom.y_index(q2, s2, o2)
        if y2 == y:
            return
        src.append(y)
        d_y.append(y2)
        d_f.append(geom.full_index(q2, s2, o2, 0))
        rts.append(rate)

    for y in range(geom.n_y):
        q, s, o = geom.y_state(y)
        busy = min(q, n - s)
        if lam > 0:
            if q < n - s:
                emit(y, q + 1, s, o, lam)
            elif o < b1:
                emit(y, q, s, o + 1, lam)
            elif q + 1 <= q_max:
                servers = n - s + o
                thin = no_forward_prob(q, servers, mu, sla) if servers >= 1 else (
                    1.0 if math.isinf(sla) else 0.0
                )
                emit(y, q + 1, s, o, lam * thin)
        if busy > 0:
            emit(y, q - 1, s, o, busy * mu)
        if o > 0:
            if q > n - s:
                # a queued request holds the freed borrowed VM
                emit(y, q - 1, s, o, o * mu)
            else:
                emit(y, q, s, o - 1, o * mu)
        if s < s_cap and q < n - s:
            emit(y, q, s + 1, o, demand_rate)
        if s > 0:
            emit(y, q, s - 1, o, s * return_rate)

    src = np.asarray(src, dtype=np.int64)
    d_y = np.asarray(d_y, dtype=np.int64)
    d_f = np.asarray(d_f, dtype=np.int64)
    rts = np.asarray(rts)
    lumped = ctmc.Generator(geom.n_y, src, d_y, rts)
    steady_y = _solve_lumped(lumped, settings)
    steady_full = _reconstruct_full(geom, lumped, steady_y, (src, d_f, rts))
    return LayerModel(
        index=1,
        sc=spec,
        pool=b1,
        geom=geom,
        lumped=lumped,
        steady_y=steady_y,
        steady_full=steady_full,
        g_table=(src, d_f, rts),
        settings=settings,
        lent_external=True,
    )


def build_layer(
    index: int,
    spec: SmallCloudSpec,
    pool: int,
    prev: LayerModel,
    settings: SolverSettings | None = None,
) -> LayerModel:
    """Layer ``index >= 2`` conditioned on the solved previous layer."""
    settings = settings or SolverSettings()
    engine = InteractionEngine(prev, spec, pool, settings)
    return _assemble_layer(index, spec, pool, engine, settings, layer1=False)


def interaction_vectors(
    prev: LayerModel,
    state: ApproxState,
    rates: tuple[float, float, float],
    next_sc: SmallCloudSpec,
    b_next: int,
) -> InteractionVectors:
    """Reference per-state computation of the three interaction vectors.

    Follows the definitions directly on the previous layer's full state
    space; the production engine must agree with this on every state
    (checked in the tests).
    """
    lam_rate, loc_rate, rem_rate = rates
    settings = prev.settings
    geom = prev.geom
    rem_pool = prev.pool - next_sc.share_cap
    cap_loc = lending_headroom(state.q, state.s, next_sc)
    cap_rem = b_next - state.o

    single_donor = prev.lent_external and b_next == prev.sc.share_cap
    backlogged = state.q > next_sc.n_vms - state.s
    splits = []

    def build_weights(require_blocked: bool) -> np.ndarray:
        weights = np.zeros(geom.n_full)
        for idx in range(geom.n_full):
            st = geom.full_state(idx)
            if single_donor and st.s != state.o:
                continue
            if require_blocked and _avail_bit(st, prev.sc):
                continue
            # the earlier layers hold exactly `state.s` of this cloud's VMs
            weights[idx] = sum(
                p
                for (al, ar), p in splits[idx].items()
                if al == state.s and ar <= cap_rem
            )
        return weights

    for idx in range(geom.n_full):
        st = geom.full_state(idx)
        mapped = ApproxState(st.q, 0 if prev.lent_external else st.s, st.o, st.a)
        splits.append(
            map_prev_state_to_alloc(mapped, (next_sc.share_cap, rem_pool), b_next)
        )
    weights = build_weights(backlogged)
    if weights.sum() <= settings.interaction_mass_eps and backlogged:
        weights = build_weights(False)
    p0 = prev.steady_full * weights
    if p0.sum() <= settings.interaction_mass_eps:
        log.debug("state %s: empty conditional support, falling back", (state,))
        p0 = prev.steady_full.copy()
    p0 = p0 / p0.sum()

    gen = prev.full_generator()

    def evolve(rate, *, bits=None):
        if rate <= 0.0:
            return None if bits is None else (None, None)
        pt = ctmc.transient(gen, p0, 1.0 / rate, settings.fox_glynn_eps)
        dist: dict[tuple[int, int], float] = {}
        sub: dict[tuple[int, int], float] = {}
        for idx, mass in enumerate(pt):
            if mass <= 0.0:
                continue
            st = geom.full_state(idx)
            for pair, p in splits[idx].items():
                clipped = (min(pair[0], cap_loc), min(pair[1], cap_rem))
                dist[clipped] = dist.get(clipped, 0.0) + mass * p
                if bits is not None and bits(st, pair):
                    sub[clipped] = sub.get(clipped, 0.0) + mass * p
        total = sum(dist.values())
        dist = {k: v / total for k, v in dist.items()}
        if bits is None:
            return dist
        return dist, {k: v / total for k, v in sub.items()}

    def avail(st, pair):
        rest_free = (b_next - prev.sc.share_cap) - (pair[1] - st.s)
        return _avail_bit(st, prev.sc) or rest_free >= 1

    def starved(st, pair):
        return _starved_bit(st, prev.sc)

    arrival, arrival_avail = evolve(lam_rate, bits=avail)
    dep_local, local_starved = evolve(loc_rate, bits=starved)
    dep_remote, remote_starved = evolve(rem_rate, bits=starved)
    return InteractionVectors(
        arrival=arrival,
        dep_local=dep_local,
        dep_remote=dep_remote,
        arrival_available=arrival_avail,
        local_starved=local_starved,
        remote_starved=remote_starved,
    )


# ---------------------------------------------------------------------------
# federation solve


def layer_metrics(layer: LayerModel) -> PerfEstimates:
    """Aggregate the target layer's steady state into performance estimates."""
    sc = layer.sc
    geom = layer.geom
    n, mu, sla, lam = sc.n_vms, sc.service_rate, sc.sla_wait, sc.arrival_rate
    lent = 0.0
    borrowed = 0.0
    busy = 0.0
    fwd = 0.0
    for y in range(geom.n_y):
        p = layer.steady_y[y]
        if p == 0.0:
            continue
        q, s, o = geom.y_state(y)
        lent += p * s
        borrowed += p * o
        busy += p * (min(q, n - s) + s)
        backlog = q - (n - s)
        if backlog >= 0:
            servers = n - s + o
            if servers >= 1:
                fwd += p * (1.0 - no_forward_prob(backlog + servers, servers, mu, sla))
            elif not math.isinf(sla):
                fwd += p
    return PerfEstimates(
        lent=lent,
        borrowed=borrowed,
        forwarded=lam * fwd,
        utilization=busy / n,
    )


def _solve_chain(
    spec: FederationSpec,
    order: list[int],
    settings: SolverSettings,
    first_layer: LayerModel | None = None,
) -> list[LayerModel]:
    layers: list[LayerModel] = []
    prev = first_layer
    if prev is not None:
        layers.append(prev)
    for depth, sc_index in enumerate(order, start=1):
        if depth <= len(layers):
            continue
        sc = spec.scs[sc_index]
        pool = spec.pool_excluding(sc_index)
        if prev is None:
            layer = build_layer1(sc, pool, settings)
        else:
            layer = build_layer(depth, sc, pool, prev, settings)
        layers.append(layer)
        prev = layer
    return layers


def solve_federation_approx(
    spec: FederationSpec, target: int
) -> tuple[PerfEstimates, tuple[LayerModel, ...]]:
    """Layered solve with the target cloud last; returns its estimates.

    With ``capacity_feedback`` the chain is solved twice: the borrowing
    levels of the first pass determine the lending load the first layer's
    cloud carries, which the plain first layer cannot see.
    """
    if not 0 <= target < spec.k:
        raise SpecError("target index out of range")
    order = [i for i in range(spec.k) if i != target] + [target]
    settings = spec.solver
    layers = _solve_chain(spec, order, settings)

    first = order[0]
    first_sc = spec.scs[first]
    if (
        settings.capacity_feedback
        and settings.donor_aware
        and first_sc.share_cap > 0
        and spec.k > 1
    ):
        prev_demand = 0.0
        for _pass in range(3):
            demand = 0.0
            weighted_mu = 0.0
            for layer, sc_index in zip(layers[1:], order[1:]):
                sc = spec.scs[sc_index]
                pool_j = spec.pool_excluding(sc_index)
                if pool_j <= 0:
                    continue
                geom = layer.geom
                borrowed = sum(
                    layer.steady_y[y] * geom.y_state(y)[2] for y in range(geom.n_y)
                )
                flux = borrowed * sc.service_rate * first_sc.share_cap / pool_j
                demand += flux
                weighted_mu += flux * sc.service_rate
            if demand <= 0.0 or abs(demand - prev_demand) <= 0.02 * demand:
                break
            prev_demand = demand
            first_layer = build_layer1_with_lending(
                first_sc, spec.pool_excluding(first), demand, weighted_mu / demand,
                settings,
            )
            layers = _solve_chain(spec, order, settings, first_layer=first_layer)

    est = layer_metrics(layers[-1])
    est.check_bounds(spec.scs[target], spec.pool_excluding(target))
    return est, tuple(layers)
