"""Exact federation CTMC, buildable for small federations only.

A state is ``(q, s)`` where ``q[i]`` counts cloud ``i``'s own requests that
are queued or in service at cloud ``i`` and ``s[i][j]`` (``i != j``) counts
VMs at cloud ``j`` working for cloud ``i``; the diagonal ``s[i][i]`` is the
derived column sum, i.e. VMs at cloud ``i`` serving others.  The state
space is exponential in the federation size, which is why the layered
approximation exists; this module is the ground truth it is checked
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ctmc
from .clouds import FederationSpec, PerfEstimates, SpecError
from .solo import queue_cutoff, queueing_prob

MAX_EXACT_CLOUDS = 3


class SizeError(SpecError):
    def __init__(self, count: int, budget: int):
        super().__init__(
            f"detailed state space has {count} states, over the budget of {budget}"
        )
        self.count = count


def _column_options(cap: int, m: int):
    """All nonnegative integer m-vectors with sum <= cap."""
    if m == 0:
        yield ()
        return
    for head in range(cap + 1):
        for rest in _column_options(cap - head, m - 1):
            yield (head,) + rest


def count_detailed_states(spec: FederationSpec, queue_cap: int) -> int:
    k = spec.k
    count = (queue_cap + 1) ** k
    for sc in spec.scs:
        count *= math.comb(sc.share_cap + k - 1, k - 1)
    return count


def default_queue_cap(spec: FederationSpec) -> int:
    if spec.solver.queue_cap is not None:
        return spec.solver.queue_cap
    cap = 0
    for i, sc in enumerate(spec.scs):
        cap = max(
            cap,
            queue_cutoff(
                sc.n_vms + spec.pool_excluding(i),
                sc.arrival_rate,
                sc.service_rate,
                sc.sla_wait,
                spec.solver.tail_eps,
            ),
        )
    return cap


def enumerate_detailed_states(
    spec: FederationSpec, queue_cap: int | None = None
) -> ctmc.StateSpace:
    """All states satisfying the sharing constraints, ``q_i <= queue_cap``."""
    if spec.k > MAX_EXACT_CLOUDS:
        raise SpecError(f"detailed model limited to {MAX_EXACT_CLOUDS} clouds")
    cap = default_queue_cap(spec) if queue_cap is None else queue_cap
    count = count_detailed_states(spec, cap)
    if count > spec.solver.state_budget:
        raise SizeError(count, spec.solver.state_budget)

    k = spec.k
    columns = []  # per host j: choices of (s[i][j] for i != j)
    for j, sc in enumerate(spec.scs):
        columns.append(list(_column_options(sc.share_cap, k - 1)))

    def build_s(col_choice):
        s = [[0] * k for _ in range(k)]
        for j in range(k):
            others = [i for i in range(k) if i != j]
            for i, v in zip(others, col_choice[j]):
                s[i][j] = v
            s[j][j] = sum(col_choice[j])
        return tuple(tuple(row) for row in s)

    states = []
    q_ranges = [range(cap + 1)] * k

    def rec_q(pos, acc):
        if pos == k:
            yield tuple(acc)
            return
        for q in q_ranges[pos]:
            acc.append(q)
            yield from rec_q(pos + 1, acc)
            acc.pop()

    def rec_cols(pos, acc):
        if pos == k:
            yield tuple(acc)
            return
        for c in columns[pos]:
            acc.append(c)
            yield from rec_cols(pos + 1, acc)
            acc.pop()

    s_choices = [build_s(c) for c in rec_cols(0, [])]
    for q in rec_q(0, []):
        for s in s_choices:
            states.append((q, s))
    return ctmc.StateSpace(states)


def _transitions_from(spec: FederationSpec, state, queue_cap: int):
    """Yield ``(next_state, rate)`` pairs for one state."""
    q, s = state
    k = spec.k
    n = [sc.n_vms for sc in spec.scs]
    cap = [sc.share_cap for sc in spec.scs]
    own_capacity = [n[i] - s[i][i] for i in range(k)]
    own_busy = [min(q[i], own_capacity[i]) for i in range(k)]
    queued = [q[i] - own_busy[i] for i in range(k)]
    borrowed = [sum(s[i][j] for j in range(k) if j != i) for i in range(k)]

    def bump_q(i, delta, qq=None):
        qq = list(q if qq is None else qq)
        qq[i] += delta
        return tuple(qq)

    def bump_s(pairs, ss=None):
        ss = [list(row) for row in (s if ss is None else ss)]
        for (i, j, delta) in pairs:
            ss[i][j] += delta
        return tuple(tuple(row) for row in ss)

    for i, sc in enumerate(spec.scs):
        lam, mu, sla = sc.arrival_rate, sc.service_rate, sc.sla_wait
        # --- arrival at cloud i
        if q[i] + s[i][i] < n[i]:
            yield (bump_q(i, 1), s), lam
        else:
            donors = [
                l
                for l in range(k)
                if l != i and q[l] + s[l][l] < n[l] and s[l][l] < cap[l]
            ]
            if donors:
                least = min(q[l] + s[l][l] for l in donors)
                chosen = [l for l in donors if q[l] + s[l][l] == least]
                for j in chosen:
                    yield (q, bump_s([(i, j, 1), (j, j, 1)])), lam / len(chosen)
            elif q[i] < queue_cap:
                thin = queueing_prob(queued[i], own_capacity[i] + borrowed[i], mu, sla)
                if thin > 0.0:
                    yield (bump_q(i, 1), s), lam * thin

        # --- departure from an own VM serving own work
        if own_busy[i] > 0:
            rate = own_busy[i] * mu
            if queued[i] > 0:
                yield (bump_q(i, -1), s), rate
            else:
                needy = [l for l in range(k) if l != i and queued[l] > 0]
                if needy and s[i][i] < cap[i]:
                    most = max(queued[l] for l in needy)
                    chosen = [l for l in needy if queued[l] == most]
                    for m in chosen:
                        yield (
                            bump_q(m, -1, bump_q(i, -1)),
                            bump_s([(m, i, 1), (i, i, 1)]),
                        ), rate / len(chosen)
                else:
                    yield (bump_q(i, -1), s), rate

        # --- departure from a VM of host j working for cloud i
        for j in range(k):
            if j == i or s[i][j] == 0:
                continue
            rate = s[i][j] * mu
            if queued[j] > 0:
                # host reclaims the VM for its own queued work
                yield (q, bump_s([(i, j, -1), (j, j, -1)])), rate
                continue
            needy = [l for l in range(k) if l != j and queued[l] > 0]
            if needy:
                most = max(queued[l] for l in needy)
                chosen = [l for l in needy if queued[l] == most]
                for m in chosen:
                    yield (
                        bump_q(m, -1),
                        bump_s([(i, j, -1), (m, j, 1)]),
                    ), rate / len(chosen)
            else:
                yield (q, bump_s([(i, j, -1), (j, j, -1)])), rate


def build_detailed_generator(
    spec: FederationSpec, queue_cap: int | None = None
) -> tuple[ctmc.Generator, ctmc.StateSpace]:
    cap = default_queue_cap(spec) if queue_cap is None else queue_cap
    space = enumerate_detailed_states(spec, cap)
    rows, cols, rates = [], [], []
    for idx, state in enumerate(space):
        for nxt, rate in _transitions_from(spec, state, cap):
            j = space.index_of(nxt)
            if j != idx and rate > 0.0:
                rows.append(idx)
                cols.append(j)
                rates.append(rate)
    return ctmc.Generator(len(space), rows, cols, rates), space


def empty_state(spec: FederationSpec):
    k = spec.k
    return (tuple([0] * k), tuple(tuple([0] * k) for _ in range(k)))


def reachable_indices(spec, space, queue_cap) -> np.ndarray:
    """Forward closure from the empty federation state."""
    start = space.index_of(empty_state(spec))
    seen = {start}
    stack = [start]
    while stack:
        idx = stack.pop()
        for nxt, rate in _transitions_from(spec, space[idx], queue_cap):
            if rate <= 0.0:
                continue
            j = space.index_of(nxt)
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return np.fromiter(sorted(seen), dtype=np.int64)


@dataclass(frozen=True)
class DetailedSolution:
    space: ctmc.StateSpace
    pi: np.ndarray  # over the full enumerated space, zero off the reachable part
    estimates: tuple[PerfEstimates, ...]
    queue_cap: int
    tail_mass: float  # stationary mass at the truncation boundary


def detailed_metrics(
    spec: FederationSpec, queue_cap: int | None = None
) -> DetailedSolution:
    """Solve the exact chain and aggregate per-cloud estimates."""
    cap = default_queue_cap(spec) if queue_cap is None else queue_cap
    space = enumerate_detailed_states(spec, cap)
    reach = reachable_indices(spec, space, cap)
    sub_index = {int(g): l for l, g in enumerate(reach)}

    rows, cols, rates = [], [], []
    for local, global_idx in enumerate(reach):
        for nxt, rate in _transitions_from(spec, space[int(global_idx)], cap):
            tgt = sub_index[space.index_of(nxt)]
            if tgt != local and rate > 0.0:
                rows.append(local)
                cols.append(tgt)
                rates.append(rate)
    gen = ctmc.Generator(len(reach), rows, cols, rates)
    pi_sub = ctmc.steady_state(gen, spec.solver.steady_tol)
    pi = np.zeros(len(space))
    pi[reach] = pi_sub

    k = spec.k
    n = [sc.n_vms for sc in spec.scs]
    lent = np.zeros(k)
    borrowed = np.zeros(k)
    fwd_prob = np.zeros(k)
    busy = np.zeros(k)
    tail_mass = 0.0
    for idx, (q, s) in enumerate(space):
        p = pi[idx]
        if p == 0.0:
            continue
        if max(q) == cap:
            tail_mass += p
        for i, sc in enumerate(spec.scs):
            own_cap_i = n[i] - s[i][i]
            own_busy_i = min(q[i], own_cap_i)
            queued_i = q[i] - own_busy_i
            borrowed_i = sum(s[i][j] for j in range(k) if j != i)
            lent[i] += p * s[i][i]
            borrowed[i] += p * borrowed_i
            busy[i] += p * (own_busy_i + s[i][i])
            if q[i] + s[i][i] >= n[i]:
                donors = [
                    l
                    for l in range(k)
                    if l != i
                    and q[l] + s[l][l] < n[l]
                    and s[l][l] < spec.scs[l].share_cap
                ]
                if not donors:
                    fwd_prob[i] += p * (
                        1.0
                        - queueing_prob(
                            queued_i, own_cap_i + borrowed_i, sc.service_rate, sc.sla_wait
                        )
                    )

    estimates = tuple(
        PerfEstimates(
            lent=float(lent[i]),
            borrowed=float(borrowed[i]),
            forwarded=float(spec.scs[i].arrival_rate * fwd_prob[i]),
            utilization=float(busy[i] / n[i]),
        )
        for i in range(k)
    )
    return DetailedSolution(
        space=space, pi=pi, estimates=estimates, queue_cap=cap, tail_mass=tail_mass
    )
