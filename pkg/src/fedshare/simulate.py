"""Event-driven simulation of the full federation semantics.

The simulator serves as the reference oracle for the analytical models.  It
mirrors the exact-chain semantics: FCFS per cloud, saturated arrivals
borrow from the least-loaded donor with spare shared capacity, otherwise
they are queued with the SLA-driven no-forward probability, and freed VMs
go to the cloud with the longest queue (host's own queue first, lent VMs
are never preempted).

Estimates come from batch means over the post-warmup horizon; runs are
deterministic given the seed, with one counter-based stream per cloud per
purpose (arrivals, services, routing).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .clouds import FederationSpec, PerfEstimates, SpecError
from .solo import queueing_prob

ARRIVAL, DEPARTURE, DEADLINE = 0, 1, 2


class _Stream:
    """Buffered draws from one counter-based Philox stream."""

    def __init__(self, seed: int, sc: int, purpose: int, block: int = 8192):
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=(seed, sc, purpose)))
        )
        self._block = block
        self._buf = np.empty(0)
        self._pos = 0

    def _refill_exp(self):
        self._buf = self._gen.standard_exponential(self._block)
        self._pos = 0

    def exponential(self, rate: float) -> float:
        if self._pos >= self._buf.size:
            self._refill_exp()
        v = self._buf[self._pos]
        self._pos += 1
        return v / rate


class _Uniforms(_Stream):
    def _refill_exp(self):
        self._buf = self._gen.random(self._block)
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= self._buf.size:
            self._refill_exp()
        v = self._buf[self._pos]
        self._pos += 1
        return float(v)

    def choice(self, options):
        if len(options) == 1:
            return options[0]
        return options[int(self.uniform() * len(options)) % len(options)]


@dataclass(frozen=True)
class SimConfig:
    spec: FederationSpec
    horizon: float
    warmup: float = -1.0  # default: 10% of horizon
    seed: int = 0
    batches: int = 20
    capture_trace: bool = False
    trace_limit: int = 200_000
    true_deadline: bool = False  # exploratory admission variant

    def __post_init__(self):
        warm = 0.1 * self.horizon if self.warmup < 0 else self.warmup
        object.__setattr__(self, "warmup", warm)
        if not self.horizon > self.warmup >= 0:
            raise SpecError("need horizon > warmup >= 0")
        if self.batches < 10:
            raise SpecError("need at least 10 batches")


@dataclass(frozen=True)
class SimEstimates:
    estimates: tuple[PerfEstimates, ...]
    halfwidths: tuple[dict, ...]  # 95% CI per metric, same order as estimates
    forwarded_counts: tuple[int, ...]
    admitted_counts: tuple[int, ...]
    mean_sojourn: tuple[float, ...]
    mean_in_system: tuple[float, ...]
    warnings: tuple[str, ...] = ()
    trace: tuple | None = None


def run_simulation(cfg: SimConfig) -> SimEstimates:
    spec = cfg.spec
    k = spec.k
    n = [sc.n_vms for sc in spec.scs]
    cap = [sc.share_cap for sc in spec.scs]
    lam = [sc.arrival_rate for sc in spec.scs]
    mu = [sc.service_rate for sc in spec.scs]
    sla = [sc.sla_wait for sc in spec.scs]

    arrivals = [_Stream(cfg.seed, i, 0) for i in range(k)]
    services = [_Stream(cfg.seed, i, 1) for i in range(k)]
    routing = [_Uniforms(cfg.seed, i, 2) for i in range(k)]

    own_busy = [0] * k
    lent = [0] * k  # s[i][i]: VMs at i serving others
    matrix = [[0] * k for _ in range(k)]  # matrix[i][j]: VMs at j used by i
    queue: list[list[float]] = [[] for _ in range(k)]
    qhead = [0] * k

    heap: list[tuple] = []
    seq = 0
    for i in range(k):
        if lam[i] > 0:
            heapq.heappush(heap, (arrivals[i].exponential(lam[i]), seq, ARRIVAL, i, -1, 0.0))
            seq += 1

    # batch accumulators over (warmup, horizon]
    nb = cfg.batches
    span = (cfg.horizon - cfg.warmup) / nb
    lent_int = np.zeros((nb, k))
    borrowed_int = np.zeros((nb, k))
    busy_int = np.zeros((nb, k))
    insys_int = np.zeros((nb, k))
    fwd_cnt = np.zeros((nb, k))
    adm_cnt = np.zeros((nb, k))
    sojourn_sum = np.zeros(k)
    sojourn_n = np.zeros(k)
    total_fwd = [0] * k
    total_adm = [0] * k

    trace: list[tuple] | None = [] if cfg.capture_trace else None

    now = 0.0

    def batch_of(t: float) -> int:
        b = int((t - cfg.warmup) / span)
        return min(max(b, 0), nb - 1)

    def integrate(t0: float, t1: float):
        lo = max(t0, cfg.warmup)
        if t1 <= lo:
            return
        borrowed_now = [sum(matrix[i][j] for j in range(k) if j != i) for i in range(k)]
        t = lo
        while t < t1 - 1e-15:
            b = batch_of(t)
            edge = min(cfg.warmup + (b + 1) * span, t1)
            dt = edge - t
            for i in range(k):
                lent_int[b, i] += lent[i] * dt
                borrowed_int[b, i] += borrowed_now[i] * dt
                busy_int[b, i] += (own_busy[i] + lent[i]) * dt
                insys_int[b, i] += (
                    own_busy[i] + len(queue[i]) - qhead[i] + borrowed_now[i]
                ) * dt
            t = edge

    def queued_len(i: int) -> int:
        return len(queue[i]) - qhead[i]

    def q_of(i: int) -> int:
        return own_busy[i] + queued_len(i)

    def start_service(owner: int, host: int, arr_time: float):
        nonlocal seq
        dep = now + services[owner].exponential(mu[owner])
        heapq.heappush(heap, (dep, seq, DEPARTURE, owner, host, arr_time))
        seq += 1

    def pop_queue(i: int) -> float:
        nonlocal qhead
        t = queue[i][qhead[i]]
        qhead[i] += 1
        if qhead[i] > 512 and qhead[i] * 2 > len(queue[i]):
            del queue[i][: qhead[i]]
            qhead[i] = 0
        return t

    def record(kind: str, owner: int, host: int):
        if trace is not None and len(trace) < cfg.trace_limit:
            trace.append(
                (
                    now,
                    kind,
                    owner,
                    host,
                    tuple(q_of(i) for i in range(k)),
                    tuple(tuple(matrix[i][j] if i != j else lent[i] for j in range(k)) for i in range(k)),
                )
            )

    while heap:
        t, _s, kind, owner, host, arr_time = heapq.heappop(heap)
        if t > cfg.horizon:
            integrate(now, cfg.horizon)
            now = cfg.horizon
            break
        integrate(now, t)
        now = t

        if kind == ARRIVAL:
            i = owner
            heapq.heappush(heap, (now + arrivals[i].exponential(lam[i]), seq, ARRIVAL, i, -1, 0.0))
            seq += 1
            if own_busy[i] + lent[i] < n[i]:
                own_busy[i] += 1
                start_service(i, i, now)
                _admit(adm_cnt, total_adm, batch_of(now), i, now, cfg)
                record("arrive_local", i, i)
            else:
                donors = [
                    j
                    for j in range(k)
                    if j != i and q_of(j) + lent[j] < n[j] and lent[j] < cap[j]
                ]
                if donors:
                    least = min(q_of(j) + lent[j] for j in donors)
                    j = routing[i].choice([d for d in donors if q_of(d) + lent[d] == least])
                    matrix[i][j] += 1
                    lent[j] += 1
                    start_service(i, j, now)
                    _admit(adm_cnt, total_adm, batch_of(now), i, now, cfg)
                    record("arrive_borrow", i, j)
                else:
                    servers = (n[i] - lent[i]) + sum(
                        matrix[i][j] for j in range(k) if j != i
                    )
                    if cfg.true_deadline:
                        # request waits; a deadline event forwards it if
                        # service has not started by then
                        queue[i].append(now)
                        _admit(adm_cnt, total_adm, batch_of(now), i, now, cfg)
                        if math.isfinite(sla[i]):
                            heapq.heappush(
                                heap, (now + sla[i], seq, DEADLINE, i, -1, now)
                            )
                            seq += 1
                        record("arrive_queue", i, i)
                    else:
                        thin = queueing_prob(queued_len(i), servers, mu[i], sla[i])
                        if routing[i].uniform() < thin:
                            queue[i].append(now)
                            _admit(adm_cnt, total_adm, batch_of(now), i, now, cfg)
                            record("arrive_queue", i, i)
                        else:
                            if now > cfg.warmup:
                                fwd_cnt[batch_of(now), i] += 1
                            total_fwd[i] += 1
                            record("forward", i, -1)
        elif kind == DEADLINE:
            i = owner
            # FIFO queue and ordered deadlines: only the head can expire
            if queued_len(i) > 0 and queue[i][qhead[i]] == arr_time:
                pop_queue(i)
                total_fwd[i] += 1
                total_adm[i] -= 1
                if now > cfg.warmup:
                    fwd_cnt[batch_of(now), i] += 1
                    adm_cnt[batch_of(now), i] -= 1
                record("renege_forward", i, -1)
        else:
            i, h = owner, host
            if now > cfg.warmup:
                sojourn_sum[i] += now - arr_time
                sojourn_n[i] += 1
            if h == i:
                own_busy[i] -= 1
                if queued_len(i) > 0:
                    at = pop_queue(i)
                    own_busy[i] += 1
                    start_service(i, i, at)
                    record("depart_serve_own", i, i)
                else:
                    needy = [l for l in range(k) if l != i and queued_len(l) > 0]
                    if needy and lent[i] < cap[i]:
                        most = max(queued_len(l) for l in needy)
                        m = routing[i].choice([l for l in needy if queued_len(l) == most])
                        at = pop_queue(m)
                        matrix[m][i] += 1
                        lent[i] += 1
                        start_service(m, i, at)
                        record("depart_lend", i, i)
                    else:
                        record("depart_idle", i, i)
            else:
                matrix[i][h] -= 1
                lent[h] -= 1
                if queued_len(h) > 0:
                    at = pop_queue(h)
                    own_busy[h] += 1
                    start_service(h, h, at)
                    record("depart_reclaim", i, h)
                else:
                    needy = [l for l in range(k) if l != h and queued_len(l) > 0]
                    if needy:
                        most = max(queued_len(l) for l in needy)
                        m = routing[h].choice([l for l in needy if queued_len(l) == most])
                        at = pop_queue(m)
                        matrix[m][h] += 1
                        lent[h] += 1
                        start_service(m, h, at)
                        record("depart_relend", i, h)
                    else:
                        record("depart_return", i, h)
    else:
        integrate(now, cfg.horizon)

    return _collect(cfg, span, lent_int, borrowed_int, busy_int, insys_int,
                    fwd_cnt, adm_cnt, sojourn_sum, sojourn_n, total_fwd,
                    total_adm, trace)


def _admit(adm_cnt, total_adm, b, i, now, cfg):
    if now > cfg.warmup:
        adm_cnt[b, i] += 1
    total_adm[i] += 1


def _collect(cfg, span, lent_int, borrowed_int, busy_int, insys_int, fwd_cnt,
             adm_cnt, sojourn_sum, sojourn_n, total_fwd, total_adm, trace):
    spec = cfg.spec
    k = spec.k
    nb = cfg.batches
    tcrit = float(stats.t.ppf(0.975, nb - 1))
    warnings = []

    lent_b = lent_int / span
    borrowed_b = borrowed_int / span
    busy_b = busy_int / span
    fwd_b = fwd_cnt / span

    estimates = []
    halfwidths = []
    for i in range(k):
        def ci(samples):
            m = float(samples.mean())
            hw = tcrit * float(samples.std(ddof=1)) / math.sqrt(nb)
            return m, hw

        li, li_hw = ci(lent_b[:, i])
        oi, oi_hw = ci(borrowed_b[:, i])
        pi, pi_hw = ci(fwd_b[:, i])
        rho_samples = busy_b[:, i] / spec.scs[i].n_vms
        ri, ri_hw = ci(rho_samples)
        if adm_cnt[:, i].min() == 0 and spec.scs[i].arrival_rate > 0:
            warnings.append(f"{spec.scs[i].id}: empty batch, confidence widened")
            li_hw, oi_hw, pi_hw, ri_hw = (
                max(li_hw, li), max(oi_hw, oi), max(pi_hw, pi), max(ri_hw, ri),
            )
        estimates.append(
            PerfEstimates(
                lent=max(li, 0.0),
                borrowed=max(oi, 0.0),
                forwarded=max(pi, 0.0),
                utilization=min(max(ri, 0.0), 1.0),
            )
        )
        halfwidths.append(
            {"lent": li_hw, "borrowed": oi_hw, "forwarded": pi_hw, "utilization": ri_hw}
        )

    denom = cfg.horizon - cfg.warmup
    return SimEstimates(
        estimates=tuple(estimates),
        halfwidths=tuple(halfwidths),
        forwarded_counts=tuple(int(f) for f in total_fwd),
        admitted_counts=tuple(int(a) for a in total_adm),
        mean_sojourn=tuple(
            float(sojourn_sum[i] / sojourn_n[i]) if sojourn_n[i] else 0.0
            for i in range(k)
        ),
        mean_in_system=tuple(float(insys_int[:, i].sum() / denom) for i in range(k)),
        warnings=tuple(warnings),
        trace=tuple(trace) if trace is not None else None,
    )


@dataclass
class AuditReport:
    clean: bool
    violations: list = field(default_factory=list)
    events_checked: int = 0


def conservation_audit(trace, spec: FederationSpec) -> AuditReport:
    """Check every captured event for allocation consistency.

    Verifies that no VM is double-allocated (busy VMs at a host never
    exceed its capacity), lent VMs stay within each share cap, and total
    lent equals total borrowed at every instant.
    """
    if trace is None:
        raise SpecError("simulation ran without trace capture")
    k = spec.k
    report = AuditReport(clean=True)
    for idx, (t, kind, owner, host, q, s) in enumerate(trace):
        def flag(msg):
            report.clean = False
            report.violations.append(
                f"event {idx} at t={t:.6g} ({kind}, owner={owner}, host={host}): {msg}"
            )

        total_lent = 0
        total_borrowed = 0
        for i in range(k):
            diag = s[i][i]
            col = sum(s[j][i] for j in range(k) if j != i)
            if diag != col:
                flag(f"cloud {i}: lent count {diag} != column sum {col}")
            if diag > spec.scs[i].share_cap:
                flag(f"cloud {i}: lent {diag} exceeds share cap")
            if diag < 0 or any(s[i][j] < 0 for j in range(k)):
                flag(f"cloud {i}: negative allocation")
            own_busy = min(q[i], spec.scs[i].n_vms - diag)
            if own_busy + diag > spec.scs[i].n_vms:
                flag(f"cloud {i}: double-allocated VM ({own_busy}+{diag} busy)")
            total_lent += diag
            total_borrowed += sum(s[i][j] for j in range(k) if j != i)
        if total_lent != total_borrowed:
            flag(f"lent {total_lent} != borrowed {total_borrowed}")
        report.events_checked += 1
    return report
