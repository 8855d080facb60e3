"""No-sharing baseline: SLA-driven forwarding at a single small cloud.

An arriving request that cannot start service immediately is queued only if
it would still meet the SLA wait bound, otherwise it is forwarded to a
public cloud.  The queue-length process is then a birth-death chain whose
birth rates are thinned by the no-forward probability, which makes the
effective chain finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import ctmc
from .clouds import SmallCloudSpec, SpecError, stable_or_raise


def no_forward_prob(q: int, n: int, mu: float, sla: float) -> float:
    """Probability that a request arriving with ``q`` in system is queued.

    With ``q < n`` a VM is free and the request is always accepted.  With
    all ``n`` VMs busy the request is queued iff service would start within
    ``sla``, i.e. at least ``q - n + 1`` of the busy VMs complete in time;
    completions form a Poisson process with rate ``n * mu``.
    """
    if q < 0 or n < 1 or mu <= 0 or sla < 0:
        raise SpecError("no_forward_prob: invalid parameters")
    if q < n:
        return 1.0
    if math.isinf(sla):
        return 1.0
    # upper tail of Poisson(n*mu*sla) beyond q-n completions, overflow-safe
    return float(stats.poisson.sf(q - n, n * mu * sla))


def queueing_prob(backlog: int, servers: int, mu: float, sla: float) -> float:
    """No-forward probability given ``backlog`` waiting and ``servers`` busy."""
    if backlog < 0:
        return 1.0
    if servers <= 0:
        # nothing is draining this cloud's work: a finite wait bound is
        # certainly missed, an infinite one trivially met
        return 1.0 if math.isinf(sla) else 0.0
    return no_forward_prob(backlog + servers, servers, mu, sla)


def queue_cutoff(
    n: int, arrival: float, mu: float, sla: float, tail_eps: float
) -> int:
    """Truncation point for the thinned queue-length chain.

    Smallest ``k_max >= n + 1`` where the thinned arrival rate drops below
    ``tail_eps * arrival`` and a geometric bound on the stationary mass
    beyond the cut is below ``tail_eps``.
    """
    if math.isinf(sla):
        stable_or_raise(arrival, n * mu, "queue_cutoff")
        rho = arrival / (n * mu)
        k = max(n + 1, int(math.ceil(n + math.log(tail_eps) / math.log(rho))))
        return k
    k = n + 1
    log_w = 0.0  # log of the unnormalized stationary weight at k
    while True:
        thinned = no_forward_prob(k, n, mu, sla)
        ratio = arrival * thinned / (min(k + 1, n) * mu)
        if thinned < tail_eps and ratio < 1.0:
            # geometric residual-mass bound relative to the mass at k
            if ratio / (1.0 - ratio) < tail_eps:
                return k
        log_w += math.log(max(arrival * thinned, 1e-300)) - math.log(
            min(k + 1, n) * mu
        )
        k += 1
        if k > 100 * n + 1000:
            raise SpecError("queue truncation did not converge")


def build_solo_chain(
    spec: SmallCloudSpec, tail_eps: float = 1e-9
) -> tuple[ctmc.Generator, ctmc.StateSpace]:
    """Birth-death chain over the number of requests in system.

    Birth rate ``arrival * no_forward_prob(k)``, death rate ``min(k, N) *
    mu``; truncated per :func:`queue_cutoff`.
    """
    n, lam, mu, sla = spec.n_vms, spec.arrival_rate, spec.service_rate, spec.sla_wait
    if math.isinf(sla):
        stable_or_raise(lam, n * mu, spec.id)
    k_max = queue_cutoff(n, lam, mu, sla, tail_eps)
    rows, cols, rates = [], [], []
    for k in range(k_max):
        birth = lam * no_forward_prob(k, n, mu, sla)
        if birth > 0.0:
            rows.append(k)
            cols.append(k + 1)
            rates.append(birth)
    for k in range(1, k_max + 1):
        rows.append(k)
        cols.append(k - 1)
        rates.append(min(k, n) * mu)
    gen = ctmc.Generator(k_max + 1, rows, cols, rates)
    return gen, ctmc.StateSpace(range(k_max + 1))


@dataclass(frozen=True)
class SoloResult:
    forward_rate: float  # requests/time sent to the public cloud
    utilization: float
    cost: float  # currency/time, forwarding only (nothing lent or borrowed)
    pi: np.ndarray

    def __post_init__(self):
        if self.forward_rate < -1e-12 or not -1e-12 <= self.utilization <= 1 + 1e-12:
            raise SpecError("invalid solo metrics")


def solo_metrics(
    spec: SmallCloudSpec, tail_eps: float = 1e-9, steady_tol: float = 1e-10
) -> SoloResult:
    """Baseline forward rate, utilization and cost without sharing."""
    if spec.arrival_rate == 0.0:
        pi0 = np.zeros(spec.n_vms + 1)
        pi0[0] = 1.0
        return SoloResult(forward_rate=0.0, utilization=0.0, cost=0.0, pi=pi0)
    gen, space = build_solo_chain(spec, tail_eps)
    pi = ctmc.steady_state(gen, steady_tol)
    n, lam, mu, sla = spec.n_vms, spec.arrival_rate, spec.service_rate, spec.sla_wait
    ks = np.arange(len(space))
    pnf = np.array([no_forward_prob(int(k), n, mu, sla) for k in ks])
    p_forward = float(((1.0 - pnf) * pi)[ks >= n].sum())
    busy = np.minimum(ks, n)
    rho = float((busy * pi).sum() / n)
    forward_rate = lam * p_forward
    return SoloResult(
        forward_rate=forward_rate,
        utilization=rho,
        cost=forward_rate * spec.public_cost,
        pi=pi,
    )


def forward_probability(result: SoloResult, spec: SmallCloudSpec) -> float:
    if spec.arrival_rate == 0.0:
        return 0.0
    return result.forward_rate / spec.arrival_rate
