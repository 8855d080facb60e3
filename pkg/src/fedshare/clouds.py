"""Shared domain types: cloud parameters, federation specs, estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


class SpecError(ValueError):
    """Invalid cloud or federation parameters."""


@dataclass(frozen=True)
class SmallCloudSpec:
    """Parameters of one small cloud.

    ``sla_wait`` is the maximum time a request may wait before service
    starts; requests at risk of missing it are forwarded to a public cloud
    at ``public_cost`` per VM-time.  ``share_cap`` is the maximum number of
    VMs exposed to the federation at ``fed_cost`` per VM-time.
    """

    id: str
    n_vms: int
    arrival_rate: float
    service_rate: float
    sla_wait: float
    public_cost: float = 1.0
    fed_cost: float = 0.0
    share_cap: int = 0

    def __post_init__(self):
        if self.n_vms < 1:
            raise SpecError(f"{self.id}: n_vms must be >= 1")
        if self.arrival_rate < 0:
            # zero is allowed so simulations can model a silent cloud
            raise SpecError(f"{self.id}: arrival_rate must be >= 0")
        if not self.service_rate > 0:
            raise SpecError(f"{self.id}: service_rate must be > 0")
        if self.sla_wait < 0:
            raise SpecError(f"{self.id}: sla_wait must be >= 0")
        if self.public_cost < 0 or self.fed_cost < 0:
            raise SpecError(f"{self.id}: costs must be >= 0")
        if self.fed_cost > self.public_cost:
            raise SpecError(f"{self.id}: fed_cost must not exceed public_cost")
        if not 0 <= self.share_cap <= self.n_vms:
            raise SpecError(f"{self.id}: share_cap must be in [0, n_vms]")

    def with_share(self, share_cap: int) -> "SmallCloudSpec":
        return replace(self, share_cap=share_cap)


@dataclass(frozen=True)
class SolverSettings:
    """Numerical knobs shared by the analytical models."""

    tail_eps: float = 1e-9
    steady_tol: float = 1e-10
    fox_glynn_eps: float = 1e-10
    queue_cap: int | None = None  # detailed-model truncation override
    state_budget: int = 250_000
    interaction_mass_eps: float = 1e-12
    exp_weighted_interactions: bool = False
    eager_lending: bool = False  # sensitivity alternative to the saturation rule
    donor_aware: bool = True  # borrow only when a donor can actually provide
    capacity_feedback: bool = True  # second pass feeds lending load back to layer 1

    def __post_init__(self):
        if self.tail_eps <= 0 or self.fox_glynn_eps <= 0 or self.steady_tol <= 0:
            raise SpecError("tolerances must be positive")


@dataclass(frozen=True)
class FederationSpec:
    """Ordered collection of small clouds plus solver settings."""

    scs: tuple[SmallCloudSpec, ...]
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if isinstance(self.scs, list):
            object.__setattr__(self, "scs", tuple(self.scs))
        if len(self.scs) < 1:
            raise SpecError("federation needs at least one cloud")
        ids = [sc.id for sc in self.scs]
        if len(set(ids)) != len(ids):
            raise SpecError("cloud ids must be unique")
        if self.solver.queue_cap is not None:
            need = max(sc.n_vms for sc in self.scs) + 1
            if self.solver.queue_cap < need:
                raise SpecError(f"queue_cap must be >= max n_vms + 1 = {need}")

    @property
    def k(self) -> int:
        return len(self.scs)

    def pool_excluding(self, i: int) -> int:
        """Shared VMs available to cloud ``i`` from everyone else."""
        return sum(sc.share_cap for j, sc in enumerate(self.scs) if j != i)

    def shares(self) -> tuple[int, ...]:
        return tuple(sc.share_cap for sc in self.scs)

    def with_shares(self, shares) -> "FederationSpec":
        if len(shares) != self.k:
            raise SpecError("shares length mismatch")
        return replace(
            self,
            scs=tuple(sc.with_share(int(s)) for sc, s in zip(self.scs, shares)),
        )


@dataclass(frozen=True)
class PerfEstimates:
    """Per-cloud performance triple plus utilization.

    ``lent``/``borrowed`` are mean VMs lent to / borrowed from the
    federation, ``forwarded`` is the mean rate of requests sent to the
    public cloud, ``utilization`` the fraction of own VMs busy.
    """

    lent: float
    borrowed: float
    forwarded: float
    utilization: float

    def __post_init__(self):
        eps = 1e-9
        if min(self.lent, self.borrowed, self.forwarded) < -eps:
            raise SpecError("performance estimates must be nonnegative")
        if not -eps <= self.utilization <= 1.0 + eps:
            raise SpecError("utilization must lie in [0, 1]")

    def check_bounds(self, sc: SmallCloudSpec, pool: int, tol: float = 1e-6):
        if self.lent > sc.share_cap + tol:
            raise SpecError("lent exceeds share cap")
        if self.borrowed > pool + tol:
            raise SpecError("borrowed exceeds federation pool")
        if self.forwarded > sc.arrival_rate + tol:
            raise SpecError("forwarded exceeds arrival rate")


def stable_or_raise(arrival: float, capacity_rate: float, label: str):
    """Reject an infinite-SLA queue with no forwarding relief."""
    if math.isfinite(capacity_rate) and arrival >= capacity_rate:
        raise SpecError(
            f"{label}: unbounded queue (arrival {arrival:g} >= service capacity "
            f"{capacity_rate:g} with an infinite SLA)"
        )
