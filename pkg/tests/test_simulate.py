import math

import numpy as np
import pytest

from fedshare import detailed, simulate, solo
from fedshare.clouds import FederationSpec, SmallCloudSpec, SolverSettings, SpecError


def sc(i, n=1, lam=0.6, mu=1.0, sla=0.2, share=1):
    return SmallCloudSpec(
        id=f"sc{i}", n_vms=n, arrival_rate=lam, service_rate=mu, sla_wait=sla,
        public_cost=10.0, fed_cost=4.0, share_cap=share,
    )


def pair_spec(lam1=0.6, lam2=0.5, share=(1, 1), queue_cap=8):
    return FederationSpec(
        scs=(sc(1, lam=lam1, share=share[0]), sc(2, lam=lam2, share=share[1])),
        solver=SolverSettings(queue_cap=queue_cap),
    )


class TestConfig:
    def test_default_warmup(self):
        cfg = simulate.SimConfig(spec=pair_spec(), horizon=100.0)
        assert cfg.warmup == pytest.approx(10.0)

    def test_bad_batches(self):
        with pytest.raises(SpecError):
            simulate.SimConfig(spec=pair_spec(), horizon=10.0, batches=5)

    def test_bad_horizon(self):
        with pytest.raises(SpecError):
            simulate.SimConfig(spec=pair_spec(), horizon=1.0, warmup=2.0)


class TestReproducibility:
    def test_identical_seeds_identical_output(self):
        cfg = simulate.SimConfig(spec=pair_spec(), horizon=500.0, seed=42)
        a = simulate.run_simulation(cfg)
        b = simulate.run_simulation(cfg)
        assert a.estimates == b.estimates
        assert a.forwarded_counts == b.forwarded_counts
        assert a.halfwidths == b.halfwidths

    def test_different_seeds_differ(self):
        base = dict(spec=pair_spec(), horizon=500.0)
        a = simulate.run_simulation(simulate.SimConfig(seed=1, **base))
        b = simulate.run_simulation(simulate.SimConfig(seed=2, **base))
        assert a.forwarded_counts != b.forwarded_counts


class TestAgainstAnalytical:
    def test_no_sharing_matches_solo(self):
        spec = FederationSpec(
            scs=(sc(1, n=3, lam=2.2, share=0), sc(2, n=2, lam=1.0, share=0)),
        )
        cfg = simulate.SimConfig(spec=spec, horizon=60_000.0, seed=7)
        sim = simulate.run_simulation(cfg)
        for i, cloud in enumerate(spec.scs):
            base = solo.solo_metrics(cloud)
            est, hw = sim.estimates[i], sim.halfwidths[i]
            assert abs(est.forwarded - base.forward_rate) <= 3 * hw["forwarded"]
            assert abs(est.utilization - base.utilization) <= 3 * hw["utilization"]
            assert est.lent == 0.0 and est.borrowed == 0.0

    def test_tiny_federation_matches_detailed(self):
        spec = pair_spec(lam1=0.6, lam2=0.5, queue_cap=6)
        sol = detailed.detailed_metrics(spec, queue_cap=6)
        cfg = simulate.SimConfig(spec=spec, horizon=120_000.0, seed=3)
        sim = simulate.run_simulation(cfg)
        for i in range(2):
            exact, est, hw = sol.estimates[i], sim.estimates[i], sim.halfwidths[i]
            assert abs(est.lent - exact.lent) <= 3 * hw["lent"]
            assert abs(est.borrowed - exact.borrowed) <= 3 * hw["borrowed"]
            assert abs(est.forwarded - exact.forwarded) <= 3 * hw["forwarded"]
            assert abs(est.utilization - exact.utilization) <= 3 * hw["utilization"]

    def test_all_silent_clouds(self):
        spec = FederationSpec(scs=(sc(1, lam=0.0), sc(2, lam=0.0)))
        sim = simulate.run_simulation(
            simulate.SimConfig(spec=spec, horizon=100.0, seed=1)
        )
        for est in sim.estimates:
            assert est.lent == est.borrowed == est.forwarded == est.utilization == 0.0


class TestLittlesLaw:
    def test_admitted_work(self):
        spec = pair_spec(lam1=0.7, lam2=0.5)
        cfg = simulate.SimConfig(spec=spec, horizon=60_000.0, seed=11)
        sim = simulate.run_simulation(cfg)
        horizon = cfg.horizon - cfg.warmup
        for i in range(2):
            admitted_rate = sim.admitted_counts[i] / cfg.horizon
            expected_l = admitted_rate * sim.mean_sojourn[i]
            assert sim.mean_in_system[i] == pytest.approx(expected_l, rel=0.05)


class TestCiBehavior:
    def test_ci_shrinks_with_horizon(self):
        spec = pair_spec()
        hw = []
        for horizon in (4_000.0, 64_000.0):
            sim = simulate.run_simulation(
                simulate.SimConfig(spec=spec, horizon=horizon, seed=5)
            )
            hw.append(sim.halfwidths[0]["utilization"])
        # 16x the horizon should shrink the CI by roughly 4x
        assert hw[1] < hw[0] / 2.0


class TestAudit:
    def test_clean_run(self):
        spec = pair_spec()
        sim = simulate.run_simulation(
            simulate.SimConfig(spec=spec, horizon=2_000.0, seed=9, capture_trace=True)
        )
        report = simulate.conservation_audit(sim.trace, spec)
        assert report.clean
        assert report.events_checked > 100

    def test_injected_double_allocation(self):
        spec = pair_spec()
        sim = simulate.run_simulation(
            simulate.SimConfig(spec=spec, horizon=500.0, seed=9, capture_trace=True)
        )
        broken = list(sim.trace)
        t, kind, owner, host, q, s = broken[10]
        bad_s = ((s[0][0], 5), (s[1][0], s[1][1]))  # s[0][1]=5 borrowed from nowhere
        broken[10] = (t, kind, owner, host, q, bad_s)
        report = simulate.conservation_audit(broken, spec)
        assert not report.clean
        assert any("event 10" in v for v in report.violations)

    def test_requires_trace(self):
        spec = pair_spec()
        sim = simulate.run_simulation(simulate.SimConfig(spec=spec, horizon=100.0))
        with pytest.raises(SpecError):
            simulate.conservation_audit(sim.trace, spec)

    def test_symmetric_time_averages(self):
        spec = pair_spec(lam1=0.6, lam2=0.6)
        sim = simulate.run_simulation(
            simulate.SimConfig(spec=spec, horizon=120_000.0, seed=21)
        )
        a, b = sim.estimates
        tol = 3 * (sim.halfwidths[0]["lent"] + sim.halfwidths[1]["lent"])
        assert abs(a.lent - b.lent) <= tol
        assert abs(a.borrowed - b.borrowed) <= tol


class TestTrueDeadlineMode:
    def test_runs_and_differs(self):
        spec = pair_spec(lam1=0.9, lam2=0.9)
        base = dict(spec=spec, horizon=20_000.0, seed=2)
        prob = simulate.run_simulation(simulate.SimConfig(**base))
        hard = simulate.run_simulation(simulate.SimConfig(true_deadline=True, **base))
        # both modes admit work; deadline mode queues everything on arrival
        assert hard.admitted_counts[0] >= prob.admitted_counts[0]
