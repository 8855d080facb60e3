import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedshare import ctmc, solo
from fedshare.clouds import SmallCloudSpec, SpecError


def make_spec(n=10, lam=7.0, mu=1.0, sla=0.2, cp=10.0):
    return SmallCloudSpec(
        id="sc", n_vms=n, arrival_rate=lam, service_rate=mu, sla_wait=sla,
        public_cost=cp, fed_cost=0.5 * cp,
    )


def erlang_wait_tail_mc(stages, rate, sla, samples=400_000, seed=7):
    """Monte Carlo of P(Erlang(stages, rate) <= sla): independent oracle."""
    rng = np.random.default_rng(seed)
    waits = rng.gamma(shape=stages, scale=1.0 / rate, size=samples)
    return float((waits <= sla).mean())


class TestNoForwardProb:
    def test_below_capacity_is_one(self):
        assert solo.no_forward_prob(3, 10, 1.0, 0.2) == 1.0

    def test_boundary_value(self):
        # q = n = 10: wait for 1 completion of Poisson(N mu Q = 2)
        assert solo.no_forward_prob(10, 10, 1.0, 0.2) == pytest.approx(
            1 - math.exp(-2), abs=1e-12
        )

    def test_one_queued_value(self):
        assert solo.no_forward_prob(11, 10, 1.0, 0.2) == pytest.approx(
            1 - 3 * math.exp(-2), abs=1e-12
        )

    def test_matches_erlang_tail_mc(self):
        # queueing prob = P(Erlang(q - n + 1, N mu) <= Q)
        got = solo.no_forward_prob(10, 10, 1.0, 0.2)
        mc = erlang_wait_tail_mc(1, 10.0, 0.2)
        assert got == pytest.approx(mc, abs=2e-3)
        got2 = solo.no_forward_prob(11, 10, 1.0, 0.2)
        mc2 = erlang_wait_tail_mc(2, 10.0, 0.2)
        assert got2 == pytest.approx(mc2, abs=2e-3)

    def test_zero_sla_forwards_everything(self):
        assert solo.no_forward_prob(10, 10, 1.0, 0.0) == 0.0

    def test_infinite_sla_never_forwards(self):
        assert solo.no_forward_prob(50, 10, 1.0, math.inf) == 1.0

    def test_large_rate_stable(self):
        # N mu Q up to 1e4 must not overflow and must stay in [0, 1]
        v = solo.no_forward_prob(10_050, 10_000, 1.0, 1.0)
        assert 0.0 <= v <= 1.0

    def test_invalid_params(self):
        with pytest.raises(SpecError):
            solo.no_forward_prob(-1, 10, 1.0, 0.2)

    @settings(max_examples=60, deadline=None)
    @given(
        q=st.integers(min_value=0, max_value=60),
        n=st.integers(min_value=1, max_value=40),
        mu=st.floats(min_value=0.1, max_value=5.0),
        sla=st.floats(min_value=0.0, max_value=3.0),
    )
    def test_monotonicity(self, q, n, mu, sla):
        base = solo.no_forward_prob(q, n, mu, sla)
        assert solo.no_forward_prob(q + 1, n, mu, sla) <= base + 1e-15
        assert solo.no_forward_prob(q, n, mu, sla + 0.5) >= base - 1e-15
        assert solo.no_forward_prob(q, n + 1, mu, sla) >= base - 1e-15

    def test_strictly_decreasing_in_q(self):
        vals = [solo.no_forward_prob(q, 10, 1.0, 0.2) for q in range(10, 25)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestBuildSoloChain:
    def test_zero_sla_is_mmnn(self):
        spec = make_spec(sla=0.0)
        gen, space = solo.build_solo_chain(spec)
        # no queueing states: chain truncates right above N
        assert len(space) == spec.n_vms + 2
        # birth rate out of state N is zero
        assert gen.q[spec.n_vms, spec.n_vms + 1] == 0.0

    def test_infinite_sla_matches_erlang_c_shape(self):
        spec = make_spec(n=5, lam=3.0, mu=1.0, sla=math.inf)
        gen, space = solo.build_solo_chain(spec, tail_eps=1e-9)
        pi = ctmc.steady_state(gen)
        # M/M/N stationary closed form
        n, a = 5, 3.0
        w = [a**k / math.factorial(k) for k in range(n)]
        w += [a**k / (math.factorial(n) * n ** (k - n)) for k in range(n, len(space))]
        expected = np.array(w) / sum(w)
        assert np.abs(pi - expected).max() < 1e-9

    def test_infinite_sla_unstable_raises(self):
        spec = make_spec(n=2, lam=3.0, mu=1.0, sla=math.inf)
        with pytest.raises(SpecError):
            solo.build_solo_chain(spec)

    def test_truncation_point_finite(self):
        spec = make_spec()
        gen, space = solo.build_solo_chain(spec, tail_eps=1e-9)
        assert spec.n_vms + 1 < len(space) <= 41

    def test_truncated_mass_negligible(self):
        spec = make_spec()
        gen, space = solo.build_solo_chain(spec, tail_eps=1e-9)
        pi = ctmc.steady_state(gen)
        assert pi[-1] < 1e-9


class TestSoloMetrics:
    def test_forward_rate_monotone_in_lambda(self):
        rates = [solo.solo_metrics(make_spec(lam=lam)).forward_rate for lam in
                 [2.0, 4.0, 6.0, 8.0, 9.5]]
        assert all(a < b for a, b in zip(rates, rates[1:]))

    def test_light_traffic_limits(self):
        res = solo.solo_metrics(make_spec(lam=1e-4))
        assert res.forward_rate < 1e-8
        assert res.utilization < 1e-4
        assert res.cost < 1e-7

    def test_cost_identity(self):
        spec = make_spec()
        res = solo.solo_metrics(spec)
        assert res.cost == res.forward_rate * spec.public_cost

    def test_work_conservation(self):
        spec = make_spec()
        res = solo.solo_metrics(spec)
        admitted = spec.arrival_rate - res.forward_rate
        served = res.utilization * spec.n_vms * spec.service_rate
        assert admitted == pytest.approx(served, rel=1e-6)

    def test_tight_sla_forwards_more_at_equal_utilization(self):
        # at matched utilization the Q=0.2 curve sits above Q=0.5
        for rho_target in [0.5, 0.7, 0.85]:
            p = {}
            for sla in (0.2, 0.5):
                lam = _lambda_for_rho(10, 1.0, sla, rho_target)
                spec = make_spec(lam=lam, sla=sla)
                res = solo.solo_metrics(spec)
                p[sla] = solo.forward_probability(res, spec)
            assert p[0.2] > p[0.5]

    def test_fewer_vms_forward_more_at_equal_utilization(self):
        for rho_target in [0.5, 0.7]:
            p = {}
            for n in (10, 100):
                lam = _lambda_for_rho(n, 1.0, 0.2, rho_target)
                spec = make_spec(n=n, lam=lam)
                res = solo.solo_metrics(spec)
                p[n] = solo.forward_probability(res, spec)
            assert p[10] > p[100]


def _lambda_for_rho(n, mu, sla, rho_target, tol=1e-10):
    """Invert the monotone lambda -> utilization map by bisection."""
    lo, hi = 1e-6, 3.0 * n * mu
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        spec = SmallCloudSpec(
            id="probe", n_vms=n, arrival_rate=mid, service_rate=mu, sla_wait=sla
        )
        rho = solo.solo_metrics(spec).utilization
        if abs(rho - rho_target) < tol:
            return mid
        if rho < rho_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
