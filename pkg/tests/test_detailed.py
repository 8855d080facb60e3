import math

import numpy as np
import pytest

from fedshare import ctmc, detailed, solo
from fedshare.clouds import FederationSpec, SmallCloudSpec, SolverSettings


def sc(i, n=1, lam=0.6, mu=1.0, sla=0.2, share=1):
    return SmallCloudSpec(
        id=f"sc{i}", n_vms=n, arrival_rate=lam, service_rate=mu, sla_wait=sla,
        public_cost=10.0, fed_cost=4.0, share_cap=share,
    )


def tiny_pair(lam1=0.6, lam2=0.5, share=(1, 1), queue_cap=6, sla=0.2):
    return FederationSpec(
        scs=(
            sc(1, lam=lam1, sla=sla, share=share[0]),
            sc(2, lam=lam2, sla=sla, share=share[1]),
        ),
        solver=SolverSettings(queue_cap=queue_cap),
    )


def brute_force_states(spec, queue_cap):
    """Independent enumerator: filter a raw product space by the invariants."""
    k = spec.k
    caps = [s.share_cap for s in spec.scs]
    raw_entries = []

    def all_matrices(pos, acc):
        if pos == k * k:
            yield tuple(tuple(acc[r * k:(r + 1) * k]) for r in range(k))
            return
        i, j = divmod(pos, k)
        hi = caps[j]
        for v in range(hi + 1):
            acc.append(v)
            yield from all_matrices(pos + 1, acc)
            acc.pop()

    def all_q(pos, acc):
        if pos == k:
            yield tuple(acc)
            return
        for v in range(queue_cap + 1):
            acc.append(v)
            yield from all_q(pos + 1, acc)
            acc.pop()

    valid = []
    for s in all_matrices(0, []):
        ok = True
        for i in range(k):
            col = sum(s[j][i] for j in range(k) if j != i)
            if s[i][i] != col or col > caps[i]:
                ok = False
                break
            for j in range(k):
                if s[i][j] > caps[j]:
                    ok = False
        if ok:
            valid.append(s)
    return [(q, s) for q in all_q(0, []) for s in valid]


class TestEnumeration:
    def test_single_cloud_degenerate(self):
        spec = FederationSpec(
            scs=(sc(1, n=2, lam=0.5, share=0),),
            solver=SolverSettings(queue_cap=4),
        )
        space = detailed.enumerate_detailed_states(spec, 4)
        assert len(space) == 5

    def test_matches_brute_force(self):
        spec = tiny_pair(queue_cap=2)
        space = detailed.enumerate_detailed_states(spec, 2)
        expected = brute_force_states(spec, 2)
        assert sorted(space.states) == sorted(expected)

    def test_relabeling_invariance(self):
        spec = tiny_pair(lam1=0.6, lam2=0.6)
        swapped = FederationSpec(scs=spec.scs[::-1], solver=spec.solver)
        a = detailed.enumerate_detailed_states(spec, 3)
        b = detailed.enumerate_detailed_states(swapped, 3)
        assert len(a) == len(b)

    def test_budget_guard(self):
        spec = FederationSpec(
            scs=(sc(1, n=3, share=3), sc(2, n=3, share=3), sc(3, n=3, share=3)),
            solver=SolverSettings(queue_cap=30, state_budget=1000),
        )
        with pytest.raises(detailed.SizeError) as exc:
            detailed.enumerate_detailed_states(spec)
        assert exc.value.count > 1000

    def test_too_many_clouds(self):
        spec = FederationSpec(scs=tuple(sc(i) for i in range(4)))
        with pytest.raises(Exception):
            detailed.enumerate_detailed_states(spec, 3)


class TestGenerator:
    def test_rows_sum_zero_and_targets_valid(self):
        spec = tiny_pair()
        gen, space = detailed.build_detailed_generator(spec)
        rs = np.abs(np.asarray(gen.q.sum(axis=1)).ravel())
        assert rs.max() < 1e-12
        valid = set(brute_force_states(spec, 6))
        coo = gen.q.tocoo()
        for i, j in zip(coo.row, coo.col):
            assert space[j] in valid

    def test_idle_state_has_only_arrivals(self):
        spec = tiny_pair()
        gen, space = detailed.build_detailed_generator(spec)
        idx = space.index_of(detailed.empty_state(spec))
        row = gen.q.getrow(idx).toarray().ravel()
        targets = [space[j] for j in np.nonzero(row > 0)[0] if j != idx]
        for (q, s) in targets:
            assert sum(q) == 1 and all(v == 0 for r in s for v in r)
        assert len(targets) == 2

    def test_hand_enumerated_transitions(self):
        # N=(1,1), S=(1,1), mu=1: transitions out of three chosen states,
        # derived by hand from the sharing semantics
        lam1, lam2, q_sla = 0.6, 0.5, 0.2
        spec = tiny_pair(lam1=lam1, lam2=lam2, queue_cap=2)
        gen, space = detailed.build_detailed_generator(spec, 2)

        def row(state):
            i = space.index_of(state)
            r = gen.q.getrow(i).toarray().ravel()
            return {
                space[j]: r[j] for j in np.nonzero(r)[0] if j != i and r[j] > 0
            }

        z = ((0, 0), (0, 0))
        s_zero = (z[1], z[1])

        # SC1 busy with its own request, nothing shared
        out = row(((1, 0), s_zero))
        expected = {
            # SC1 arrival borrows SC2's idle VM
            ((1, 0), ((0, 1), (0, 1))): lam1,
            # SC2 arrival starts locally
            ((1, 1), s_zero): lam2,
            # SC1 departure
            ((0, 0), s_zero): 1.0,
        }
        assert set(out) == set(expected)
        for k, v in expected.items():
            assert out[k] == pytest.approx(v)

        # SC1 runs one local and one borrowed VM (s[0][1]=1 -> s[1][1]=1)
        st = ((1, 0), ((0, 1), (0, 1)))
        out = row(st)
        thin1 = solo.queueing_prob(0, 2, 1.0, q_sla)  # two VMs drain SC1
        expected = {
            ((2, 0), ((0, 1), (0, 1))): lam1 * thin1,
            # SC2 arrival: no server drains SC2 (its VM is lent), forwarded
            # with certainty, so no queueing transition at all
            ((0, 0), ((0, 1), (0, 1))): 1.0,  # SC1 local departure
            ((1, 0), s_zero): 1.0,  # remote departure returns the VM
        }
        assert set(out) == set(expected)
        for k, v in expected.items():
            assert out[k] == pytest.approx(v)

        # both queues deep, VM of SC2 serving SC1: freed VM is reassigned
        # to the cloud with the longest queue (SC2: queued=2 vs SC1: queued=1)
        st = ((2, 2), ((0, 1), (0, 1)))
        out = row(st)
        # remote departure of SC1's job at SC2 hands the VM to SC2's queue
        assert out[((2, 2), ((0, 0), (0, 0)))] == pytest.approx(1.0)

    def test_no_sharing_marginals_match_solo(self):
        spec = FederationSpec(
            scs=(sc(1, n=2, lam=1.2, share=0), sc(2, n=1, lam=0.4, share=0)),
        )
        sol = detailed.detailed_metrics(spec)
        for i, cloud in enumerate(spec.scs):
            base = solo.solo_metrics(cloud)
            est = sol.estimates[i]
            assert est.lent == 0.0 and est.borrowed == 0.0
            assert est.forwarded == pytest.approx(base.forward_rate, abs=1e-8)
            assert est.utilization == pytest.approx(base.utilization, abs=1e-8)


class TestMetrics:
    def test_no_sharing_degeneracy(self):
        spec = tiny_pair(share=(0, 0))
        sol = detailed.detailed_metrics(spec)
        for i, cloud in enumerate(spec.scs):
            base = solo.solo_metrics(cloud)
            assert sol.estimates[i].lent == 0.0
            assert sol.estimates[i].borrowed == 0.0
            assert sol.estimates[i].forwarded == pytest.approx(
                base.forward_rate, abs=1e-8
            )

    def test_conservation(self):
        for lam2 in [0.3, 0.5, 0.9]:
            sol = detailed.detailed_metrics(tiny_pair(lam2=lam2))
            total_lent = sum(e.lent for e in sol.estimates)
            total_borrowed = sum(e.borrowed for e in sol.estimates)
            assert total_lent == pytest.approx(total_borrowed, abs=1e-9)

    def test_symmetric_estimates(self):
        spec = tiny_pair(lam1=0.6, lam2=0.6)
        sol = detailed.detailed_metrics(spec)
        a, b = sol.estimates
        assert a.lent == pytest.approx(b.lent, abs=1e-10)
        assert a.borrowed == pytest.approx(b.borrowed, abs=1e-10)
        assert a.forwarded == pytest.approx(b.forwarded, abs=1e-10)
        assert a.utilization == pytest.approx(b.utilization, abs=1e-10)

    def test_relabeling_permutes_outputs(self):
        spec = tiny_pair(lam1=0.7, lam2=0.4)
        swapped = FederationSpec(scs=spec.scs[::-1], solver=spec.solver)
        sol = detailed.detailed_metrics(spec)
        sol_sw = detailed.detailed_metrics(swapped)
        for a, b in zip(sol.estimates, sol_sw.estimates[::-1]):
            assert a.forwarded == pytest.approx(b.forwarded, abs=1e-10)
            assert a.lent == pytest.approx(b.lent, abs=1e-10)

    def test_forwarding_monotone_in_own_arrivals(self):
        rates = []
        for lam in [0.3, 0.6, 0.9, 1.2]:
            sol = detailed.detailed_metrics(tiny_pair(lam1=lam, queue_cap=8))
            rates.append(sol.estimates[0].forwarded)
        assert all(a <= b + 1e-12 for a, b in zip(rates, rates[1:]))

    def test_truncation_mass_small(self):
        sol = detailed.detailed_metrics(tiny_pair(queue_cap=8))
        assert sol.tail_mass < 1e-8
