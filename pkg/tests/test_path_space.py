import io
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from kl_erasure.chain_core import Distribution, equilibrium, passive_p0
from kl_erasure.kl_control import ClosedFormOptimal, Grid, Passive, controlled_marginal, cost_to_go
from kl_erasure.path_space import (
    AbsoluteContinuityError,
    DiscretePath,
    Path,
    PathBatch,
    discrete_measure,
    dump_paths,
    enumerate_discrete,
    enumerate_states,
    load_paths,
    log_rn_batch,
    log_rn_derivative,
    sample_path,
    sample_paths,
)
from oracles import jump_count_law, single_jump_probability


class TestPath:
    def test_state_lookup(self):
        p = Path(1, ((0.2, 0), (0.7, 1)), 1.0)
        assert [p.state(t) for t in (0.0, 0.2, 0.5, 0.7, 1.0)] == [1, 0, 0, 1, 1]
        assert p.final_state == 1

    @pytest.mark.parametrize(
        "jumps", [((0.5, 0), (0.3, 1)), ((0.2, 0), (0.4, 0)), ((0.2, 1),), ((1.5, 0),)]
    )
    def test_invalid_paths(self, jumps):
        with pytest.raises(ValueError):
            Path(1, jumps, 1.0)

    def test_json_roundtrip(self):
        p = Path(0, ((0.1 + 1e-17, 1), (2 / 3, 0)), 1.0)
        buf = io.StringIO()
        dump_paths([p, Path(1, (), 1.0)], buf)
        buf.seek(0)
        back = load_paths(buf)
        assert back[0] == p and back[1].jumps == ()

    def test_batch_roundtrip(self):
        paths = [Path(0, ((0.1, 1),), 1.0), Path(1, (), 1.0), Path(1, ((0.3, 0), (0.4, 1)), 1.0)]
        batch = PathBatch.from_paths(paths)
        assert list(batch) == paths
        assert list(batch.final) == [1, 1, 1]
        assert list(batch.state_at(0.35)) == [1, 1, 0]


class TestSampling:
    def test_reproducible_and_thread_independent(self, sym):
        prot = ClosedFormOptimal(sym, 1.0)
        a = sample_paths(prot, Distribution(0.5, 0.5), 20000, seed=7, threads=1)
        b = sample_paths(prot, Distribution(0.5, 0.5), 20000, seed=7, threads=3)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.initial, b.initial)

    def test_single_path_helper(self, sym):
        p = sample_path(Passive(sym, 2.0), Distribution(0.5, 0.5), 11)
        assert p == sample_path(Passive(sym, 2.0), Distribution(0.5, 0.5), 11)
        assert p.horizon == 2.0

    def test_passive_stationary_marginal(self, asym):
        n = 100_000
        batch = sample_paths(Passive(asym, 1.0), equilibrium(asym), n, seed=1)
        pi0 = equilibrium(asym).p0
        frac0 = np.mean(batch.final == 0)
        assert abs(frac0 - pi0) < 3 * math.sqrt(pi0 * (1 - pi0) / n)

    def test_optimal_erases_and_matches_marginal(self, sym):
        n = 100_000
        prot = ClosedFormOptimal(sym, 1.0)
        batch = sample_paths(prot, Distribution(0.5, 0.5), n, seed=2)
        assert np.all(batch.final == 0)
        p0 = controlled_marginal(prot, Distribution(0.5, 0.5), [0.5])[0]
        frac = np.mean(batch.state_at(0.5) == 0)
        assert abs(frac - p0) < 3 * math.sqrt(p0 * (1 - p0) / n)

    def test_passive_mean_jump_count(self, asym):
        n, tau = 100_000, 1.5
        batch = sample_paths(Passive(asym, tau), Distribution.point(0), n, seed=3)
        flux = lambda t: (lambda p0: p0 * asym.k01 + (1 - p0) * asym.k10)(passive_p0(asym, 1.0, t))
        expected = quad(flux, 0, tau)[0]
        counts = batch.counts
        assert abs(counts.mean() - expected) < 3 * counts.std(ddof=1) / math.sqrt(n)

    @pytest.mark.parametrize("k01,k10", [(0.7, 0.7), (2.0, 0.5)])
    def test_jump_count_distribution_chi_square(self, k01, k10):
        n, tau = 100_000, 1.2
        batch = sample_paths(Grid.constant(k01, k10, tau), Distribution.point(0), n, seed=4)
        law = jump_count_law(k01, k10, 0, tau, 40)
        if k01 == k10:
            assert np.allclose(law[:20], stats.poisson.pmf(np.arange(20), k01 * tau), atol=1e-12)
        # pool the tail so every expected count is at least 5
        m = int(np.max(np.flatnonzero(n * law >= 5))) + 1
        observed = np.bincount(np.minimum(batch.counts, m), minlength=m + 1)[: m + 1]
        expected = np.append(n * law[:m], n * (1 - law[:m].sum()))
        pvalue = stats.chisquare(observed, expected).pvalue
        assert pvalue > 0.01


class TestRadonNikodym:
    def test_identical_measures(self, sym):
        prot = ClosedFormOptimal(sym, 1.0)
        batch = sample_paths(prot, Distribution(0.5, 0.5), 2000, seed=5)
        assert np.all(log_rn_batch(batch, prot, prot) == 0.0)

    def test_single_jump_hand_value(self, sym):
        tau = 1.0
        u01, u10 = 1.3, 0.8
        path = Path(1, ((tau / 2, 0),), tau)
        expected = math.log(u10 / sym.k10) - (u10 - sym.k10) * tau / 2 - (u01 - sym.k01) * tau / 2
        got = log_rn_derivative(path, Grid.constant(u01, u10, tau), Passive(sym, tau))
        assert got == pytest.approx(expected, abs=1e-14)

    def test_antisymmetric(self, asym):
        g = Grid([0, 0.5, 1.0], [0.5, 3.0, 1.0], [2.0, 0.2, 1.5])
        p = Passive(asym, 1.0)
        batch = sample_paths(g, Distribution(0.5, 0.5), 500, seed=6)
        assert np.allclose(log_rn_batch(batch, g, p), -log_rn_batch(batch, p, g), atol=1e-12)

    def test_h_transform_endpoint_identity(self, asym):
        prot = ClosedFormOptimal(asym, 0.8)
        batch = sample_paths(prot, equilibrium(asym), 3000, seed=8)
        v0 = np.array(cost_to_go(prot.z, 0.0))
        vT = np.array(cost_to_go(prot.z, 0.8))
        expected = v0[batch.initial] - vT[batch.final]
        assert np.max(np.abs(log_rn_batch(batch, prot, Passive(asym, 0.8)) - expected)) < 1e-8

    def test_absolute_continuity(self, sym):
        # the reference switches off the 1 -> 0 rate after t = 0.5
        ref = Grid([0, 0.5, 1.0], [1, 1, 1], [1, 0, 0])
        with pytest.raises(AbsoluteContinuityError):
            log_rn_derivative(Path(1, ((0.9, 0),), 1.0), Passive(sym, 1.0), ref)
        assert math.isfinite(log_rn_derivative(Path(1, ((0.2, 0),), 1.0), Passive(sym, 1.0), ref))


class TestDiscrete:
    def test_hand_value(self, sym):
        d = DiscretePath((0, 0, 0), 0.1)
        assert discrete_measure(d, Passive(sym, 0.2), Distribution(0.5, 0.5)) == pytest.approx(0.45125, abs=1e-15)

    def test_normalization(self, asym):
        g = Grid([0, 0.5, 1.0], [0.5, 3.0, 1.0], [2.0, 0.2, 1.5])
        total = sum(discrete_measure(d, g, Distribution(0.3, 0.7)) for d in enumerate_discrete(0.1, 10))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_one_step_rows(self, asym):
        h = 0.1
        p = Distribution(0.3, 0.7)
        K = Passive(asym, h).discretize(h, 1)[0]
        probs = {d.states: discrete_measure(d, Passive(asym, h), p) for d in enumerate_discrete(h, 1)}
        for (a, b), v in probs.items():
            assert v == pytest.approx(p[a] * K[a, b], abs=1e-15)

    @pytest.mark.parametrize("n,count", [(1, 4), (3, 16)])
    def test_enumeration_counts(self, n, count):
        assert len(list(enumerate_discrete(0.1, n))) == count

    def test_enumeration_distinct(self):
        paths = [d.states for d in enumerate_discrete(0.05, 10)]
        assert len(set(paths)) == len(paths) == 2**11

    def test_enumeration_bound(self):
        with pytest.raises(ValueError, match="bound"):
            enumerate_states(30)

    def test_feynman_kac_single_jump(self):
        tau = 1.0
        g = Grid([0, 0.4, 1.0], [0.6, 1.4, 0.9], [1.1, 0.3, 1.6])
        p_init = Distribution(0.4, 0.6)
        cont = single_jump_probability(lambda t: g.rates(t)[0], lambda t: g.rates(t)[1], p_init.as_array(), tau)
        errs = []
        for n in (4, 8, 16):
            states = enumerate_states(n)
            one = np.sum(np.abs(np.diff(states, axis=1)), axis=1) == 1
            probs = np.array([discrete_measure(DiscretePath(tuple(s), tau / n), g, p_init) for s in states[one]])
            errs.append(abs(probs.sum() - cont))
        assert errs[0] > errs[1] > errs[2]
        assert 1.6 < errs[1] / errs[2] < 2.4
