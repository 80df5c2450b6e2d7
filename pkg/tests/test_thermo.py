import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kl_erasure.chain_core import Distribution, PassiveRates, equilibrium, relative_entropy
from kl_erasure.kl_control import ClosedFormOptimal, Grid, Passive
from kl_erasure.thermo import (
    BoundaryError,
    control_potential_gap,
    energies,
    entropy,
    free_energy,
    free_energy_gap,
    integrate_ledger,
    power_from_state,
    power_rates,
    quasistatic_erasure_work,
    salamon_bound,
    staircase_levels,
)

LOG2 = math.log(2)


class TestFreeEnergy:
    def test_energies_are_boltzmann(self, asym):
        e = energies(asym)
        pi = equilibrium(asym).as_array()
        assert np.allclose(np.exp(-e) / np.exp(-e).sum(), pi)

    def test_gap_at_equilibrium(self, asym):
        assert free_energy_gap(equilibrium(asym), asym) == pytest.approx(0.0, abs=1e-15)

    def test_erased_bit(self, sym):
        assert free_energy_gap(Distribution(1.0, 0.0), sym) == pytest.approx(LOG2, abs=1e-15)

    def test_decomposition(self, asym):
        rng = np.random.default_rng(0)
        e = energies(asym)
        pi = equilibrium(asym)
        f_pi = float(pi.as_array() @ e) - entropy(pi)
        for p0 in rng.uniform(0, 1, 100):
            p = Distribution.from_p0(p0)
            lhs = float(p.as_array() @ e) - entropy(p) - f_pi
            assert lhs == pytest.approx(relative_entropy(p.as_array(), pi.as_array()), abs=1e-12)
            assert free_energy(p, asym) - free_energy(pi, asym) == pytest.approx(lhs, abs=1e-12)


class TestControlPotential:
    def test_passive_zero(self, asym):
        assert control_potential_gap(Passive(asym, 1.0), asym, 0.4) == 0.0

    def test_doubled_forward_rate(self, asym):
        g = Grid.constant(2 * asym.k01, asym.k10, 1.0)
        assert control_potential_gap(g, asym, 0.5) == pytest.approx(LOG2, abs=1e-15)

    @pytest.mark.parametrize("t", [0.0, 0.3, 0.9])
    def test_optimal_is_log_ratio_of_desirability(self, sym, t):
        prot = ClosedFormOptimal(sym, 1.0)
        z = prot.z(t)
        assert control_potential_gap(prot, sym, t) == pytest.approx(2 * math.log(z[1] / z[0]), rel=1e-12)

    def test_boundary_error(self, sym):
        with pytest.raises(BoundaryError):
            control_potential_gap(ClosedFormOptimal(sym, 1.0), sym, 1.0)


class TestPowerRates:
    def test_equilibrium_passive_vanishes(self, asym):
        r = power_rates(equilibrium(asym), Passive(asym, 1.0), asym, 0.3)
        assert all(abs(x) < 1e-15 for x in r)

    def test_boundary_with_flux_is_an_error(self, sym):
        # p0 = 0 while mass still flows out of state 1: dS_tot is infinite
        with pytest.raises(BoundaryError):
            power_from_state(0.0, 0.0, 0.0, sym)
        assert power_from_state(1.0, -math.inf, 0.0, sym).dS_tot == 0.0

    @given(
        st.floats(1e-12, 1 - 1e-12),
        st.floats(-6, 3),
        st.floats(-6, 3),
        st.floats(0.05, 5),
        st.floats(0.05, 5),
    )
    @settings(max_examples=1000, deadline=None)
    def test_second_law_and_balance(self, p0, lu01, lu10, k01, k10):
        rates = PassiveRates(k01, k10)
        r = power_from_state(p0, lu01, lu10, rates)
        j = p0 * math.exp(lu01) - (1 - p0) * math.exp(lu10)
        assert r.dS_tot >= 0.0
        ratio = math.log(p0 / (1 - p0)) + lu01 - lu10
        assert r.dS_tot == pytest.approx(j * ratio, rel=1e-9, abs=1e-15)
        assert abs(r.dW - r.dF - r.dS_tot) < 1e-12 * max(1.0, abs(r.dW))
        assert abs(r.dW - r.dQ - r.dE) < 1e-12 * max(1.0, abs(r.dW))


class TestLedger:
    def test_passive_equilibrium_all_zero(self, asym):
        led = integrate_ledger(Passive(asym, 2.0), asym, equilibrium(asym))
        assert all(abs(getattr(led, k)) < 1e-14 for k in ("delta_E", "W", "Q", "delta_S", "delta_F", "S_tot"))

    def test_optimal_erasure(self, sym):
        led = integrate_ledger(ClosedFormOptimal(sym, 1.0), sym, Distribution(0.5, 0.5))
        assert led.delta_F == pytest.approx(LOG2, abs=1e-10)
        assert led.first_law_residual < 1e-8 and led.alternate_first_law_residual < 1e-8
        assert led.W > LOG2

    @pytest.mark.parametrize("seed", range(5))
    def test_first_laws_random_grid(self, asym, seed):
        rng = np.random.default_rng(seed)
        g = Grid(np.linspace(0, 1.5, 6), rng.uniform(0.1, 3, 6), rng.uniform(0.1, 3, 6))
        led = integrate_ledger(g, asym, Distribution.from_p0(rng.uniform()))
        assert led.first_law_residual < 1e-8 and led.alternate_first_law_residual < 1e-8
        assert led.S_tot >= 0

    def test_entropy_production_monotone_series(self, asym):
        g = Grid([0, 0.5, 1.0], [0.5, 3.0, 1.0], [2.0, 0.2, 1.5])
        led = integrate_ledger(g, asym, Distribution(0.2, 0.8), times=np.linspace(0, 1, 41))
        assert np.all(np.diff(led.series["cum_S_tot"]) >= -1e-15)
        assert np.all(np.asarray(led.series["dS_tot"]) >= 0)

    def test_relaxation_closed_form(self, asym):
        # passive relaxation does no work, so S_tot is the drop in free energy
        p = Distribution(0.9, 0.1)
        led = integrate_ledger(Passive(asym, 0.7), asym, p)
        assert led.W == pytest.approx(0.0, abs=1e-15)
        pi = equilibrium(asym).as_array()
        drop = relative_entropy(p.as_array(), pi) - relative_entropy(led.p_end.as_array(), pi)
        assert led.S_tot == pytest.approx(drop, abs=1e-10)

    def test_csv_full_precision(self, sym):
        led = integrate_ledger(Grid.constant(1.0, 0.5, 1.0), sym, Distribution(0.5, 0.5), times=[0, 0.5, 1.0])
        buf = io.StringIO()
        led.write_csv(buf, kT=2.0)
        rows = buf.getvalue().splitlines()
        assert rows[0].startswith("t,p0,u01,u10,J01,dW")
        last = dict(zip(rows[0].split(","), rows[-1].split(",")))
        assert float(last["cum_W"]) == 2.0 * led.W


class TestInvariances:
    def test_time_rescaling(self, sym):
        g = Grid([0, 0.3, 1.0], [0.2, 1.5, 0.7], [1.0, 0.4, 2.0])
        p = Distribution(0.5, 0.5)
        w = integrate_ledger(g, sym, p).W
        assert integrate_ledger(g.time_rescaled(2.0), sym, p).W == pytest.approx(w, abs=1e-8)

    @pytest.mark.parametrize("factor", [10.0, 100.0])
    def test_rate_scaling(self, asym, factor):
        g = Grid([0, 0.3, 1.0], [0.2, 1.5, 0.7], [1.0, 0.4, 2.0])
        p = Distribution(0.5, 0.5)
        a = integrate_ledger(g, asym, p, times=np.linspace(0, 1, 11))
        b = integrate_ledger(g, asym.scaled(factor), p, times=np.linspace(0, 1, 11))
        assert np.max(np.abs(np.asarray(a.series["dW"]) - b.series["dW"])) < 1e-12
        assert abs(a.W - b.W) < 1e-12


class TestQuasistatic:
    def test_levels(self, sym):
        lv = staircase_levels(sym, 10)
        assert len(lv) == 10 and np.all(np.diff(lv) > 0)
        with pytest.raises(ValueError):
            staircase_levels(sym, 0)

    def test_single_stage_dissipates(self, sym):
        assert quasistatic_erasure_work(sym, 1, 20.0) > LOG2 * 1.5

    def test_monotone_in_stages(self, sym):
        w = [quasistatic_erasure_work(sym, n, 20.0) for n in (1, 10, 100)]
        assert w[0] > w[1] > w[2] > LOG2

    def test_approaches_landauer(self, sym):
        assert quasistatic_erasure_work(sym, 2000, 20.0) == pytest.approx(LOG2, rel=1e-3)


class TestSalamon:
    def test_large_conductivity(self):
        assert salamon_bound(1e9, 1.0) == pytest.approx(LOG2, rel=1e-8)

    def test_double_log2(self):
        assert salamon_bound(2 * LOG2, 1.0) == pytest.approx(2 * LOG2, abs=1e-15)

    @pytest.mark.parametrize("x", [LOG2, 0.5])
    def test_pole(self, x):
        with pytest.raises(ValueError):
            salamon_bound(x, 1.0)
