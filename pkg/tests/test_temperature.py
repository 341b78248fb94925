import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atam.data import PartialLabelMatrix, Provenance, build_cooccurrence
from atam.errors import AtamError, DataError
from atam.temperature import (
    UlpConfig,
    compute_temperature,
    compute_temperature_field,
    finalize_difficult_labels,
    select_pseudo_labels,
    temp_sigmoid,
)

CFG = UlpConfig()


class TestComputeTemperature:
    def test_equal_edges_hit_floor(self):
        adj = np.full((4, 4), 0.2)
        t = compute_temperature([0, 1, 2], 3, adj, CFG)
        assert t == CFG.t_min

    def test_two_point_spread(self):
        adj = np.zeros((3, 3))
        adj[2, 0], adj[2, 1] = 0.0, 1.0
        t = compute_temperature([0, 1], 2, adj, CFG)
        assert t == pytest.approx(5.0)  # population STD of {0,1} is 0.5, scaled by 10

    def test_single_known_label_hits_floor(self):
        adj = np.random.default_rng(0).uniform(size=(3, 3))
        t = compute_temperature([1], 0, adj, CFG)
        assert t == CFG.t_min

    def test_no_known_labels_errors(self):
        with pytest.raises(DataError, match="no known labels"):
            compute_temperature([], 0, np.eye(2), CFG)

    def test_clamped_to_ceiling(self):
        cfg = UlpConfig(t_max=2.0)
        adj = np.zeros((3, 3))
        adj[2, 0], adj[2, 1] = 0.0, 1.0
        assert compute_temperature([0, 1], 2, adj, cfg) == 2.0

    def test_field_matches_per_cell_computation(self):
        m = PartialLabelMatrix.empty(3, 4)
        m.record(0, 0, 1, Provenance.HUMAN_OR_ORACLE)
        m.record(0, 1, 1, Provenance.HUMAN_OR_ORACLE)
        m.record(1, 2, 1, Provenance.HUMAN_OR_ORACLE)
        adj = build_cooccurrence(m).normalized
        field = compute_temperature_field(m, adj, CFG)
        for cat in range(4):
            assert field[0, cat] == pytest.approx(compute_temperature([0, 1], cat, adj, CFG))
            assert field[1, cat] == pytest.approx(compute_temperature([2], cat, adj, CFG))
        assert np.isnan(field[2]).all()  # untouched sample has no temperatures


class TestTempSigmoid:
    def test_midpoint(self):
        for t in (0.5, 1.0, 7.3):
            assert temp_sigmoid(torch.tensor(0.0), t).item() == pytest.approx(0.5)

    def test_unit_temperature_value(self):
        out = temp_sigmoid(torch.tensor(1.0, dtype=torch.float64), 1.0)
        assert out.item() == pytest.approx(0.7310585786300049, rel=1e-12)

    def test_softening_value(self):
        out = temp_sigmoid(torch.tensor(1.0, dtype=torch.float64), 10.0)
        assert out.item() == pytest.approx(0.52497918747894, rel=1e-12)

    def test_matches_standard_sigmoid_at_one(self):
        z = torch.linspace(-30, 30, 501, dtype=torch.float64)
        out = temp_sigmoid(z, torch.ones_like(z))
        torch.testing.assert_close(out, torch.sigmoid(z), rtol=0, atol=0)

    def test_saturates_stably(self):
        out = temp_sigmoid(torch.tensor([700.0, -700.0]), torch.tensor([1.0, 1.0]))
        assert out[0].item() == 1.0 and out[1].item() == 0.0

    def test_nonpositive_temperature_errors(self):
        with pytest.raises(DataError):
            temp_sigmoid(torch.tensor(1.0), 0.0)
        with pytest.raises(DataError):
            temp_sigmoid(torch.tensor(1.0), -2.0)

    @given(
        st.floats(-20, 20),
        st.floats(-20, 20),
        st.floats(0.5, 20),
        st.floats(0.5, 20),
    )
    @settings(max_examples=120, deadline=None)
    def test_monotonicity(self, z1, z2, t1, t2):
        f = lambda z, t: temp_sigmoid(torch.tensor(z, dtype=torch.float64), t).item()
        if z1 + 1e-6 < z2:
            assert f(z1, t1) < f(z2, t1)
        if t1 + 1e-6 < t2:
            if z1 > 1e-3:
                assert f(z1, t1) > f(z1, t2)  # softening pulls toward 0.5
            elif z1 < -1e-3:
                assert f(z1, t1) < f(z1, t2)


class TestSelection:
    def test_threshold_sides(self):
        # the negative side is strict (p < 1-beta): 0.85 and 0.80 select positive,
        # 0.15 and 0.19 select negative, 0.5 abstains
        probs = np.array([0.85, 0.15, 0.5, 0.8, 0.19, 0.79])
        out = select_pseudo_labels(probs, UlpConfig(beta=0.8))
        np.testing.assert_array_equal(out, [1, -1, 0, 1, -1, 0])

    def test_midpoint_always_abstains(self):
        for beta in (0.51, 0.7, 0.9, 0.99):
            assert select_pseudo_labels(np.array([0.5]), UlpConfig(beta=beta))[0] == 0

    @given(st.integers(0, 10_000), st.floats(0.51, 0.99))
    @settings(max_examples=60, deadline=None)
    def test_sides_disjoint_and_bounded(self, seed, beta):
        probs = np.random.default_rng(seed).uniform(0, 1, size=50)
        out = select_pseudo_labels(probs, UlpConfig(beta=beta))
        assert set(np.unique(out)) <= {-1, 0, 1}
        assert not ((out == 1) & (out == -1)).any()

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_raising_beta_never_grows_selection(self, seed):
        probs = np.random.default_rng(seed).uniform(0, 1, size=80)
        low = select_pseudo_labels(probs, UlpConfig(beta=0.6))
        high = select_pseudo_labels(probs, UlpConfig(beta=0.9))
        assert np.flatnonzero(high != 0).size <= np.flatnonzero(low != 0).size
        assert set(map(tuple, np.argwhere(high != 0))) <= set(map(tuple, np.argwhere(low != 0)))


class TestFinalize:
    def make(self):
        m = PartialLabelMatrix.empty(2, 3)
        m.record(0, 0, 1, Provenance.HUMAN_OR_ORACLE)
        m.record(1, 1, 1, Provenance.HUMAN_OR_ORACLE)
        return m

    def test_fills_all_unknowns_negative(self):
        m = self.make()
        filled = finalize_difficult_labels(m, 50, CFG)
        assert filled == 4
        assert not m.unknown_mask().any()
        assert (m.states[m.fallback_mask()] == -1).all()

    def test_noop_when_nothing_unknown(self):
        m = self.make()
        finalize_difficult_labels(m, 50, CFG)
        assert finalize_difficult_labels(m, 51, CFG) == 0

    def test_early_invocation_errors(self):
        with pytest.raises(AtamError, match="cap not reached"):
            finalize_difficult_labels(self.make(), 49, CFG)


class TestConfigValidation:
    def test_beta_range(self):
        with pytest.raises(DataError):
            UlpConfig(beta=0.5).validate()
        with pytest.raises(DataError):
            UlpConfig(beta=1.0).validate()
        UlpConfig(beta=0.8).validate()

    def test_clamp_range(self):
        with pytest.raises(DataError):
            UlpConfig(t_min=0.0).validate()
        with pytest.raises(DataError):
            UlpConfig(t_min=3.0, t_max=2.0).validate()
