import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ovep.channel import CorrelationSpec, complex_normal, correlation_sqrt
from ovep.detector import DetectorConfig, init_state, make_partition, run_ep_batch
from ovep.diagnostics import (
    CorrelationAccumulator,
    DenoiserIoStats,
    MseAccumulator,
    _bin,
    denoiser_io_stats,
    flops_estimate,
    interblock_correlation,
    lmmse_flops,
    mse_decomposition,
    per_block_contribution,
)
from ovep.errors import InsufficientTrials, StaleState
from ovep.modem import Constellation, map_bits

QPSK = Constellation(4)


def first_iteration(rng, variant="ovep", b=200, n=8, m=6, rho=0.9, snr_db=6.0):
    h = correlation_sqrt(CorrelationSpec(rho, n)) @ complex_normal(rng, (b, n, m))
    x = map_bits(rng.integers(0, 2, (b, 2 * m)), QPSK)
    sz = 10 ** (-snr_db / 10)
    y = np.einsum("bnm,bm->bn", h, x) + complex_normal(rng, (b, n), sz)
    state = run_ep_batch(h, y, sz, QPSK, DetectorConfig.for_variant(variant, n, t_max=1))
    return state, x


class TestContributions:
    @pytest.mark.parametrize("variant", ["ovep", "novep", "ovep-nosub"])
    def test_sum_to_denoiser_input(self, rng, variant):
        state, _ = first_iteration(rng, variant, b=20)
        contrib = per_block_contribution(state)
        np.testing.assert_allclose(contrib.sum(axis=1), state.bar_q.mu, rtol=1e-10, atol=1e-12)

    def test_single_block(self, rng):
        state, _ = first_iteration(rng, "lmmse-ep", b=5)
        contrib = per_block_contribution(state)
        assert contrib.shape == (5, 1, 6)
        np.testing.assert_allclose(contrib[:, 0], state.bar_q.mu, rtol=1e-12)

    def test_stale_before_first_iteration(self):
        state = init_state(1, 4, make_partition(4, 2, 1), 10.0)
        with pytest.raises(StaleState):
            per_block_contribution(state)

    def test_stale_after_guard(self, rng):
        state, _ = first_iteration(rng, b=3)
        state.bar_fresh = state.bar_fresh.copy()
        state.bar_fresh[1, 0] = False
        with pytest.raises(StaleState):
            per_block_contribution(state)
        acc = CorrelationAccumulator().add(state)
        assert acc.n_stale == 1 and acc.n_trials == 2


class TestCorrelation:
    def test_shape_and_hermitian(self, rng):
        state, _ = first_iteration(rng, b=150)
        d = interblock_correlation([state])
        assert d.phi.shape == (7, 7) and d.n_trials == 150
        np.testing.assert_allclose(d.phi, d.phi.conj().T, atol=1e-12)
        assert np.all(np.real(np.diag(d.phi)) >= 1.0 - 1e-12)

    def test_duplicated_contributions_have_unit_entries(self, rng):
        """Identical per-trial contributions in all blocks and constant norms give Phi = ones."""
        state, _ = first_iteration(rng, "novep", b=120)
        u = complex_normal(rng, (120, 6))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = state.bar_q.gamma
        l = state.block_q.mu.shape[1]
        state.block_q.gamma[:] = (g / l)[:, None, :]
        state.block_q.mu[:] = (u * l)[:, None, :]
        d = interblock_correlation([state])
        np.testing.assert_allclose(d.phi, np.ones((l, l)), atol=1e-12)
        assert d.mean_offdiag() == pytest.approx(1.0)

    def test_insufficient_trials(self, rng):
        state, _ = first_iteration(rng, b=10)
        with pytest.raises(InsufficientTrials):
            interblock_correlation([state])

    def test_merge_equals_single_pass(self, rng):
        s1, _ = first_iteration(rng, b=60)
        s2, _ = first_iteration(rng, b=70)
        a = CorrelationAccumulator().add(s1).merge(CorrelationAccumulator().add(s2)).result()
        b = interblock_correlation([s1, s2])
        np.testing.assert_allclose(a.phi, b.phi, rtol=1e-12)

    def test_single_block_offdiag(self, rng):
        state, _ = first_iteration(rng, "lmmse-ep", b=100)
        assert interblock_correlation([state]).mean_offdiag() == 0.0


class TestMse:
    @pytest.mark.parametrize("variant", ["ovep", "novep", "ovep-nosub"])
    def test_identity_matches_direct(self, rng, variant):
        state, x = first_iteration(rng, variant, b=300)
        d = mse_decomposition([state], [x])
        assert d.term_energy == 6.0
        assert abs(d.mse_identity - d.mse_direct) < 1e-9 * max(1.0, d.mse_direct)
        assert d.mse_direct_se > 0

    def test_merge(self, rng):
        s1, x1 = first_iteration(rng, b=50)
        s2, x2 = first_iteration(rng, b=60)
        a = MseAccumulator().add(s1, x1).merge(MseAccumulator().add(s2, x2)).result()
        b = mse_decomposition([s1, s2], [x1, x2])
        assert a.term_corr == pytest.approx(b.term_corr, rel=1e-12)
        assert a.term_align == pytest.approx(b.term_align, rel=1e-12)
        assert a.n_trials == 110

    def test_too_few(self, rng):
        state, x = first_iteration(rng, b=5)
        with pytest.raises(InsufficientTrials):
            mse_decomposition([state], [x])


class TestHistograms:
    def test_binning_conserves_mass(self):
        edges = np.array([0.0, 1.0, 2.0])
        counts = _bin(np.array([-1.0, 0.0, 0.5, 1.0, 2.0, 3.0]), edges)
        np.testing.assert_array_equal(counts, [1, 2, 2, 1])

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=200))
    def test_property_mass(self, values):
        counts = _bin(np.array(values), np.linspace(-40, 40, 161))
        assert counts.sum() == len(values) and counts.size == 162

    def test_stats(self, rng):
        state, _ = first_iteration(rng, b=40)
        s = denoiser_io_stats([state])
        assert s.counts_in.sum() == s.counts_out.sum() == s.n_samples == 240
        assert 0.0 <= s.small_v_fraction <= 1.0
        rows = s.bins("out")
        assert rows[0][0] == -np.inf and rows[-1][1] == np.inf
        assert sum(r[2] for r in rows) == 240

    def test_small_v_count(self):
        class _S:
            pass

        st_ = _S()
        st_.bar_q = type("M", (), {"gamma": np.ones((1, 4)), "mu": np.zeros((1, 4), complex)})()
        st_.den = type("D", (), {"v_hat": np.array([[0.001, 0.009, 0.01, 0.5]])})()
        s = DenoiserIoStats(np.linspace(-1, 1, 3), np.linspace(0, 1, 3), 0.01).add(st_)
        assert s.n_small_v == 2 and s.small_v_fraction == 0.5


class TestFlops:
    def cfg(self, v, n):
        return DetectorConfig.for_variant(v, n)

    def test_table_rows(self):
        n, m, q = 32, 24, 4
        assert flops_estimate(self.cfg("lmmse-ep", n), n, m, q).per_iteration == m**3 + m * m * n + m * q
        assert flops_estimate(self.cfg("mf-ep", n), n, m, q).per_iteration == m * n + m * q
        assert flops_estimate(self.cfg("novep", n), n, m, q).per_iteration == 16 * (m * 4 + 8) + m * q
        ov = flops_estimate(self.cfg("ovep", n), n, m, q)
        assert ov.per_iteration == 31 * (m * 4 + 8) + 30 * (m + 1) + m * q
        assert ov.total == 32 * ov.per_iteration
        assert sum(ov.breakdown.values()) == ov.per_iteration

    def test_no_overlap_equals_novep(self):
        a = flops_estimate(DetectorConfig(make_partition(32, 2, 2), variant="ovep"), 32, 24, 4)
        b = flops_estimate(self.cfg("novep", 32), 32, 24, 4)
        assert a.per_iteration == b.per_iteration and a.total == b.total

    def test_lmmse(self):
        assert lmmse_flops(32, 24).total == 24**3 + 24 * 24 * 32

    @given(st.sampled_from([16, 32, 64, 128]), st.integers(4, 16))
    def test_property_monotone_in_iterations(self, n, t):
        a = flops_estimate(DetectorConfig.for_variant("ovep", n, t_max=t), n, n // 2, 4)
        b = flops_estimate(DetectorConfig.for_variant("ovep", n, t_max=t + 1), n, n // 2, 4)
        assert b.total > a.total
