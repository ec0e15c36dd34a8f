import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovep.detector import DetectorConfig, run_ep_batch
from ovep.errors import ConfigError
from ovep.modem import demap_hard
from ovep.sim import (
    SCHEMAS,
    BerCell,
    SimConfig,
    SweepResult,
    draw_trials,
    emit_csv,
    read_csv,
    run_ber_sweep,
    run_diagnostics,
    run_flops,
    run_iteration_sweep,
    trial_streams,
)

SMALL = dict(n=8, m=6, snr_db=(0.0, 6.0), n_trials=30, chunk=7, seed=3)


def small(**kw):
    return SimConfig(**{**SMALL, **kw})


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(detectors=("zf",)), dict(detectors=()), dict(detectors=("ovep", "ovep")),
        dict(n_trials=0), dict(threads=0), dict(q=8), dict(rho=1.5), dict(n_b=3),
        dict(snr_db=()), dict(damping=2.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small(**kw)

    def test_iterations(self):
        cfg = small()
        assert cfg.iterations("lmmse") == 1
        assert cfg.iterations("lmmse-ep") == 16
        assert cfg.iterations("ovep") == 32
        assert small(t_max=5).iterations("lmmse-ep") == 5


class TestTrials:
    def test_streams_independent_of_chunking(self):
        cfg = small()
        whole = draw_trials(cfg, 1, 0, 10)
        part = draw_trials(cfg, 1, 4, 7)
        np.testing.assert_array_equal(whole.h[4:7], part.h)
        np.testing.assert_array_equal(whole.y[4:7], part.y)

    def test_streams_differ(self):
        a = trial_streams(0, 0, 0)
        b = trial_streams(0, 0, 1)
        c = trial_streams(0, 1, 0)
        assert a[0].random() != b[0].random() != c[0].random()

    def test_noise_level(self):
        cfg = small(snr_db=(10.0,), n_trials=400)
        t = draw_trials(cfg, 0, 0, 400)
        z = t.y - np.einsum("bnm,bm->bn", t.h, t.x)
        assert abs(np.mean(np.abs(z) ** 2) / 0.1 - 1) < 0.05
        assert t.sigma_z == pytest.approx(0.1)

    def test_labels(self):
        t = draw_trials(small(), 0, 0, 5)
        np.testing.assert_array_equal(demap_hard(t.x, small().constellation()), t.bits)


class TestBer:
    def test_counts_match_direct(self):
        cfg = small(detectors=("novep",), snr_db=(0.0,), n_trials=12)
        res = run_ber_sweep(cfg)
        t = draw_trials(cfg, 0, 0, 12)
        state = run_ep_batch(t.h, t.y, t.sigma_z, cfg.constellation(), cfg.detector_config("novep"))
        errors = np.count_nonzero(demap_hard(state.den.x_hat, cfg.constellation()) != t.bits)
        cell = res.cell("novep", 0.0)
        assert cell.errors[-1] == errors and cell.bits == 12 * 12 and cell.trials == 12

    def test_paired_records(self):
        cfg = small(detectors=("lmmse", "ovep"), n_trials=9)
        res = run_ber_sweep(cfg, keep_records=True)
        assert len(res.records) == 2 * 2 * 9
        seeds = {(r.variant, r.seed) for r in res.records}
        assert len(seeds) == 36
        by = {}
        for r in res.records:
            by.setdefault(r.seed, set()).add(r.variant)
        assert all(v == {"lmmse", "ovep"} for v in by.values())

    def test_prefix_property(self):
        """Trial i is the same channel use whatever n_trials is, so error counts add up."""
        short = run_ber_sweep(small(detectors=("ovep",), snr_db=(0.0,), n_trials=10), keep_records=True)
        long = run_ber_sweep(small(detectors=("ovep",), snr_db=(0.0,)), keep_records=True)
        a = [r.bit_errors for r in short.records]
        b = [r.bit_errors for r in long.records[:10]]
        assert a == b

    def test_damping_one_flat(self):
        res = run_iteration_sweep(small(detectors=("ovep",), damping=1.0, t_max=6))
        for c in res.ber:
            assert np.all(c.errors == c.errors[0])

    def test_iteration_table(self):
        res = run_iteration_sweep(small(detectors=("lmmse", "ovep"), t_max=4))
        rows = res.tables()["iters"]
        assert len(rows) == 2 * (1 + 4)
        assert [r[2] for r in rows if r[0] == "ovep" and r[1] == 0.0] == [1, 2, 3, 4]

    def test_cell_stats(self):
        c = BerCell("x", 0.0, 1, 100, np.array([10]))
        assert c.ber() == 0.1
        assert c.stderr() == pytest.approx(np.sqrt(0.09 / 100))
        assert BerCell("x", 0.0, 0, 0, np.array([0])).ber() == 0.0

    @settings(max_examples=5)
    @given(st.integers(1, 30))
    def test_property_chunking_invariant(self, chunk):
        a = run_ber_sweep(small(detectors=("novep",), n_trials=12, chunk=chunk))
        b = run_ber_sweep(small(detectors=("novep",), n_trials=12, chunk=5))
        assert a.tables() == b.tables()


class TestDiagnostics:
    def test_runs_and_appends_diag_snr(self):
        cfg = small(snr_db=(0.0,), n_trials=100, chunk=50, diag_snr_db=6.0, detectors=("novep", "ovep"))
        res = run_diagnostics(cfg)
        assert set(res.phi) == {"novep", "ovep"}
        assert set(res.mse) == {(v, s) for v in ("novep", "ovep") for s in (0.0, 6.0)}
        assert res.phi["ovep"].phi.shape == (7, 7)
        assert res.hist["ovep"].n_samples == 100 * 6

    def test_default_variants(self):
        cfg = small(snr_db=(6.0,), n_trials=100, diag_snr_db=6.0, detectors=("lmmse",))
        assert set(run_diagnostics(cfg).phi) == {"novep", "ovep-nosub", "ovep"}


class TestCsv:
    def test_round_trip(self, tmp_path):
        res = run_iteration_sweep(small(detectors=("lmmse", "ovep"), t_max=3))
        files = emit_csv(res, tmp_path)
        assert sorted(p.rsplit("/", 1)[1] for p in files) == ["ber.csv", "iters.csv"]
        header, rows = read_csv(tmp_path / "ber.csv")
        assert tuple(header) == SCHEMAS["ber"]
        for row, cell in zip(rows, res.ber):
            assert row[0] == cell.variant and row[5] == cell.errors[-1]
            assert row[6] == pytest.approx(cell.ber(), rel=1e-8)

    def test_header_only(self, tmp_path):
        res = SweepResult(small(), flops=[])
        emit_csv(res, tmp_path)
        assert (tmp_path / "flops.csv").read_text() == ",".join(SCHEMAS["flops"]) + "\n"

    def test_diag_tables(self, tmp_path):
        cfg = small(snr_db=(6.0,), n_trials=100, diag_snr_db=6.0, detectors=("ovep",))
        files = emit_csv(run_diagnostics(cfg), tmp_path)
        names = sorted(p.rsplit("/", 1)[1] for p in files)
        assert names == ["hist_in.csv", "hist_out.csv", "mse.csv", "phi.csv"]
        header, rows = read_csv(tmp_path / "hist_in.csv")
        assert len(rows) == 162 and rows[0][1] == -np.inf
        _, phi = read_csv(tmp_path / "phi.csv")
        assert len(phi) == 49

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_csv(run_flops(small(detectors=("ovep",))), blocker / "sub")


def test_flops_rows():
    res = run_flops(small(detectors=("lmmse", "mf-ep", "ovep")), sizes=[(32, 24), (64, 48)])
    assert len(res.flops) == 6
    ov = [r for r in res.flops if r[0] == "ovep" and r[1] == 32][0]
    cfg = DetectorConfig.for_variant("ovep", 32)
    assert ov[3:7] == (2, 1, 4, 32) and ov[8] == ov[7] * cfg.t_max
