import csv
import json
import math

import numpy as np
import pytest

from otfs_jspl.channel import dda_channel, sample_paths
from otfs_jspl.cli import main
from otfs_jspl.harness import (
    BER_COLUMNS,
    PERFECT,
    TRIAL_COLUMNS,
    EstimatorSpec,
    ExperimentSpec,
    SupportMapTrial,
    ber_interval,
    check_memory,
    derive_seed,
    energy_support,
    export_support_map,
    mmse_equalize,
    mmse_equalize_tf,
    nmse,
    physical_dd_matrix,
    physical_tf_blocks,
    precoder,
    qpsk_bits,
    read_trials,
    run_ber,
    run_experiment,
    support_precision_recall,
    tf_blocks,
)
from otfs_jspl.measurement import effective_dd_matrix, qpsk
from otfs_jspl.otfs import OtfsConfig

from conftest import crandn

SMALL = OtfsConfig(16, 8, 4, 4)


def small_spec(**kw):
    base = dict(
        cfg=SMALL,
        estimators=(EstimatorSpec("jspl"), EstimatorSpec("omp", {"max_atoms": 20})),
        snr_grid=(10.0, 20.0),
        speeds=(100.0,),
        overheads=(0.3,),
        n_trials=2,
        seed=5,
        n_paths=3,
    )
    base.update(kw)
    return ExperimentSpec(**base)


class TestSpec:
    def test_json_roundtrip(self):
        spec = small_spec(estimators=(EstimatorSpec("somp3d", {"block_dims": [1, 3, 3]}, "s", (0.3,)),))
        back = ExperimentSpec.from_json(spec.to_json())
        assert back.to_dict() == spec.to_dict()

    def test_requires_schema_version(self):
        d = small_spec().to_dict()
        del d["schema_version"]
        with pytest.raises(ValueError):
            ExperimentSpec.from_dict(d)

    def test_rejects_wrong_schema(self):
        with pytest.raises(ValueError):
            small_spec(schema_version=99)

    @pytest.mark.parametrize("field", ["snr_grid", "speeds", "overheads", "estimators"])
    def test_rejects_empty_grids(self, field):
        with pytest.raises(ValueError):
            small_spec(**{field: ()})

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            small_spec(n_trials=0)

    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError):
            small_spec(estimators=(EstimatorSpec("omp"), EstimatorSpec("omp")))

    def test_estimator_spec(self):
        with pytest.raises(ValueError):
            EstimatorSpec("lasso")
        with pytest.raises(ValueError):
            EstimatorSpec("omp", {"nope": 1}).make_config()
        assert EstimatorSpec.from_dict("omp").kind == "omp"
        e = EstimatorSpec("jspl", overheads=(0.05,))
        assert e.runs_at(0.05) and not e.runs_at(0.5)

    def test_memory_guard(self):
        full = ExperimentSpec(cfg=OtfsConfig(1024, 128, 64, 64), memory_limit=1 << 30)
        with pytest.raises(MemoryError):
            check_memory(full)

    def test_derive_seed_stable(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3) != derive_seed(1, 2, 4)


class TestMetrics:
    def test_zero_estimator(self, rng):
        h = crandn(rng, 50)
        assert nmse(np.zeros(50), h) == 1.0

    def test_zero_truth(self):
        assert nmse(np.zeros(3), np.zeros(3)) == 0.0
        assert nmse(np.ones(3), np.zeros(3)) == math.inf

    def test_true_support_scores_one(self, rng):
        h = dda_channel(sample_paths(SMALL, 3, 100.0, 1), SMALL)
        sup = energy_support(h)
        assert support_precision_recall(sup, sup) == (1.0, 1.0)

    def test_energy_support(self):
        h = np.array([3.0, 0.1, 4.0, 0.0])
        assert energy_support(h, 0.99).tolist() == [0, 2]
        assert energy_support(h, 1.0).tolist() == [0, 1, 2]
        assert energy_support(np.zeros(4)).size == 0

    def test_precision_recall(self):
        assert support_precision_recall([1, 2, 3, 4], [2, 4, 6]) == (0.5, 2 / 3)
        assert support_precision_recall([], []) == (1.0, 1.0)


class TestRunExperiment:
    def test_single_path_noiseless_omp(self):
        spec = ExperimentSpec(
            cfg=OtfsConfig(32, 16, 8, 8), estimators=(EstimatorSpec("omp", {"max_atoms": 1}),), snr_grid=(math.inf,),
            overheads=(0.2,), n_trials=1, n_paths=1, on_grid=True,
        )
        res = run_experiment(spec)
        assert len(res.rows) == 1
        assert res.rows[0].nmse < 1e-8
        assert res.rows[0].support_precision == res.rows[0].support_recall == 1.0

    def test_byte_identical_csv(self, tmp_path):
        spec = small_spec()
        run_experiment(spec, tmp_path / "a")
        run_experiment(spec, tmp_path / "b", threads=3)
        for name in ("trials.csv", "aggregate.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_csv_layout(self, tmp_path):
        spec = small_spec()
        res = run_experiment(spec, tmp_path)
        raw = (tmp_path / "trials.csv").read_bytes()
        assert raw.startswith(",".join(TRIAL_COLUMNS).encode() + b"\r\n")
        rows = read_trials(tmp_path / "trials.csv")
        assert len(rows) == 2 * 2 * 2
        keys = [(r["estimator"], r["snr_db"], r["trial"]) for r in rows]
        assert keys == sorted(keys, key=lambda k: (["jspl", "omp"].index(k[0]), k[1], k[2]))
        for r in rows:
            assert r["nmse"] >= 0 and 0 <= r["support_precision"] <= 1 and 0 <= r["support_recall"] <= 1
        agg = json.loads((tmp_path / "aggregate.json").read_text())
        assert agg["schema_version"] == 1 and len(agg["cells"]) == 4
        assert agg["cells"] == res.aggregate["cells"]
        assert (tmp_path / "timings.csv").exists()

    def test_channel_shared_across_cells(self):
        res = run_experiment(small_spec(snr_grid=(10.0, 30.0), n_trials=1))
        assert len({r.seed for r in res.rows}) == 1

    def test_overhead_filter(self):
        spec = small_spec(
            estimators=(EstimatorSpec("jspl", overheads=(0.1,)), EstimatorSpec("omp", overheads=(0.5,))),
            overheads=(0.1, 0.5), snr_grid=(20.0,), n_trials=1,
        )
        cells = {(r.estimator, r.overhead) for r in run_experiment(spec).rows}
        assert cells == {("jspl", 0.1), ("omp", 0.5)}

    def test_failures_recorded(self):
        spec = small_spec(n_paths=50, n_trials=1)
        res = run_experiment(spec)
        assert res.rows and all(r.status.startswith("error") for r in res.rows)

    def test_zero_channel_rows(self):
        res = run_experiment(small_spec(n_paths=0, n_trials=1, snr_grid=(math.inf,)))
        assert {r.status for r in res.rows} <= {"ok", "empty_support"}

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            run_experiment(small_spec(n_trials=1), blocker / "sub")


class TestBerPieces:
    def test_physical_blocks_match_dense(self):
        cfg = OtfsConfig(8, 4, 2, 2)
        ps = sample_paths(cfg, 2, 100.0, 0)
        w = precoder(cfg, 1)
        H = physical_dd_matrix(ps, w, cfg)
        np.testing.assert_allclose(physical_tf_blocks(ps, w, cfg), tf_blocks(H, cfg), atol=1e-12)

    def test_block_diagonal_is_exact(self):
        cfg = OtfsConfig(8, 4, 2, 2)
        ps = sample_paths(cfg, 2, 100.0, 3)
        H = physical_dd_matrix(ps, precoder(cfg, 0), cfg)
        B = tf_blocks(H, cfg)
        rebuilt = np.zeros_like(H)
        # U^H blockdiag(B) U with U the ISFFT
        from otfs_jspl.otfs import isfft, sfft

        for j in range(H.shape[1]):
            e = np.zeros(H.shape[1], complex)
            e[j] = 1
            tf = isfft(e.reshape(8, 4))
            out = np.stack([B[n] @ tf[:, n] for n in range(4)], axis=1)
            rebuilt[:, j] = sfft(out).reshape(-1)
        np.testing.assert_allclose(rebuilt, H, atol=1e-12)

    def test_on_grid_model_matches_physical(self):
        cfg = OtfsConfig(8, 4, 2, 2)
        ps = sample_paths(cfg, 2, 100.0, 2, on_grid=True)
        w = precoder(cfg, 0)
        np.testing.assert_allclose(
            effective_dd_matrix(dda_channel(ps, cfg, receiver_aligned=True), w, cfg),
            physical_dd_matrix(ps, w, cfg), atol=1e-12,
        )

    def test_tf_equalizer_matches_dense(self, rng):
        cfg = OtfsConfig(8, 4, 2, 2)
        H = physical_dd_matrix(sample_paths(cfg, 2, 100.0, 1), precoder(cfg, 0), cfg)
        y = crandn(rng, 32)
        np.testing.assert_allclose(mmse_equalize_tf(tf_blocks(H, cfg), y, 0.1, cfg), mmse_equalize(H, y, 0.1), atol=1e-12)

    def test_qpsk_gray_decisions(self, rng):
        s = qpsk(rng, (100,))
        bits = qpsk_bits(s)
        np.testing.assert_array_equal(1 - 2 * bits[:, 0], np.sign(s.real))
        np.testing.assert_array_equal(1 - 2 * bits[:, 1], np.sign(s.imag))

    def test_precoder_unit_power(self):
        w = precoder(SMALL, 3)
        assert np.sum(np.abs(w) ** 2) == pytest.approx(1.0)

    def test_interval(self):
        mean, half = ber_interval([0.1, 0.2, 0.3])
        assert mean == pytest.approx(0.2) and half == pytest.approx(1.96 * 0.1 / math.sqrt(3))


class TestRunBer:
    def test_perfect_channel_noiseless(self):
        res = run_ber(small_spec(snr_grid=(math.inf,), estimators=(EstimatorSpec("omp"),), n_trials=2))
        perfect = [r for r in res.rows if r["estimator"] == PERFECT]
        assert len(perfect) == 2 and all(r["ber"] == 0.0 for r in perfect)

    def test_estimators_not_better_than_perfect(self, tmp_path):
        spec = small_spec(snr_grid=(5.0, 15.0), n_trials=4)
        res = run_ber(spec, tmp_path)
        cells = {(c["estimator"], c["snr_db"]): c for c in res.aggregate["cells"]}
        for snr in spec.snr_grid:
            p = cells[(PERFECT, snr)]
            for name in ("jspl", "omp"):
                c = cells[(name, snr)]
                assert c["mean_ber"] + c["ci95_half_width"] >= p["mean_ber"] - p["ci95_half_width"]
        raw = (tmp_path / "ber.csv").read_bytes()
        assert raw.startswith(",".join(BER_COLUMNS).encode() + b"\r\n")
        assert json.loads((tmp_path / "ber_aggregate.json").read_text())["cells"] == res.aggregate["cells"]

    def test_deterministic(self, tmp_path):
        spec = small_spec(snr_grid=(10.0,), n_trials=2)
        run_ber(spec, tmp_path / "a")
        run_ber(spec, tmp_path / "b", threads=2)
        assert (tmp_path / "a" / "ber.csv").read_bytes() == (tmp_path / "b" / "ber.csv").read_bytes()

    def test_unknown_detector(self):
        with pytest.raises(ValueError):
            run_ber(small_spec(), detector="mp")


def coverage(out, cfg):
    true = np.zeros(cfg.dda_shape)
    learned = np.zeros(cfg.dda_shape)
    for e in out["per_tap"]:
        true[e["delay"]] = e["true"]
        learned[e["delay"]] = e["learned"]
    return true, learned


class TestSupportMap:
    def test_on_grid_noiseless_equals_truth(self):
        cfg = OtfsConfig(32, 16, 8, 8)
        for seed in range(5):
            out = export_support_map(SupportMapTrial(cfg=cfg, seed=seed, on_grid=True, snr_db=math.inf))
            true, learned = coverage(out, cfg)
            assert set(map(tuple, np.argwhere(learned > out["threshold"]))) == set(map(tuple, np.argwhere(true > 1e-9)))
            assert out["detected_taps"] == out["true_taps"]

    def test_zero_channel_empty(self):
        out = export_support_map({"cfg": SMALL.to_dict(), "n_paths": 0, "snr_db": math.inf})
        assert out["true_taps"] == [] and out["detected_taps"] == [] and out["per_tap"] == []
        assert not np.any(np.asarray(out["true_map"]))
        assert not np.any(np.asarray(out["learned_map"]) > out["threshold"])

    def test_off_grid_energy_coverage(self):
        cfg = OtfsConfig(32, 16, 16, 16)
        for seed in range(10):
            out = export_support_map(SupportMapTrial(cfg=cfg, seed=seed))
            true, learned = coverage(out, cfg)
            assert np.sum(true[learned > out["threshold"]] ** 2) >= 0.9 * np.sum(true**2)

    def test_json_shapes(self):
        out = export_support_map(SupportMapTrial(cfg=SMALL, seed=1, n_paths=2))
        json.dumps(out)
        assert np.asarray(out["true_map"]).shape == (8, 4)
        assert np.asarray(out["learned_map"]).shape == (8, 4)
        assert out["doppler_indices"] == SMALL.doppler_indices().tolist()


class TestCli:
    def write_spec(self, tmp_path, **kw):
        path = tmp_path / "spec.json"
        path.write_text(small_spec(**kw).to_json())
        return path

    def test_run(self, tmp_path, capsys):
        spec = self.write_spec(tmp_path)
        assert main(["run", str(spec), "--out", str(tmp_path / "o"), "--trials", "1", "--threads", "2"]) == 0
        rows = read_trials(tmp_path / "o" / "trials.csv")
        assert {r["trial"] for r in rows} == {0}
        assert "median_nmse_db" in capsys.readouterr().out

    def test_ber(self, tmp_path):
        spec = self.write_spec(tmp_path, snr_grid=(20.0,))
        assert main(["ber", str(spec), "--out", str(tmp_path / "b"), "--trials", "1"]) == 0
        with open(tmp_path / "b" / "ber.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["estimator"] for r in rows} == {PERFECT, "jspl", "omp"}

    def test_supportmap(self, tmp_path, capsys):
        trial = tmp_path / "t.json"
        trial.write_text(json.dumps(SupportMapTrial(cfg=SMALL, n_paths=2).to_dict()))
        assert main(["supportmap", str(trial)]) == 0
        assert "learned_map" in json.loads(capsys.readouterr().out)
        assert main(["supportmap", str(trial), "--out", str(tmp_path / "m.json")]) == 0
        assert "true_map" in json.loads((tmp_path / "m.json").read_text())

    def test_bad_spec(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_trials": 1}))
        assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "schema_version" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["run", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
