import json

import numpy as np
import pytest

from spfm_lab.trainer import (Checkpoint, CheckpointError, ConfigError,
                              TrainConfig, TrainingDiverged, build_training_data,
                              config_hash, load_checkpoint, parse_config,
                              read_metrics_csv, save_checkpoint, train,
                              write_metrics_csv)

MIX = {"generator": "mixture", "K": 4, "n_per_class": 125, "radius": 4.0,
       "sigma": 0.3, "rho": 0.0}


def smoke_config(**overrides):
    base = dict(iterations=2000, seed=3, K=4,
                data_a=dict(MIX), data_b=dict(MIX))
    base.update(overrides)
    return TrainConfig(**base)


class TestParseConfig:
    def test_empty_object_gives_full_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{}")
        cfg = parse_config(path)
        assert cfg.iterations == 10000
        assert cfg.batch_size == 32
        assert cfg.warmup_steps == 1000
        assert cfg.t_policy == 0.5
        assert cfg.mode == "spfm"
        assert cfg.p_drop == 0.1

    def test_odd_batch_size_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"batch_size": 31}))
        with pytest.raises(ConfigError, match="even"):
            parse_config(path)

    def test_spfm_needs_iterations_beyond_warmup(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mode": "spfm", "iterations": 500,
                                    "warmup_steps": 1000}))
        with pytest.raises(ConfigError, match="warmup"):
            parse_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"iterations": 100, "warmupsteps": 5}))
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed"):
            parse_config(path)

    def test_bad_generator_spec_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(
            {"data_a": {"generator": "mixture", "sigm": 0.3}}))
        with pytest.raises(ConfigError, match="spec key"):
            parse_config(path)

    def test_bad_t_policy(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"t_policy": "sometimes"}))
        with pytest.raises(ConfigError, match="t_policy"):
            parse_config(path)


class TestBuildTrainingData:
    def test_corpus_ids_are_disjoint_and_roles_tagged(self):
        corpus, a, b = build_training_data(smoke_config())
        ids = [s.id for s in corpus.samples]
        assert len(ids) == len(set(ids)) == 1000
        assert all(s.subset == "A" for s in a.samples)
        assert all(s.subset == "B" for s in b.samples)

    def test_subsets_differ_between_roles(self):
        _, a, b = build_training_data(smoke_config())
        assert a.features().tobytes() != b.features().tobytes()

    def test_k_mismatch_rejected(self):
        cfg = smoke_config(K=5)
        with pytest.raises(ConfigError, match="K"):
            build_training_data(cfg)


@pytest.fixture(scope="module")
def smoke_run():
    return train(smoke_config())


class TestTrainSmoke:
    def test_loss_decreases(self, smoke_run):
        by_step = {r.step: r.mean_loss for r in smoke_run.metrics}
        assert by_step[2000] < by_step[100]

    def test_warmup_rows_have_zero_suspects(self, smoke_run):
        for row in smoke_run.metrics:
            if row.step <= 1000:
                assert row.suspect_count == 0

    def test_ledger_covers_all_steps(self, smoke_run):
        assert len(smoke_run.ledger.suspects_per_step) == 2000
        assert sum(smoke_run.ledger.suspects_per_step[:1000]) == 0

    def test_clean_data_suspect_fraction_stays_moderate(self, smoke_run):
        # harness calibration bound, not a claim from the method itself
        post = smoke_run.ledger.suspects_per_step[1000:]
        frac = sum(post) / (len(post) * 32)
        assert frac < 0.35

    def test_metrics_log_is_deterministic(self, smoke_run, tmp_path):
        again = train(smoke_config())
        p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
        write_metrics_csv(smoke_run.metrics, p1)
        write_metrics_csv(again.metrics, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_metrics_roundtrip(self, smoke_run, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(smoke_run.metrics, path)
        rows = read_metrics_csv(path)
        assert [r.step for r in rows] == [r.step for r in smoke_run.metrics]
        assert rows[0].mean_loss == smoke_run.metrics[0].mean_loss
        assert all(r.wallclock_ms == 0.0 for r in rows)


class TestCheckpoint:
    def test_save_load_bitwise(self, smoke_run, tmp_path):
        path = tmp_path / "cp.json"
        save_checkpoint(smoke_run.checkpoint, path)
        back = load_checkpoint(path)
        for a, b in zip(smoke_run.checkpoint.model.params(), back.model.params()):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(smoke_run.checkpoint.adam.m, back.adam.m):
            assert a.tobytes() == b.tobytes()
        assert back.step == smoke_run.checkpoint.step
        assert back.config_hash == smoke_run.checkpoint.config_hash

    def test_corrupted_header_is_version_error(self, tmp_path):
        path = tmp_path / "cp.json"
        path.write_text(json.dumps({"version": 99, "model": {}}))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, smoke_run, tmp_path):
        path = tmp_path / "cp.json"
        save_checkpoint(smoke_run.checkpoint, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_resume_equals_straight_run(self, tmp_path):
        short = smoke_config(iterations=120, warmup_steps=50, log_every=10)
        full = smoke_config(iterations=240, warmup_steps=50, log_every=10)
        first = train(short)
        resumed = train(full, resume_from=first.checkpoint)
        straight = train(full)
        combined = first.metrics + resumed.metrics
        assert [r.step for r in combined] == [r.step for r in straight.metrics]
        for a, b in zip(combined, straight.metrics):
            assert a.mean_loss == b.mean_loss
            assert a.mean_l_cond == b.mean_l_cond
            assert a.suspect_count == b.suspect_count
        for p, q in zip(resumed.checkpoint.model.params(),
                        straight.checkpoint.model.params()):
            assert p.tobytes() == q.tobytes()

    def test_resume_rejects_other_config(self, tmp_path):
        first = train(smoke_config(iterations=120, warmup_steps=50))
        other = smoke_config(iterations=240, warmup_steps=50, seed=99)
        with pytest.raises(CheckpointError, match="different configuration"):
            train(other, resume_from=first.checkpoint)

    def test_hash_ignores_iterations_only(self):
        base = smoke_config()
        assert config_hash(base) == config_hash(smoke_config(iterations=9999))
        assert config_hash(base) != config_hash(smoke_config(seed=4))


class TestVanillaMode:
    def test_never_routes(self):
        res = train(smoke_config(mode="vanilla", iterations=300, log_every=50))
        assert all(r.suspect_count == 0 for r in res.metrics)
        assert sum(res.ledger.suspects_per_step) == 0
        assert res.ledger.times_seen == {}

    def test_divergence_aborts_with_step_index(self):
        cfg = smoke_config(iterations=300, warmup_steps=10, lr=1e155)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged, match="step"):
                train(cfg)
