import hashlib
import json

import numpy as np
import pytest

from colam.labels import BaselineSpec, SoftLabelTable
from colam.nn import Layer, Network, load_params
from colam.training import (ConfigError, TrainConfig, TrainingDiverged, evaluate, expected_accuracy, prepare_dataset,
                            run_baseline, run_colam, run_method, train_with_table, write_run)

from conftest import small_config


def same_params(a: Network, b: Network) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestConfig:
    def test_total_epochs(self):
        assert TrainConfig(stages=4, epochs_per_stage=40).total_epochs == 160

    def test_field_level_errors(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig(stages=0, temperature=-1.0, method="bogus", epsilon=2.0).validate()
        text = "\n".join(exc.value.problems)
        for field in ("stages", "temperature", "method", "epsilon"):
            assert field in text

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="colour"):
            TrainConfig.from_dict({"colour": "red"})

    def test_hash_tracks_content(self):
        a = TrainConfig()
        assert a.config_hash() == TrainConfig().config_hash()
        assert a.config_hash() != TrainConfig(seed=1).config_hash()

    def test_lr_schedule(self):
        cfg = TrainConfig(stages=4, epochs_per_stage=10, lr=0.1)
        assert [cfg.lr_at(e) for e in (1, 20)] == [0.1, 0.1]
        assert cfg.lr_at(21) == pytest.approx(0.01)
        assert cfg.lr_at(31) == pytest.approx(0.001)

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(seed=5, hidden=[8])
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.load(tmp_path / "c.json") == cfg


class TestColam:
    def test_single_stage_equals_hard_baseline(self, small_ds):
        cfg = small_config(stages=1, epochs_per_stage=4)
        colam = run_colam(cfg, small_ds)
        hard = run_baseline(BaselineSpec("hard"), cfg, small_ds)
        assert colam.metrics_csv(provenance=False) == hard.metrics_csv(provenance=False)
        assert same_params(colam.net, hard.net)
        assert len(colam.soft_labels) == 1

    def test_four_stages_of_forty(self):
        cfg = small_config(stages=4, epochs_per_stage=40, hidden=[8],
                           data={"kind": "synthetic", "preset": "triblob", "dim": 4,
                                 "train_per_class": 10, "test_per_class": 5})
        ds, _ = prepare_dataset(cfg)
        record = run_colam(cfg, ds)
        assert record.epochs == 160
        assert [r.epoch for r in record.rows if r.split == "train"] == list(range(1, 161))
        assert [t.stage for t in record.soft_labels] == [1, 2, 3, 4]

    @pytest.mark.invariant
    def test_checkpoint_rows_are_distributions(self, small_cfg, small_ds):
        record = run_colam(small_cfg, small_ds)
        for table in record.soft_labels:
            assert np.abs(table.probs.sum(axis=1) - 1).max() <= 1e-9
            assert (table.probs > 0).all()

    @pytest.mark.invariant
    def test_stage_one_trajectory_matches_hard(self, small_ds):
        cfg = small_config(stages=3, epochs_per_stage=2)
        colam = run_colam(cfg, small_ds).rows
        hard = run_baseline(BaselineSpec("hard"), cfg, small_ds).rows
        stage1 = [r for r in colam if r.stage == 1]
        assert stage1 == hard[:len(stage1)]

    @pytest.mark.invariant
    def test_table_constant_within_stage(self, small_cfg, small_ds):
        seen = {}

        def on_batch(stage, epoch, targets):
            seen.setdefault(stage, set()).add(hashlib.sha256(np.ascontiguousarray(targets).tobytes()).hexdigest())

        run_colam(small_cfg, small_ds, on_batch=on_batch)
        assert set(seen) == {1, 2}
        assert all(len(h) == 1 for h in seen.values())

    @pytest.mark.invariant
    def test_epoch_count_is_stages_times_length(self, small_ds):
        for m, t in ((1, 1), (2, 3), (3, 2)):
            record = run_colam(small_config(stages=m, epochs_per_stage=t), small_ds)
            assert record.epochs == m * t and len(record.soft_labels) == m

    @pytest.mark.invariant
    def test_deterministic(self, small_cfg, small_ds):
        a, b = run_colam(small_cfg, small_ds), run_colam(small_cfg, small_ds)
        assert same_params(a.net, b.net)
        assert a.metrics_csv() == b.metrics_csv()

    def test_divergence_is_reported(self, small_ds):
        with pytest.raises(TrainingDiverged) as exc, np.errstate(all="ignore"):
            run_colam(small_config(lr=1e12, momentum=0.0), small_ds)
        assert exc.value.stage == 1


class TestBaselines:
    @pytest.mark.parametrize("spec", [BaselineSpec("smooth", epsilon=0.0), BaselineSpec("disturb", alpha=0.0),
                                      BaselineSpec("confidence-penalty", beta=0.0)])
    def test_degenerate_baselines_equal_hard(self, spec, small_cfg, small_ds):
        hard = run_baseline(BaselineSpec("hard"), small_cfg, small_ds)
        other = run_baseline(spec, small_cfg, small_ds)
        assert other.metrics_csv(provenance=False) == hard.metrics_csv(provenance=False)
        assert same_params(other.net, hard.net)

    @pytest.mark.parametrize("variant", ["smooth", "disturb", "confidence-penalty"])
    def test_active_baselines_differ(self, variant, small_cfg, small_ds):
        hard = run_baseline(BaselineSpec("hard"), small_cfg, small_ds)
        other = run_baseline(BaselineSpec(variant, epsilon=0.3, alpha=0.3, beta=0.3), small_cfg, small_ds)
        assert not same_params(other.net, hard.net)

    def test_run_method_dispatch(self, small_ds):
        cfg = small_config(method="smooth", epsilon=0.0)
        assert run_method(cfg, small_ds).metrics_csv(False) == run_method(cfg.with_overrides(method="hard"),
                                                                          small_ds).metrics_csv(False)


class TestExpectedAccuracy:
    def test_one_hot_table_equals_hard(self, small_cfg, small_ds):
        hard = run_baseline(BaselineSpec("hard"), small_cfg, small_ds)
        assert expected_accuracy(SoftLabelTable.one_hot(3), small_cfg, small_ds) == hard.final_test_top1

    def test_uniform_table_is_chance(self):
        cfg = TrainConfig(stages=2, epochs_per_stage=5, seed=3)
        ds, _ = prepare_dataset(cfg)
        acc = expected_accuracy(SoftLabelTable.uniform(3), cfg, ds)
        assert abs(acc - 1 / 3) <= 0.05

    def test_class_count_mismatch(self, small_cfg, small_ds):
        with pytest.raises(ValueError):
            train_with_table(SoftLabelTable.one_hot(4), small_cfg, small_ds)


class TestEvaluate:
    def test_uniform_logits_pick_lowest_index(self, small_ds, rng):
        net = Network.init([small_ds.dim, 5, 3], rng)
        net.layers[-1].weight[:] = 0
        x, y = small_ds.split("test")
        acc, loss = evaluate(net, x, y)
        assert acc == (y == 0).mean()
        assert loss == pytest.approx(np.log(3))
        assert evaluate(net, x, y) == (acc, loss)

    def test_memorizing_net(self):
        x = np.eye(4)
        y = np.array([0, 1, 2, 3])
        net = Network([Layer(np.eye(4), np.zeros(4))])
        assert evaluate(net, x, y)[0] == 1.0

    def test_empty_split(self, rng):
        with pytest.raises(ValueError):
            evaluate(Network.init([2, 2], rng), np.zeros((0, 2)), np.zeros(0, dtype=int))


class TestRunDirectory:
    def test_layout(self, small_cfg, small_ds, tmp_path):
        record = run_colam(small_cfg, small_ds)
        run_dir = write_run(record, small_cfg, tmp_path / "runs" / "x")
        names = sorted(p.name for p in run_dir.iterdir())
        assert names == ["config.json", "metrics.csv", "params_final.bin", "params_final.json",
                         "softlabels_stage1.csv", "softlabels_stage2.csv"]
        h = small_cfg.config_hash()
        for csv in run_dir.glob("*.csv"):
            assert csv.read_text().startswith(f"# config_hash={h}\n")
        assert TrainConfig.load(run_dir / "config.json").config_hash() == h
        assert same_params(load_params(run_dir / "params_final.bin"), record.net)
        meta = json.loads((run_dir / "params_final.json").read_text())
        assert meta == {"seed": small_cfg.seed, "epoch": 6, "config_hash": h}
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[1] == "epoch,stage,split,loss,top1,seconds"
        assert len(lines) == 2 + 2 * 6

    def test_refuses_existing_directory(self, small_cfg, small_ds, tmp_path):
        record = run_colam(small_cfg, small_ds)
        write_run(record, small_cfg, tmp_path / "r")
        with pytest.raises(FileExistsError):
            write_run(record, small_cfg, tmp_path / "r")

    @pytest.mark.invariant
    def test_rerun_from_config_reproduces_metrics_bytes(self, small_cfg, small_ds, tmp_path):
        record = run_colam(small_cfg, small_ds)
        write_run(record, small_cfg, tmp_path / "r")
        cfg = TrainConfig.load(tmp_path / "r" / "config.json")
        ds, _ = prepare_dataset(cfg)
        again = run_colam(cfg, ds)
        assert again.metrics_csv().encode() == (tmp_path / "r" / "metrics.csv").read_bytes()
