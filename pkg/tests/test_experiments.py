"""Tests for experiment campaigns and the command-line entry point."""

import dataclasses
import json

import numpy as np
import pytest

from analysis.experiment_tracker import ExperimentTracker
from analysis.report_generator import AttackReport, ReportGenerator, read_report
from main import main
from poison_lab import console, experiments
from poison_lab.config import DatasetConfig, config_to_dict, default_config
from poison_lab.errors import MissingCheckpointError
from poison_lab.optim import TrainConfig
from poison_lab.poison import Metric, StopReason, load_poison_blob


def small_config(scenario, out_dir, **overrides):
    """Desk-scale config: 8x8 synthetic images, a few epochs, short crafting runs."""
    cfg = default_config(scenario)
    settings = dict(
        dataset=DatasetConfig(per_class=8, test_per_class=6, hw=8),
        pretrain=TrainConfig(epochs=20, batch_size=4, lr=3e-3, freeze="all", init="cold"),
        retrain=dataclasses.replace(cfg.retrain, epochs=2),
        poison=dataclasses.replace(cfg.poison, max_iters=5),
        n_trials=2,
        n_poisons=[2],
        out_dir=str(out_dir),
        jobs=2,
    )
    settings.update(overrides)
    return dataclasses.replace(cfg, **settings)


@pytest.fixture(scope="module")
def checkpoint_file(tmp_path_factory):
    """A warm-start checkpoint shared by the end-to-end campaigns."""
    out = tmp_path_factory.mktemp("pretrain")
    result = experiments.pretrain(small_config("end2end", out))
    return str(result.path)


def strip_timing(report):
    record = report.to_dict()
    record.pop("wall_clock")
    return record


def test_trial_seeds():
    """Test trial seeds depend only on the master seed and trial index."""
    first = experiments.trial_seeds(7, 3)
    assert first == experiments.trial_seeds(7, 3)
    assert first["master"] == 7 and first["trial"] == 3
    assert set(experiments.SEED_STREAMS) <= set(first)
    assert first["target"] != experiments.trial_seeds(7, 4)["target"]
    assert first["target"] != experiments.trial_seeds(8, 3)["target"]


def test_load_datasets(tmp_path):
    """Test synthetic splits are seeded and free of train duplicates."""
    cfg = small_config("transfer", tmp_path)
    train, test = experiments.load_datasets(cfg)
    again, _ = experiments.load_datasets(cfg)
    assert len(train) == 16
    assert len(test) <= 12
    assert np.array_equal(train.arrays()[0], again.arrays()[0])
    seen = {image.pixels.data.tobytes() for image in train}
    assert not any(image.pixels.data.tobytes() in seen for image in test)


def test_missing_checkpoint(tmp_path):
    """Test end-to-end runs name the pretrain step when no checkpoint exists."""
    cfg = small_config("end2end", tmp_path)
    with pytest.raises(MissingCheckpointError, match="pretrain"):
        experiments.run_end2end(cfg)


def test_pretrain_writes_artifacts(checkpoint_file, tmp_path):
    """Test pretraining leaves a loadable checkpoint, metadata and manifest."""
    cfg = small_config("end2end", tmp_path, checkpoint=checkpoint_file)
    train, _ = experiments.load_datasets(cfg)
    model = experiments.load_warm_start(cfg, train)
    assert model.num_classes == 2

    folder = experiments.checkpoint_path(cfg).parent
    meta = json.loads((folder / experiments.CHECKPOINT_META).read_text())
    assert meta["profile"] == "tiny"
    assert meta["num_classes"] == 2
    assert 0.0 <= meta["test_accuracy"] <= 1.0
    assert (folder / "train_manifest.json").exists()


@pytest.mark.slow
def test_end2end_campaign(checkpoint_file, tmp_path):
    """Test the sweep covers every cell and writes its report files."""
    cfg = small_config("end2end", tmp_path, checkpoint=checkpoint_file, n_poisons=[1, 2])
    reports = experiments.run_end2end(cfg)
    assert [(r.trial, r.n_poisons) for r in reports] == [(0, 1), (0, 2), (1, 1), (1, 2)]
    for report in reports:
        assert report.scenario == "end2end"
        assert report.gamma == 0.3
        assert len(report.feature_distances) == report.n_poisons
        assert len(report.deviation_by_epoch) == 2
        assert report.success == (report.predicted_class == report.base_class)

    path = tmp_path / "end2end_reports.jsonl"
    assert [strip_timing(r) for r in read_report(path)] == [strip_timing(r) for r in reports]
    assert (tmp_path / "end2end_reports.csv").exists()
    assert json.loads((tmp_path / "end2end_config.json").read_text())["scenario"] == "end2end"


@pytest.mark.slow
def test_end2end_independent_of_jobs(checkpoint_file, tmp_path):
    """Test serial and threaded campaigns produce identical reports."""
    serial = experiments.run_end2end(
        small_config("end2end", tmp_path / "serial", checkpoint=checkpoint_file, jobs=1))
    threaded = experiments.run_end2end(
        small_config("end2end", tmp_path / "threaded", checkpoint=checkpoint_file, jobs=2))
    assert [strip_timing(r) for r in serial] == [strip_timing(r) for r in threaded]


@pytest.mark.slow
def test_oneshot_transfer_pretrains_in_process(tmp_path):
    """Test the transfer campaign runs without a checkpoint on disk."""
    reports = experiments.run_oneshot_transfer(small_config("transfer", tmp_path))
    assert [r.trial for r in reports] == [0, 1]
    for report in reports:
        assert report.scenario == "transfer"
        assert report.n_poisons == 1
        assert report.gamma == 0.0
        assert 0.0 <= report.confidence <= 1.0
    assert (tmp_path / "oneshot_reports.jsonl").exists()


@pytest.mark.slow
def test_outlier_campaign_pairs_arms(checkpoint_file, tmp_path):
    """Test each trial attacks an outlier target and a random control."""
    cfg = small_config("outliers", tmp_path, checkpoint=checkpoint_file, n_poisons=[2], outlier_k=2)
    reports = experiments.run_outlier_campaign(cfg)
    assert len(reports) % 2 == 0
    assert [r.arm for r in reports[:2]] == ["outlier", "random"]
    assert all(r.n_poisons == 2 for r in reports)


@pytest.mark.slow
def test_ablation_arms(checkpoint_file, tmp_path):
    """Test the ablation runs the full method and three leave-one-out arms."""
    cfg = small_config("ablation", tmp_path, checkpoint=checkpoint_file, n_poisons=[3], n_trials=1)
    reports = experiments.run_ablation(cfg)
    by_arm = {r.arm: r for r in reports}
    assert [r.arm for r in reports] == list(experiments.ABLATION_ARMS)
    assert len(set(by_arm["single_base"].base_sources)) == 1
    assert by_arm["no_optimization"].stop_reasons == ["skipped"] * 3
    assert by_arm["no_watermark"].gamma == 0.0
    assert by_arm["full"].gamma == 0.3
    assert len(set(by_arm["full"].base_sources)) == 3


@pytest.mark.slow
def test_craft_and_project_single(checkpoint_file, tmp_path):
    """Test the single-poison tools write PNG, blob and scene files."""
    cfg = small_config("transfer", tmp_path, checkpoint=checkpoint_file)
    crafted = experiments.craft_single(cfg, trial=1)
    assert crafted.png_path.exists()
    blob = load_poison_blob(crafted.blob_path)
    assert np.array_equal(blob[0].data, crafted.result.poison.data)
    assert crafted.base.label == cfg.base_class
    assert crafted.target.label == cfg.target_class

    projected = experiments.project_single(cfg, trial=1)
    lines = projected.scene_path.read_text().splitlines()
    assert lines[0] == "tag,class,x,y"
    assert lines[-1].startswith("poison,0,")


def test_cli_print_schema(capsys):
    """Test --print-schema writes the config schema to stdout."""
    assert main(["--print-schema"]) == 0
    described = json.loads(capsys.readouterr().out)
    assert "poison" in described


def test_cli_usage_errors(tmp_path):
    """Test a missing subcommand and bad configuration exit with status 2."""
    assert main([]) == 2
    assert main(["end2end", "--out", str(tmp_path)]) == 2

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"poison": {"lamda": 1.0}}))
    assert main(["oneshot", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_cli_runtime_error(tmp_path):
    """Test an unreadable config file exits with status 1."""
    assert main(["oneshot", "--config", str(tmp_path / "absent.json")]) == 1


@pytest.mark.slow
def test_cli_pretrain_then_craft(tmp_path, capsys):
    """Test the pretrain and craft subcommands end to end."""
    config_file = tmp_path / "small.json"
    config_file.write_text(json.dumps(config_to_dict(small_config("transfer", tmp_path / "ignored"))))
    out = tmp_path / "run"

    assert main(["pretrain", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / experiments.CHECKPOINT_NAME).exists()
    assert main(["craft", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "poison.png").exists()
    assert "Feature Distance" in capsys.readouterr().out


@pytest.fixture(scope="module")
def default_transfer(tmp_path_factory):
    """The shipped one-shot transfer campaign, pretraining in process."""
    out = tmp_path_factory.mktemp("transfer")
    cfg = dataclasses.replace(default_config("transfer"), out_dir=str(out))
    return cfg, experiments.run_oneshot_transfer(cfg)


@pytest.mark.slow
def test_default_transfer_campaign_succeeds(default_transfer):
    """Test one poison flips nearly every target without hurting clean accuracy."""
    _, reports = default_transfer
    stats = ReportGenerator(reports).generate_report()['statistics']
    assert stats['trials'] == 20
    assert stats['success_rate'] >= 0.95
    assert stats['median_confidence'] >= 0.9
    assert stats['mean_accuracy_drop'] <= 0.01


@pytest.mark.slow
def test_default_transfer_retrains_converge(default_transfer):
    """Test every final-layer retrain fits its training set."""
    _, reports = default_transfer
    for report in reports:
        assert report.train_loss < 1e-4
        assert report.train_accuracy == 1.0
        assert report.deviation_trend
        assert set(report.phase_times) == set(ExperimentTracker.PHASES)


@pytest.mark.slow
def test_threshold_poisons_fool_clean_model(default_transfer):
    """Test a poison that reached the stop threshold is classified as the target class."""
    cfg, _ = default_transfer
    model = experiments.pretrain(cfg).model
    stopped = 0
    for trial in range(5):
        crafted = experiments.craft_single(cfg, trial)
        if crafted.result.stop_reason != StopReason.THRESHOLD:
            continue
        stopped += 1
        classes, _ = model.predict(crafted.result.poison.data[None])
        assert classes[0] == cfg.target_class
    assert stopped > 0


@pytest.mark.slow
def test_linf_poison_stays_in_box(default_transfer):
    """Test the Linf variant never moves a pixel further than eps from the base."""
    cfg, _ = default_transfer
    linf = dataclasses.replace(cfg, poison=dataclasses.replace(cfg.poison, metric=Metric.LINF))
    crafted = experiments.craft_single(linf, trial=0)
    drift = np.abs(crafted.result.poison.data - crafted.base.pixels.data)
    assert drift.max() <= linf.poison.eps_inf
    assert crafted.result.linf_to_base <= linf.poison.eps_inf


def test_print_campaign_records_timings(tmp_path, capsys):
    """Test the campaign summary folds every report's timings into the tracker."""
    cfg = small_config("transfer", tmp_path)
    reports = [
        AttackReport(
            experiment_id=f"exp-{trial}", scenario="transfer", trial=trial, target_class=1,
            base_class=0, target_source="t", base_sources=["b"], n_poisons=1, gamma=0.0,
            success=True, predicted_class=0, confidence=0.95, angular_deviation=3.0,
            clean_accuracy=0.9, poisoned_accuracy=0.9, feature_distances=[0.5],
            stop_reasons=["threshold"], seeds={"master": 0}, config_hash="abc",
            wall_clock=2.0, deviation_trend="Rotation accumulated gradually",
            phase_times={"craft": 1.5, "retrain": 0.5},
        )
        for trial in range(2)
    ]
    tracker = ExperimentTracker()
    report = console.print_campaign("oneshot (transfer)", cfg, reports, tracker)
    assert tracker.get_statistics()['attacks'] == 2
    assert report['timing']['phase_times'] == {"craft": 3.0, "retrain": 1.0}
    out = capsys.readouterr().out
    assert "Average Attack Time: 2.00s" in out
    assert "Rotation accumulated gradually: 2" in out
