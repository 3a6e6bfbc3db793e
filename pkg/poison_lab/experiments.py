"""Seeded attack campaigns: pretraining, one-shot transfer, end-to-end sweeps,
outlier targeting and the leave-one-out ablation."""

import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from analysis.adjudication import angular_deviation, attack_success, decision_normal
from analysis.deviation_history import DeviationHistory
from analysis.experiment_tracker import ExperimentTracker
from analysis.projection import project_scene, projection_basis, write_scene_csv
from analysis.report_generator import AttackReport, write_report

from . import checkpoint
from .config import ExperimentConfig, config_hash, config_to_dict
from .data import (
    CIFAR10_CLASSES,
    Dataset,
    LabeledImage,
    dedup,
    read_cifar10,
    restrict_classes,
    sample_bases,
    select_outlier_targets,
    synth_dataset,
    write_manifest,
)
from .errors import DegenerateBasisError, InvalidArgumentError, MissingCheckpointError
from .model import Model, build, profile_specs
from .optim import InitMode, TrainConfig, evaluate, scaled_batch_size, train
from .poison import (
    PoisonConfig,
    PoisonResult,
    compute_stop_threshold,
    craft_poison_set,
    save_poison_blob,
    save_poison_png,
    watermark_blend,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pfck"
CHECKPOINT_META = "checkpoint.json"
SEED_STREAMS = ("target", "bases", "init", "shuffle")
ABLATION_ARMS = ("full", "single_base", "no_optimization", "no_watermark")


# --- seeds and data ----------------------------------------------------------


def trial_seeds(master: int, trial: int) -> Dict[str, int]:
    """Per-trial seeds; a pure function of the master seed and the trial index."""
    state = np.random.SeedSequence(master, spawn_key=(trial,)).generate_state(len(SEED_STREAMS))
    seeds = {name: int(value) for name, value in zip(SEED_STREAMS, state)}
    seeds.update(master=master, trial=trial)
    return seeds


def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Train and test splits, with exact test duplicates of train images removed."""
    data = cfg.dataset
    if data.source == "cifar":
        train_set = read_cifar10(data.path, "train")
        test = read_cifar10(data.path, "test")
        train_set = restrict_classes(train_set, data.cifar_classes, data.cifar_per_class, seed=cfg.seed)
        test = restrict_classes(test, data.cifar_classes, data.cifar_test_per_class, seed=cfg.seed + 1)
    else:
        train_set = synth_dataset(data.classes, data.per_class, data.hw, cfg.seed, data.channels, "train")
        test = synth_dataset(data.classes, data.test_per_class, data.hw, cfg.seed, data.channels, "test")
    if data.dedup:
        test = dedup(train_set, test)
    return train_set, test


def _specs(cfg: ExperimentConfig, train_set: Dataset):
    specs, _ = profile_specs(cfg.profile, train_set.num_classes, cfg.lrn)
    return specs, train_set.image_shape


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / CHECKPOINT_NAME


# --- pretraining ---------------------------------------------------------------


@dataclass
class PretrainResult:
    model: Model
    path: Optional[Path]
    metadata: Dict


def _pretrain_model(cfg: ExperimentConfig, train_set: Dataset, test: Dataset) -> Tuple[Model, Dict]:
    specs, input_shape = _specs(cfg, train_set)
    model = build(specs, input_shape, cfg.seed)
    config = dataclasses.replace(cfg.pretrain, init=InitMode.WARM, shuffle_seed=cfg.seed)
    result = train(model, train_set, config)
    metadata = {
        "profile": cfg.profile,
        "lrn": cfg.lrn,
        "input_shape": list(input_shape),
        "num_classes": train_set.num_classes,
        "epochs": config.epochs,
        "final_loss": result.final_loss,
        "train_accuracy": evaluate(result.model, train_set).accuracy,
        "test_accuracy": evaluate(result.model, test).accuracy,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
    }
    logger.info("pretrained %s model: train accuracy %.3f, test accuracy %.3f",
                cfg.profile, metadata["train_accuracy"], metadata["test_accuracy"])
    return result.model, metadata


def pretrain(cfg: ExperimentConfig) -> PretrainResult:
    """Train the model profile on clean data and write the warm-start checkpoint."""
    train_set, test_set = load_datasets(cfg)
    model, metadata = _pretrain_model(cfg, train_set, test_set)
    path = checkpoint_path(cfg)
    checkpoint.save_file(model, path)
    path.with_name(CHECKPOINT_META).write_text(json.dumps(metadata, indent=2))
    write_manifest(train_set, Path(cfg.out_dir) / "train_manifest.json")
    return PretrainResult(model=model, path=path, metadata=metadata)


def load_warm_start(cfg: ExperimentConfig, train_set: Dataset) -> Model:
    path = checkpoint_path(cfg)
    if not path.exists():
        raise MissingCheckpointError(str(path))
    specs, input_shape = _specs(cfg, train_set)
    return checkpoint.load_file(path, specs, input_shape)


def _feature_model(cfg: ExperimentConfig, train_set: Dataset, test: Dataset) -> Model:
    """Checkpoint when one exists, else a freshly pretrained model."""
    if checkpoint_path(cfg).exists():
        return load_warm_start(cfg, train_set)
    logger.info("no checkpoint at %s, pretraining in process", checkpoint_path(cfg))
    return _pretrain_model(cfg, train_set, test)[0]


# --- trial machinery -------------------------------------------------------------


@dataclass
class Campaign:
    """State shared read-only by every trial of one run."""

    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    model: Model
    poison_cfg: PoisonConfig
    config_hash: str


def _campaign(cfg: ExperimentConfig, model: Model, train_set: Dataset, test: Dataset) -> Campaign:
    poison_cfg = cfg.poison
    if poison_cfg.stop_threshold is None:
        # recomputed per experiment from the clean training features
        threshold = compute_stop_threshold(model, train_set)
        poison_cfg = dataclasses.replace(poison_cfg, stop_threshold=threshold)
        logger.info("feature-space stop threshold %.4g", threshold)
    return Campaign(cfg=cfg, train=train_set, test=test, model=model, poison_cfg=poison_cfg,
                    config_hash=config_hash(cfg))


def _pick_random_target(campaign: Campaign, seed: int) -> LabeledImage:
    """Seeded draw among target-class test images the clean model gets right."""
    test, cls = campaign.test, campaign.cfg.target_class
    members = test.indices_of(cls)
    if not members:
        raise InvalidArgumentError(f"test split has no images of target class {cls}")
    pixels, _ = test.arrays()
    predicted, _ = campaign.model.predict(pixels[members])
    correct = [idx for idx, p in zip(members, predicted) if p == cls] or members
    return test.images[correct[int(np.random.default_rng(seed).integers(len(correct)))]]


def _craft(campaign: Campaign, target: LabeledImage, bases: Sequence[LabeledImage],
           gamma: float) -> List[PoisonResult]:
    return craft_poison_set(campaign.model, target.pixels, [b.pixels for b in bases],
                            campaign.poison_cfg, gamma, campaign.cfg.craft_jobs)


def _as_training_images(poisons: Sequence[Tensor], base_class: int, tag: str) -> List[LabeledImage]:
    return [LabeledImage(p, base_class, f"{tag}/poison{i}") for i, p in enumerate(poisons)]


def _retrain_config(campaign: Campaign, seeds: Dict[str, int], train_size: int) -> TrainConfig:
    cfg = campaign.cfg
    batch = cfg.retrain.batch_size
    if cfg.scenario != "transfer":
        batch = scaled_batch_size(batch, train_size, cfg.reference_train_size)
    return dataclasses.replace(cfg.retrain, batch_size=batch,
                               init_seed=seeds["init"], shuffle_seed=seeds["shuffle"])


def _feature_distances(model: Model, target: LabeledImage, poisons: Sequence[Tensor]) -> List[float]:
    target_features = model.features(target.pixels).data[0]
    features = model.features(np.stack([p.data for p in poisons])).data
    return [float(np.linalg.norm(row - target_features)) for row in features]


@dataclass
class Attack:
    """One poisoning attempt inside a trial."""

    scenario: str
    arm: str
    trial: int
    target: LabeledImage
    bases: List[LabeledImage]
    gamma: float
    poisons: List[Tensor]
    results: List[PoisonResult]


def _execute(campaign: Campaign, attack: Attack, seeds: Dict[str, int],
             tracker: ExperimentTracker, clean_reference: Optional[Model] = None,
             warnings: Sequence[str] = ()) -> Tuple[AttackReport, Model]:
    """Retrain on clean data plus poisons, then adjudicate against the target."""
    cfg = campaign.cfg
    base_class, target_class = cfg.base_class, cfg.target_class
    tag = f"{attack.scenario}/{attack.arm}/trial{attack.trial}"
    poisoned_train = campaign.train.with_images(_as_training_images(attack.poisons, base_class, tag))
    retrain_cfg = _retrain_config(campaign, seeds, len(poisoned_train))

    if clean_reference is None:
        clean_reference = campaign.model
    history = DeviationHistory(decision_normal(clean_reference, target_class, base_class),
                               target_class, base_class)
    with tracker.phase("retrain"):
        trained = train(campaign.model, poisoned_train, retrain_cfg, on_epoch=history.record)
    with tracker.phase("adjudicate"):
        outcome = attack_success(trained.model, attack.target.pixels, base_class)
        deviation = angular_deviation(decision_normal(clean_reference, target_class, base_class),
                                      decision_normal(trained.model, target_class, base_class))
        # accuracy is scored on the test split without the target itself
        held_out = campaign.test.without(attack.target.source_id)
        poisoned_accuracy = evaluate(trained.model, held_out).accuracy
        clean_accuracy = evaluate(clean_reference, held_out).accuracy
        distances = _feature_distances(campaign.model, attack.target, attack.poisons)

    cell = f"n{len(attack.poisons)}-g{attack.gamma:g}"
    report = AttackReport(
        experiment_id=f"{attack.scenario}-{attack.arm}-{cell}-t{attack.trial}",
        scenario=attack.scenario,
        arm=attack.arm,
        trial=attack.trial,
        target_class=target_class,
        base_class=base_class,
        target_source=attack.target.source_id,
        base_sources=[b.source_id for b in attack.bases],
        n_poisons=len(attack.poisons),
        gamma=float(attack.gamma),
        success=outcome.success,
        predicted_class=outcome.predicted_class,
        confidence=outcome.confidence,
        angular_deviation=deviation,
        clean_accuracy=clean_accuracy,
        poisoned_accuracy=poisoned_accuracy,
        feature_distances=distances,
        stop_reasons=[r.stop_reason.value if r is not None else "skipped" for r in attack.results],
        seeds=dict(seeds),
        config_hash=campaign.config_hash,
        wall_clock=tracker.get_duration(),
        train_loss=trained.final_loss,
        train_accuracy=trained.final_accuracy,
        deviation_by_epoch=history.get_deviations(),
        deviation_trend=history.get_deviation_trend(),
        first_epoch_share=history.get_first_epoch_share(),
        phase_times=dict(tracker.phase_times),
        warnings=list(warnings) + [r.error for r in attack.results if r is not None and r.failed],
    )
    logger.info("%s: %s (predicted %d, confidence %.3f, deviation %.2f deg)",
                report.experiment_id, "success" if report.success else "failure",
                report.predicted_class, report.confidence, report.angular_deviation)
    return report, trained.model


def _default_jobs(cfg: ExperimentConfig) -> int:
    return cfg.jobs or os.cpu_count() or 1


def _run_trials(cfg: ExperimentConfig, job: Callable[[int], List[AttackReport]],
                desc: str) -> List[AttackReport]:
    """Run trials on a bounded pool; reports come back ordered by trial index."""
    indices = cfg.trial_indices()
    results: Dict[int, List[AttackReport]] = {}
    jobs = min(_default_jobs(cfg), len(indices))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(job, index): index for index in indices}
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc,
                           file=sys.stderr, leave=False):
            results[futures[future]] = future.result()
    return [report for index in indices for report in results[index]]


def _finish(cfg: ExperimentConfig, name: str, reports: List[AttackReport]) -> List[AttackReport]:
    path = Path(cfg.out_dir) / f"{name}_reports.jsonl"
    write_report(reports, path)
    Path(cfg.out_dir, f"{name}_config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
    )
    logger.info("wrote %d reports to %s", len(reports), path)
    return reports


# --- scenarios ---------------------------------------------------------------------


def _underdetermination_warning(model: Model, train_size: int) -> Optional[str]:
    weights = model.feature_dim * model.num_classes
    if train_size > weights:
        return (f"final layer has {weights} weights for {train_size} training examples; "
                f"the one-shot attack relies on an underdetermined final layer")
    return None


def run_oneshot_transfer(cfg: ExperimentConfig) -> List[AttackReport]:
    """One poison per trial, final layer retrained from a cold start."""
    train_set, test_set = load_datasets(cfg)
    model = _feature_model(cfg, train_set, test_set)
    campaign = _campaign(cfg, model, train_set, test_set)
    warning = _underdetermination_warning(model, len(train_set) + 1)
    if warning:
        logger.warning(warning)
    outliers = (select_outlier_targets(model, test_set, cfg.target_class, cfg.n_trials)
                if cfg.target_selection == "outlier" else None)

    def trial(index: int) -> List[AttackReport]:
        tracker = ExperimentTracker()
        seeds = trial_seeds(cfg.seed, index)
        notes = [warning] if warning else []
        if outliers is not None and index < len(outliers.targets):
            target = outliers.targets[index]
        else:
            if outliers is not None:
                notes.append("outlier shortfall, random target used")
            target = _pick_random_target(campaign, seeds["target"])
        base = sample_bases(test_set, cfg.base_class, 1, seeds["bases"])
        with tracker.phase("craft"):
            results = _craft(campaign, target, base, cfg.gammas[0])
        # clean head from the same seeds isolates the poison's effect
        with tracker.phase("retrain"):
            clean = train(model, train_set, _retrain_config(campaign, seeds, len(train_set) + 1)).model
        attack = Attack("transfer", "full", index, target, base, cfg.gammas[0],
                        [r.poison for r in results], results)
        report, _ = _execute(campaign, attack, seeds, tracker, clean_reference=clean, warnings=notes)
        return [report]

    return _finish(cfg, "oneshot", _run_trials(cfg, trial, "oneshot trials"))


def run_end2end(cfg: ExperimentConfig) -> List[AttackReport]:
    """Sweep poison counts and opacities, retraining every layer from the checkpoint."""
    train_set, test_set = load_datasets(cfg)
    model = load_warm_start(cfg, train_set)
    campaign = _campaign(cfg, model, train_set, test_set)

    def trial(index: int) -> List[AttackReport]:
        seeds = trial_seeds(cfg.seed, index)
        target = _pick_random_target(campaign, seeds["target"])
        reports = []
        for n_poisons in cfg.n_poisons:
            bases = sample_bases(test_set, cfg.base_class, n_poisons, seeds["bases"])
            for gamma in cfg.gammas:
                tracker = ExperimentTracker()
                with tracker.phase("craft"):
                    results = _craft(campaign, target, bases, gamma)
                attack = Attack("end2end", "full", index, target, bases, gamma,
                                [r.poison for r in results], results)
                reports.append(_execute(campaign, attack, seeds, tracker)[0])
        return reports

    return _finish(cfg, "end2end", _run_trials(cfg, trial, "end2end trials"))


def run_outlier_campaign(cfg: ExperimentConfig) -> List[AttackReport]:
    """Least-confident targets against a paired random-target control arm."""
    train_set, test_set = load_datasets(cfg)
    model = load_warm_start(cfg, train_set)
    selection = select_outlier_targets(model, test_set, cfg.target_class, cfg.outlier_k)
    trials = min(cfg.n_trials, len(selection.targets))
    if trials == 0:
        raise InvalidArgumentError(f"no correctly classified test images of class {cfg.target_class}")
    cfg = dataclasses.replace(cfg, n_trials=trials, only_trials=[t for t in cfg.only_trials if t < trials])
    campaign = _campaign(cfg, model, train_set, test_set)
    n_poisons = max(cfg.n_poisons)
    gamma = cfg.gammas[0]
    shortfall = ["outlier shortfall"] if selection.shortfall else []

    def trial(index: int) -> List[AttackReport]:
        seeds = trial_seeds(cfg.seed, index)
        bases = sample_bases(test_set, cfg.base_class, n_poisons, seeds["bases"])
        reports = []
        arms = (("outlier", selection.targets[index]),
                ("random", _pick_random_target(campaign, seeds["target"])))
        for arm, target in arms:
            tracker = ExperimentTracker()
            with tracker.phase("craft"):
                results = _craft(campaign, target, bases, gamma)
            attack = Attack("end2end", arm, index, target, bases, gamma,
                            [r.poison for r in results], results)
            reports.append(_execute(campaign, attack, seeds, tracker, warnings=shortfall)[0])
        return reports

    return _finish(cfg, "outliers", _run_trials(cfg, trial, "outlier trials"))


def _ablation_attack(campaign: Campaign, arm: str, index: int, target: LabeledImage,
                     bases: List[LabeledImage], gamma: float) -> Attack:
    n = len(bases)
    if arm == "single_base":
        # identical bases craft identical poisons, so craft once
        results = _craft(campaign, target, bases[:1], gamma) * n
        return Attack("end2end", arm, index, target, [bases[0]] * n, gamma,
                      [r.poison for r in results], results)
    if arm == "no_optimization":
        poisons = [watermark_blend(b.pixels, target.pixels, gamma) for b in bases]
        return Attack("end2end", arm, index, target, bases, gamma, poisons, [None] * n)
    if arm == "no_watermark":
        gamma = 0.0
    results = _craft(campaign, target, bases, gamma)
    return Attack("end2end", arm, index, target, bases, gamma, [r.poison for r in results], results)


def _write_scene(cfg: ExperimentConfig, model: Model, campaign: Campaign, attack: Attack):
    pixels, labels = campaign.train.arrays()
    try:
        basis = projection_basis(model, model.features(pixels).data, labels,
                                 cfg.target_class, cfg.base_class)
    except DegenerateBasisError as exc:
        logger.warning("no scene for %s trial %d: %s", attack.arm, attack.trial, exc)
        return
    rows = project_scene(model, basis, campaign.train, attack.target, attack.bases[0], attack.poisons)
    write_scene_csv(rows, Path(cfg.out_dir) / "scenes" / f"trial{attack.trial}_{attack.arm}.csv")


def run_ablation(cfg: ExperimentConfig) -> List[AttackReport]:
    """Full method against three leave-one-out arms with shared seeds."""
    train_set, test_set = load_datasets(cfg)
    model = load_warm_start(cfg, train_set)
    campaign = _campaign(cfg, model, train_set, test_set)
    n_poisons = max(cfg.n_poisons)
    gamma = cfg.gammas[0]

    def trial(index: int) -> List[AttackReport]:
        seeds = trial_seeds(cfg.seed, index)
        target = _pick_random_target(campaign, seeds["target"])
        bases = sample_bases(test_set, cfg.base_class, n_poisons, seeds["bases"])
        reports = []
        for arm in ABLATION_ARMS:
            tracker = ExperimentTracker()
            with tracker.phase("craft"):
                attack = _ablation_attack(campaign, arm, index, target, bases, gamma)
            report, trained = _execute(campaign, attack, seeds, tracker)
            _write_scene(cfg, trained, campaign, attack)
            reports.append(report)
        return reports

    return _finish(cfg, "ablation", _run_trials(cfg, trial, "ablation trials"))


# --- single-poison utilities ---------------------------------------------------------


@dataclass
class CraftOutput:
    target: LabeledImage
    base: LabeledImage
    result: PoisonResult
    png_path: Path
    blob_path: Path
    scene_path: Optional[Path] = None


def _craft_one(campaign: Campaign, trial: int) -> CraftOutput:
    cfg = campaign.cfg
    seeds = trial_seeds(cfg.seed, trial)
    target = _pick_random_target(campaign, seeds["target"])
    base = sample_bases(campaign.test, cfg.base_class, 1, seeds["bases"])[0]
    result = _craft(campaign, target, [base], cfg.gammas[0])[0]
    out = Path(cfg.out_dir)
    png_path, blob_path = out / "poison.png", out / "poison.pfck"
    save_poison_png(result.poison, png_path)
    save_poison_blob([result], blob_path)
    return CraftOutput(target, base, result, png_path, blob_path)


def _single_campaign(cfg: ExperimentConfig) -> Campaign:
    train_set, test_set = load_datasets(cfg)
    return _campaign(cfg, _feature_model(cfg, train_set, test_set), train_set, test_set)


def craft_single(cfg: ExperimentConfig, trial: int = 0) -> CraftOutput:
    """Craft one poison for trial ``trial``'s target and base, saved as PNG and blob."""
    return _craft_one(_single_campaign(cfg), trial)


def project_single(cfg: ExperimentConfig, trial: int = 0) -> CraftOutput:
    """Craft one poison and write the clean model's feature-space scene as CSV."""
    campaign = _single_campaign(cfg)
    crafted = _craft_one(campaign, trial)
    model = campaign.model
    pixels, labels = campaign.train.arrays()
    basis = projection_basis(model, model.features(pixels).data, labels,
                             cfg.target_class, cfg.base_class)
    rows = project_scene(model, basis, campaign.train, crafted.target, crafted.base, [crafted.result])
    crafted.scene_path = Path(cfg.out_dir) / "scene.csv"
    write_scene_csv(rows, crafted.scene_path)
    return crafted


SCENARIO_RUNNERS = {
    "transfer": run_oneshot_transfer,
    "end2end": run_end2end,
    "outliers": run_outlier_campaign,
    "ablation": run_ablation,
}


def class_name(cfg: ExperimentConfig, class_id: int) -> str:
    if cfg.dataset.source == "cifar":
        return CIFAR10_CLASSES[cfg.dataset.cifar_classes[class_id]]
    return f"class{class_id}"
