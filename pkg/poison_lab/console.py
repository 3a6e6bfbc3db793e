"""Plain-text summaries printed to stdout at the end of a run."""

from typing import Dict, Optional, Sequence

from analysis.experiment_tracker import ExperimentTracker
from analysis.report_generator import AttackReport, ReportGenerator

from .config import ExperimentConfig
from .experiments import CraftOutput, PretrainResult, class_name


def print_banner(title: str):
    print("=" * 50)
    print(title)
    print("=" * 50)


def print_campaign(title: str, cfg: ExperimentConfig, reports: Sequence[AttackReport],
                   tracker: Optional[ExperimentTracker] = None) -> Dict:
    """Print the campaign summary and return the aggregate report.

    A tracker started before the campaign gets every attack's timings.
    """
    if tracker is not None:
        for r in reports:
            tracker.record_attack(r.experiment_id, r.wall_clock, r.phase_times)
    report = ReportGenerator(reports, tracker).generate_report()
    print_banner(title)
    print(f"Base class: {class_name(cfg, cfg.base_class)}  "
          f"Target class: {class_name(cfg, cfg.target_class)}")
    print(f"Output: {cfg.out_dir}")
    print("")
    print(report['summary'])
    return report


def print_pretrain(result: PretrainResult):
    meta = result.metadata
    print_banner("Pretraining")
    print(f"Profile: {meta['profile']}  Epochs: {meta['epochs']}")
    print(f"Final Loss: {meta['final_loss']:.4g}")
    print(f"Train Accuracy: {meta['train_accuracy'] * 100:.1f}%")
    print(f"Test Accuracy: {meta['test_accuracy'] * 100:.1f}%")
    print(f"Checkpoint: {result.path}")


def print_craft(crafted: CraftOutput):
    result = crafted.result
    print_banner("Poison")
    print(f"Target: {crafted.target.source_id}  Base: {crafted.base.source_id}")
    print(f"Iterations: {result.iterations} ({result.stop_reason.value})")
    print(f"Feature Distance: {result.feature_distance:.4g}")
    print(f"Distance to Base: L2 {result.l2_to_base:.3f}, Linf {result.linf_to_base:.3f}")
    print(f"PNG: {crafted.png_path}")
    print(f"Blob: {crafted.blob_path}")
    if crafted.scene_path is not None:
        print(f"Scene: {crafted.scene_path}")
