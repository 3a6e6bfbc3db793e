"""Attack reports: JSON-lines storage, CSV mirror and campaign summaries."""

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from poison_lab.errors import InvalidArgumentError, SerializationError

from .experiment_tracker import ExperimentTracker

SCHEMA_VERSION = 2

CSV_COLUMNS = [
    "experiment_id", "scenario", "arm", "trial", "target_class", "base_class",
    "target_source", "n_poisons", "gamma", "success", "predicted_class", "confidence",
    "angular_deviation", "clean_accuracy", "poisoned_accuracy", "accuracy_drop",
    "mean_feature_distance", "train_loss", "train_accuracy", "deviation_trend",
    "first_epoch_share", "config_hash", "wall_clock", "phase_times", "seeds",
]


@dataclass
class AttackReport:
    """Outcome and provenance of a single attack trial."""

    experiment_id: str
    scenario: str
    trial: int
    target_class: int
    base_class: int
    target_source: str
    base_sources: List[str]
    n_poisons: int
    gamma: float
    success: bool
    predicted_class: int
    confidence: float
    angular_deviation: float
    clean_accuracy: float
    poisoned_accuracy: float
    feature_distances: List[float]
    stop_reasons: List[str]
    seeds: Dict[str, int]
    config_hash: str
    wall_clock: float
    arm: str = "full"
    train_loss: float = 0.0
    train_accuracy: float = 0.0
    deviation_by_epoch: List[float] = field(default_factory=list)
    deviation_trend: str = ""
    first_epoch_share: float = 0.0
    phase_times: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.success and self.predicted_class != self.base_class:
            raise InvalidArgumentError(
                f"trial {self.trial} marked successful but predicted class "
                f"{self.predicted_class} is not the base class {self.base_class}"
            )

    @property
    def accuracy_drop(self) -> float:
        return self.clean_accuracy - self.poisoned_accuracy

    @property
    def mean_feature_distance(self) -> float:
        if not self.feature_distances:
            return 0.0
        return sum(self.feature_distances) / len(self.feature_distances)

    def to_dict(self) -> Dict:
        """Plain dict; refuses non-finite floats anywhere in the record."""
        record = asdict(self)
        for name, value in record.items():
            _check_finite(name, value)
        return record

    @classmethod
    def from_dict(cls, record: Dict) -> "AttackReport":
        version = record.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported report schema version {version}")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in record.items() if k in known})


def _check_finite(name: str, value):
    if isinstance(value, float) and not math.isfinite(value):
        raise SerializationError(name, value)
    if isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            _check_finite(f"{name}[{index}]", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            _check_finite(f"{name}.{key}", item)


def _csv_row(report: AttackReport) -> List:
    record = report.to_dict()
    record["accuracy_drop"] = report.accuracy_drop
    record["mean_feature_distance"] = report.mean_feature_distance
    record["seeds"] = json.dumps(report.seeds, sort_keys=True)
    record["phase_times"] = json.dumps(report.phase_times, sort_keys=True)
    return [record[column] for column in CSV_COLUMNS]


def csv_path_for(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".csv")


def write_report(reports: Sequence[AttackReport], path: Union[str, Path]) -> Path:
    """Write JSON lines to ``path`` and a flat CSV next to it; returns the CSV path."""
    lines = [json.dumps(r.to_dict(), sort_keys=True, allow_nan=False) for r in reports]
    rows = [_csv_row(r) for r in reports]
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("".join(line + "\n" for line in lines))
    mirror = csv_path_for(target)
    with open(mirror, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    return mirror


def read_report(path: Union[str, Path]) -> List[AttackReport]:
    """Inverse of ``write_report`` for the JSON-lines file."""
    reports = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            reports.append(AttackReport.from_dict(json.loads(line)))
    return reports


class ReportGenerator:
    """Aggregates attack reports into campaign statistics and a text summary."""

    def __init__(self, reports: Sequence[AttackReport], tracker: Optional[ExperimentTracker] = None):
        """Initialize the report generator."""
        self.reports = list(reports)
        self.tracker = tracker

    def generate_report(self) -> Dict:
        """Generate the campaign summary."""
        stats = self._get_overall_stats(self.reports)
        report = {
            'statistics': stats,
            'breakdown': self._get_breakdown(),
            'arms': self._get_arm_rates(),
            'deviation_trends': self._get_trend_counts(),
            'timing': self.tracker.get_statistics() if self.tracker else None,
            'summary': self._generate_summary(stats),
        }
        return report

    def _get_overall_stats(self, reports: Sequence[AttackReport]) -> Dict:
        """Rates derive from per-report flags only."""
        if not reports:
            return {
                'trials': 0, 'success_rate': 0.0, 'median_confidence': 0.0,
                'mean_angular_deviation': 0.0, 'mean_accuracy_drop': 0.0,
                'max_accuracy_drop': 0.0, 'mean_first_epoch_share': 0.0,
            }
        successes = [r for r in reports if r.success]
        return {
            'trials': len(reports),
            'success_rate': sum(r.success for r in reports) / len(reports),
            'median_confidence': statistics.median(r.confidence for r in successes) if successes else 0.0,
            'mean_angular_deviation': statistics.fmean(r.angular_deviation for r in reports),
            'mean_accuracy_drop': statistics.fmean(r.accuracy_drop for r in reports),
            'max_accuracy_drop': max(r.accuracy_drop for r in reports),
            'mean_first_epoch_share': statistics.fmean(r.first_epoch_share for r in reports),
        }

    def _get_breakdown(self) -> List[Dict]:
        """Success rate per (scenario, arm, n_poisons, gamma) cell."""
        cells: Dict[Tuple[str, str, int, float], List[AttackReport]] = {}
        for r in self.reports:
            cells.setdefault((r.scenario, r.arm, r.n_poisons, r.gamma), []).append(r)
        rows = []
        for (scenario, arm, n_poisons, gamma), members in sorted(cells.items()):
            rows.append({
                'scenario': scenario,
                'arm': arm,
                'n_poisons': n_poisons,
                'gamma': gamma,
                'trials': len(members),
                'success_rate': sum(r.success for r in members) / len(members),
            })
        return rows

    def _get_arm_rates(self) -> Dict[str, float]:
        arms: Dict[str, List[AttackReport]] = {}
        for r in self.reports:
            arms.setdefault(r.arm, []).append(r)
        return {arm: sum(r.success for r in members) / len(members) for arm, members in arms.items()}

    def _get_trend_counts(self) -> Dict[str, int]:
        """How many retraining runs showed each boundary-rotation trend."""
        counts: Dict[str, int] = {}
        for r in self.reports:
            if r.deviation_trend:
                counts[r.deviation_trend] = counts.get(r.deviation_trend, 0) + 1
        return counts

    def _generate_summary(self, stats: Dict) -> str:
        """Generate a text summary of the campaign."""
        lines = []
        lines.append(f"Trials: {stats['trials']}")
        lines.append(f"Attack Success Rate: {stats['success_rate'] * 100:.1f}%")
        lines.append(f"Median Confidence (successful): {stats['median_confidence'] * 100:.1f}%")
        lines.append("")

        lines.append(f"Mean Angular Deviation: {stats['mean_angular_deviation']:.2f} degrees")
        lines.append(f"Mean Clean Accuracy Drop: {stats['mean_accuracy_drop'] * 100:.2f}%")
        lines.append(f"Worst Clean Accuracy Drop: {stats['max_accuracy_drop'] * 100:.2f}%")

        trends = self._get_trend_counts()
        if trends:
            lines.append("")
            lines.append(f"Rotation in First Epoch: {stats['mean_first_epoch_share'] * 100:.1f}% of final")
            for trend, count in sorted(trends.items()):
                lines.append(f"  {trend}: {count}")

        breakdown = self._get_breakdown()
        if len(breakdown) > 1:
            lines.append("")
            lines.append("Success by arm / poisons / opacity:")
            for row in breakdown:
                lines.append(
                    f"  {row['scenario']:<9} {row['arm']:<12} n={row['n_poisons']:<3} "
                    f"gamma={row['gamma']:.2f}  {row['success_rate'] * 100:5.1f}% of {row['trials']}"
                )

        warned = sum(1 for r in self.reports if r.warnings)
        if warned:
            lines.append("")
            lines.append(f"Trials with warnings: {warned}")

        if self.tracker is not None:
            timing = self.tracker.get_statistics()
            lines.append("")
            lines.append(f"Duration: {timing['duration_formatted']}")
            lines.append(f"Average Attack Time: {timing['average_attack_time']:.2f}s")
            for name in ExperimentTracker.PHASES:
                if name in timing['phase_times']:
                    lines.append(f"  {name}: {timing['phase_times'][name]:.2f}s")

        return "\n".join(lines)
