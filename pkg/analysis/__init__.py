"""Post-run analysis: adjudication, boundary geometry and attack reports."""

from .adjudication import AttackOutcome, angular_deviation, attack_success, decision_normal
from .deviation_history import DeviationHistory
from .experiment_tracker import ExperimentTracker
from .projection import ProjectionBasis, project_scene, projection_basis, write_scene_csv
from .report_generator import AttackReport, ReportGenerator, read_report, write_report

__all__ = [
    'AttackOutcome', 'attack_success', 'angular_deviation', 'decision_normal',
    'DeviationHistory', 'ExperimentTracker',
    'ProjectionBasis', 'projection_basis', 'project_scene', 'write_scene_csv',
    'AttackReport', 'ReportGenerator', 'read_report', 'write_report',
]
