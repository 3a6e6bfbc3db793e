"""Tracks wall-clock timings of attacks and their phases."""

import time
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple


class ExperimentTracker:
    """Wall-clock bookkeeping for one attack or a whole campaign."""

    PHASES = ("craft", "retrain", "adjudicate")

    def __init__(self):
        """Initialize the tracker."""
        self.start_time = time.perf_counter()
        self.phase_times: Dict[str, float] = {}
        self.attack_times: List[Tuple[str, float]] = []  # (experiment id, seconds)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        """Time a block and add it to the named phase."""
        began = time.perf_counter()
        try:
            yield
        finally:
            self.add_phase_time(name, time.perf_counter() - began)

    def add_phase_time(self, name: str, seconds: float):
        self.phase_times[name] = self.phase_times.get(name, 0.0) + seconds

    def record_attack(self, experiment_id: str, seconds: float,
                      phases: Optional[Dict[str, float]] = None):
        """Fold one finished attack's timings into a campaign tracker."""
        self.attack_times.append((experiment_id, seconds))
        for name, spent in (phases or {}).items():
            self.add_phase_time(name, spent)

    def get_duration(self) -> float:
        """Seconds since the tracker was created."""
        return time.perf_counter() - self.start_time

    def get_average_attack_time(self) -> float:
        if not self.attack_times:
            return 0.0
        return sum(t for _, t in self.attack_times) / len(self.attack_times)

    def get_statistics(self) -> Dict:
        """Timing summary for reports."""
        duration = self.get_duration()
        return {
            'duration_seconds': duration,
            'duration_formatted': self._format_duration(duration),
            'attacks': len(self.attack_times),
            'average_attack_time': self.get_average_attack_time(),
            'phase_times': dict(self.phase_times),
        }

    def _format_duration(self, seconds: float) -> str:
        """Format duration as MM:SS."""
        minutes = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{minutes:02d}:{secs:02d}"
