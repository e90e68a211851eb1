"""
Turns metric sample streams into scalar results: trims the start/stop deltas,
averages what is left and writes CSV summaries.
"""
import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Tuple

from metrics import MetricSample, MetricUnavailableError
from workload import EmberError

logger = logging.getLogger(__name__)

DEFAULT_START_DELTA_MS = 5000
DEFAULT_STOP_DELTA_MS = 2000
CSV_HEADER = ('label', 'metric', 'mean', 'samples')


class MeasurementError(EmberError, ValueError):
    """Invalid measurement window or summary output failure"""


@dataclass(frozen=True)
class MeasurementWindow:
    """Run duration with the leading and trailing spans to drop"""
    total_ms: int
    start_delta_ms: int = DEFAULT_START_DELTA_MS
    stop_delta_ms: int = DEFAULT_STOP_DELTA_MS

    def __post_init__(self):
        if self.start_delta_ms < 0 or self.stop_delta_ms < 0:
            raise MeasurementError("start and stop deltas must be >= 0")
        if self.start_delta_ms + self.stop_delta_ms >= self.total_ms:
            raise MeasurementError(
                f"start delta {self.start_delta_ms} ms + stop delta {self.stop_delta_ms} ms "
                f"must be shorter than the run ({self.total_ms} ms)"
            )

    def bounds(self, run_start_ms: int = 0) -> Tuple[int, int]:
        """Inclusive [first, last] timestamps kept"""
        return (run_start_ms + self.start_delta_ms,
                run_start_ms + self.total_ms - self.stop_delta_ms)


class SummaryRow(NamedTuple):
    label: str
    metric: str
    mean: float
    samples: int


def samples_in_window(samples: Iterable[MetricSample], window: MeasurementWindow,
                      run_start_ms: int = 0) -> List[MetricSample]:
    first, last = window.bounds(run_start_ms)
    return [s for s in samples if first <= s.timestamp_ms <= last]


def window_average(samples: Iterable[MetricSample], window: MeasurementWindow, run_start_ms: int = 0) -> float:
    """
    Mean of the sample values with run_start + start_delta <= t <= run_start + total - stop_delta.

    Raises:
        MetricUnavailableError: no sample falls into the window
    """
    kept = samples_in_window(samples, window, run_start_ms)
    if not kept:
        first, last = window.bounds(run_start_ms)
        raise MetricUnavailableError(f"no samples between {first} ms and {last} ms")
    return sum(s.value for s in kept) / len(kept)


def format_csv_summary(rows: Iterable[Tuple[str, str, float, int]]) -> str:
    """CSV text with header, 6 significant digits and LF line endings"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(CSV_HEADER)
    for label, metric, mean, count in rows:
        writer.writerow([label, metric, f"{mean:.6g}", int(count)])
    return buffer.getvalue()


def write_csv_summary(rows: Iterable[Tuple[str, str, float, int]], path) -> Path:
    """Write the CSV summary as UTF-8; returns the path written"""
    output = Path(path)
    text = format_csv_summary(rows)
    try:
        if output.parent and not output.parent.exists():
            output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    except OSError as e:
        raise MeasurementError(f"cannot write {output}: {e}") from e
    logger.debug("wrote %s", output)
    return output
