"""Per-step training telemetry and its CSV form."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING

import attrs

from .exceptions import ContractViolationError
from .utils import format_float

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

_LOGGER = logging.getLogger(__name__)


@attrs.frozen
class MetricsRow:
    """Telemetry of one training step."""

    step: int
    validation_accuracy: float
    mean_kl: float
    reference_kl: float
    reference_kl_pre: float
    teacher_distance: float
    kl_grad_norm: float
    mean_response_tokens: float
    mean_turns: float
    loss_grpo: float
    loss_distill: float
    clip_activations: int
    filtered_groups: int
    skipped: bool
    update_norm: float

    def __attrs_post_init__(self) -> None:
        """All float values are finite."""
        for field in attrs.fields(MetricsRow):
            value = getattr(self, field.name)
            if isinstance(value, float) and not math.isfinite(value):
                msg = f"Step {self.step}: {field.name} is not finite ({value})"
                raise ContractViolationError(msg)

    def as_strings(self) -> list[str]:
        """Return the CSV cells in column order."""
        cells = []
        for field in attrs.fields(MetricsRow):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                cells.append(str(int(value)))
            elif isinstance(value, float):
                cells.append(format_float(value))
            else:
                cells.append(str(value))
        return cells


COLUMNS = tuple(field.name for field in attrs.fields(MetricsRow))


def check_steps(rows: Sequence[MetricsRow]) -> None:
    """Raise unless steps are strictly increasing."""
    for prev, row in zip(rows, rows[1:], strict=False):
        if row.step <= prev.step:
            msg = f"Metrics steps must increase, got {prev.step} then {row.step}"
            raise ContractViolationError(msg)


def write_metrics_csv(path: str | Path, rows: Iterable[MetricsRow]) -> int:
    """Write rows with a header; byte-stable for equal rows."""
    rows = list(rows)
    check_steps(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(row.as_strings() for row in rows)
    _LOGGER.debug("Wrote %s metrics rows to %s", len(rows), path)
    return len(rows)


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    """Read a metrics CSV written by write_metrics_csv."""
    types = {field.name: field.type for field in attrs.fields(MetricsRow)}
    rows = []
    with Path(path).open(encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            values: dict[str, object] = {}
            for name, text in record.items():
                kind = types.get(name)
                if kind == "int":
                    values[name] = int(text)
                elif kind == "bool":
                    values[name] = text == "1"
                else:
                    values[name] = float(text)
            rows.append(MetricsRow(**values))  # type: ignore[arg-type]
    return rows


def trailing_mean(values: Sequence[float], fraction: float) -> float:
    """Return the mean of the last fraction of a series, at least one value."""
    if not values:
        msg = "trailing_mean needs a non-empty series"
        raise ContractViolationError(msg)
    count = max(1, math.ceil(len(values) * fraction))
    tail = values[-count:]
    return math.fsum(tail) / len(tail)
