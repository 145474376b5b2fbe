import attrs
import pytest

from clinigym.exceptions import ContractViolationError
from clinigym.metrics import COLUMNS, MetricsRow, check_steps, read_metrics_csv, trailing_mean, write_metrics_csv


def _row(step, **changes):
    values = {
        "step": step,
        "validation_accuracy": 0.5,
        "mean_kl": 0.01,
        "reference_kl": 0.002,
        "reference_kl_pre": 0.003,
        "teacher_distance": 0.25,
        "kl_grad_norm": 0.125,
        "mean_response_tokens": 9.5,
        "mean_turns": 2.0,
        "loss_grpo": -0.75,
        "loss_distill": 0.04,
        "clip_activations": 0,
        "filtered_groups": 1,
        "skipped": False,
        "update_norm": 0.1,
    }
    values.update(changes)
    return MetricsRow(**values)


def test_columns_follow_fields():
    assert COLUMNS[0] == "step"
    assert COLUMNS == tuple(field.name for field in attrs.fields(MetricsRow))


def test_non_finite_values_are_rejected():
    with pytest.raises(ContractViolationError, match="reference_kl"):
        _row(1, reference_kl=float("nan"))
    with pytest.raises(ContractViolationError, match="mean_kl"):
        _row(1, mean_kl=float("inf"))


def test_cells():
    cells = _row(3, skipped=True).as_strings()
    assert cells[0] == "3"
    assert cells[COLUMNS.index("skipped")] == "1"


def test_csv_round_trip(tmp_path):
    rows = [_row(1), _row(2, skipped=True, update_norm=0.0)]
    path = tmp_path / "nested" / "metrics.csv"
    assert write_metrics_csv(path, rows) == 2
    assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(COLUMNS)
    assert read_metrics_csv(path) == rows


def test_csv_is_byte_stable(tmp_path):
    rows = [_row(1), _row(2)]
    write_metrics_csv(tmp_path / "a.csv", rows)
    write_metrics_csv(tmp_path / "b.csv", rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_steps_must_increase(tmp_path):
    with pytest.raises(ContractViolationError, match="increase"):
        check_steps([_row(2), _row(2)])
    with pytest.raises(ContractViolationError):
        write_metrics_csv(tmp_path / "m.csv", [_row(3), _row(1)])


def test_trailing_mean():
    assert trailing_mean([1.0, 2.0, 3.0, 4.0], 0.5) == 3.5
    assert trailing_mean([1.0, 2.0, 3.0], 0.1) == 3.0
    with pytest.raises(ContractViolationError):
        trailing_mean([], 0.5)
