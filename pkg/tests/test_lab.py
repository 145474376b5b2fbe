import csv
import math

import numpy as np
import pytest

from clinigym.config import TrainerConfig
from clinigym.exceptions import ContractViolationError, UsageError
from clinigym.lab import (
    KlBoundParams,
    combined_objective,
    estimate_smoothness,
    finite_diff_audit,
    kl_bound,
    logprob_objective,
    run_experiment,
    snr_report,
)


def test_kl_bound():
    steady, peak = kl_bound(KlBoundParams(smoothness=1.0, step_bound=0.01, alpha=0.995, copy_interval=30))
    assert steady == pytest.approx(2.0)
    assert peak == pytest.approx(0.045)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"smoothness": 0.0, "step_bound": 0.01, "alpha": 0.9, "copy_interval": 3},
        {"smoothness": 1.0, "step_bound": 0.01, "alpha": 1.0, "copy_interval": 3},
        {"smoothness": 1.0, "step_bound": 0.01, "alpha": 0.9, "copy_interval": 0},
    ],
)
def test_kl_bound_params(kwargs):
    with pytest.raises(ContractViolationError):
        KlBoundParams(**kwargs)


def test_synthetic_snr_ratio():
    report = snr_report({"r_acc": [0.09, 0.91], "r_fmt": [0.52, 0.48]}, {"r_acc": 0.25, "r_fmt": 0.1})
    assert report.components["r_acc"].sigma == pytest.approx(0.41)
    assert report.ratio("r_acc", "r_fmt") == pytest.approx(51.25)
    assert report.accuracy_share_reduction == pytest.approx(1.0 - report.components["r_acc"].snr)


def test_snr_needs_aligned_samples():
    with pytest.raises(ContractViolationError):
        snr_report({"r_acc": [0.0, 1.0], "r_fmt": [1.0]}, {"r_acc": 1.0, "r_fmt": 1.0})
    with pytest.raises(ContractViolationError):
        snr_report({"r_acc": [1.0]}, {"r_acc": 1.0})


def test_snr_rejects_non_finite_samples():
    with pytest.raises(ContractViolationError, match="r_acc"):
        snr_report({"r_acc": [0.0, float("nan")], "r_fmt": [0.5, 0.5]}, {"r_acc": 1.0, "r_fmt": 1.0})
    with pytest.raises(ContractViolationError, match="non-finite"):
        snr_report({"r_fmt": [0.0, math.inf]}, {"r_fmt": 1.0})


def test_estimate_smoothness_of_a_linear_map():
    pairs = [(np.zeros(3), np.ones(3)), (np.ones(3), np.ones(3)), (np.arange(3.0), -np.arange(3.0))]
    assert estimate_smoothness(lambda theta: 3.0 * theta, pairs) == pytest.approx(3.0)


def test_logprob_gradient_audit():
    assert finite_diff_audit(logprob_objective, trials=5, seed=1) < 1e-6


def test_combined_gradient_audit():
    assert finite_diff_audit(combined_objective, trials=3, seed=2) < 1e-5


def test_audit_needs_trials():
    with pytest.raises(ContractViolationError):
        finite_diff_audit(logprob_objective, trials=0)


def test_cosine_sweep_artifacts(tmp_path):
    report = run_experiment("cosine-sweep", tmp_path, seeds=(0, 1), config=TrainerConfig(max_response_tokens=32))
    assert report.passed
    assert report.summary["correct_at_0"] == pytest.approx(1.1)
    assert report.summary["truncated"] == pytest.approx(-0.5)
    with (tmp_path / "cosine-sweep" / "0.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 33
    assert list(rows[0]) == ["length", "correct", "wrong", "truncated"]
    summary = (tmp_path / "cosine-sweep" / "summary.csv").read_text(encoding="utf-8")
    assert "check,cosine correct_at_0,1" in summary
    assert "mean,wrong_at_max,-0.7" in summary


def test_unknown_experiment(tmp_path):
    with pytest.raises(UsageError, match="Unknown experiment"):
        run_experiment("warp-drive", tmp_path)
    with pytest.raises(UsageError, match="seed"):
        run_experiment("snr", tmp_path, seeds=())


@pytest.mark.slow
def test_gradient_audit_experiment(tmp_path):
    assert run_experiment("gradient-audit", tmp_path).passed


def test_snr_experiment_summary_is_finite(tmp_path):
    report = run_experiment("snr", tmp_path, seeds=(0,))
    assert report.passed
    assert all(math.isfinite(value) for value in report.summary.values())
    components = {row["component"] for row in report.results[0].rows}
    assert "r_assert" not in components
    assert {"r_acc", "r_fmt"} <= components


@pytest.mark.slow
@pytest.mark.parametrize(
    ("experiment", "seeds"),
    [
        ("kl-bound", (0,)),
        ("snr", (0,)),
        ("ablation-suite", tuple(range(5))),
        ("restoring-force", (0,)),
    ],
)
def test_experiment_checks_pass(tmp_path, experiment, seeds):
    report = run_experiment(experiment, tmp_path, seeds=seeds, workers=len(seeds))
    failed = [(check.name, check.detail) for check in report.checks if not check.passed]
    assert not failed
    assert report.checks
    assert all(math.isfinite(value) for value in report.summary.values())


@pytest.mark.slow
def test_kl_bound_checks_the_full_variant(tmp_path):
    report = run_experiment("kl-bound", tmp_path, seeds=(1,))
    names = {check.name for check in report.checks}
    assert {"reset sawtooth", "ema smooth", "full smooth"} <= names
    assert {"reset_smoothness", "ema_smoothness", "full_smoothness"} <= set(report.summary)
