"""Training-dynamics experiments on the toy system, with their built-in checks."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any

import attrs
import numpy as np
from scipy.stats import spearmanr

from .config import CosineRewardParams, EpisodeConfig, RewardWeights, TrainerConfig
from .const import (
    GRADIENT_AUDIT_STEP,
    HINT_NONE,
    KL_DROP_FLOOR,
    LAB_EXPERIMENTS,
    RESTORING_FORCE_MIN_SPEARMAN,
    RESTORING_FORCE_VARIANT,
    SAWTOOTH_MAX_RATIO,
    SMOOTH_MAX_DROP,
    TRAILING_WINDOW_FRACTION,
    VARIANTS,
)
from .coordinator import RolloutCoordinator
from .exceptions import ContractViolationError, UsageError
from .metrics import MetricsRow, trailing_mean
from .micro_clinic import micro_clinic_suite
from .policy import (
    HINTS,
    LAST_TOOLS,
    VOCABULARY,
    GradientItem,
    PolicyContext,
    ToySoftmaxPolicy,
    analytic_gradient,
    prior_parameters,
)
from .rewards import cosine_reward
from .tasks import OPTION_LETTERS
from .trainer import PrivilegedContext, Trainer, TrainingSample, total_loss, turn_level_kl
from .utils import derive_seed, format_float

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

_LOGGER = logging.getLogger(__name__)

SNR_EPISODES = 64  # prior-policy rollouts sampled for the SNR experiment
AUDIT_TRIALS = 100
AUDIT_DIRECTIONS = 4  # random directions checked per trial
AUDIT_SCALE_FLOOR = 1e-3  # directional derivatives smaller than this are compared in absolute terms
LOGPROB_AUDIT_TOLERANCE = 1e-6
OBJECTIVE_AUDIT_TOLERANCE = 1e-5
COSINE_ENDPOINTS = {"correct_at_0": 1.1, "correct_at_max": 0.7, "wrong_at_max": -0.7, "truncated": -0.5}
SYNTHETIC_SNR = {"sigma_acc": 0.41, "sigma_fmt": 0.02, "ratio": 51.25}


# Signal-to-noise of the weighted reward


@attrs.frozen
class ComponentSnr:
    """Spread of one reward component and its share of the total."""

    weight: float
    sigma: float
    weighted_sigma: float
    snr: float


@attrs.frozen
class SnrReport:
    """Per-component SNR_j = w_j σ_j / σ_R and pairwise ratios of w_j σ_j."""

    components: dict[str, ComponentSnr]
    sigma_total: float
    ratios: dict[str, float]

    def ratio(self, first: str, second: str) -> float:
        """Return w_a σ_a / w_b σ_b."""
        return self.ratios[f"{first}/{second}"]

    @property
    def accuracy_share_reduction(self) -> float:
        """Return how much the weighted reward shrinks the accuracy share of the signal against accuracy alone."""
        accuracy = self.components.get("r_acc")
        if accuracy is None or self.sigma_total == 0:
            return 0.0
        return 1.0 - accuracy.snr


def snr_report(samples: Mapping[str, Sequence[float]], weights: Mapping[str, float]) -> SnrReport:
    """
    Measure each component's spread and its weighted share of the total.

    Args:
        samples: Aligned per-episode values per component, at least 2 each
        weights: Weight per component name

    Returns:
        The report; σ are population standard deviations

    """
    names = list(samples)
    arrays = {name: np.asarray(samples[name], dtype=np.float64) for name in names}
    bad = sorted(name for name, values in arrays.items() if not np.isfinite(values).all())
    if bad:
        msg = f"snr_report needs finite samples, got non-finite values for {bad}"
        raise ContractViolationError(msg)
    lengths = {len(values) for values in arrays.values()}
    if len(lengths) != 1 or min(lengths) < 2:  # noqa: PLR2004
        msg = f"snr_report needs aligned samples of at least 2 values, got lengths {sorted(lengths)}"
        raise ContractViolationError(msg)
    total = sum(weights[name] * arrays[name] for name in names)
    sigma_total = float(np.std(total))
    components = {}
    for name in names:
        sigma = float(np.std(arrays[name]))
        weighted = weights[name] * sigma
        components[name] = ComponentSnr(weights[name], sigma, weighted, weighted / sigma_total if sigma_total else 0.0)
    ratios = {
        f"{a}/{b}": components[a].weighted_sigma / components[b].weighted_sigma
        for a, b in itertools.permutations(names, 2)
        if components[b].weighted_sigma > 0
    }
    return SnrReport(components, sigma_total, ratios)


# KL bounds


@attrs.frozen
class KlBoundParams:
    """Smoothness estimate L̂, step bound ε, EMA decay α and copy interval T_copy."""

    smoothness: float
    step_bound: float
    alpha: float
    copy_interval: int

    def __attrs_post_init__(self) -> None:
        """All positive, α in (0, 1)."""
        if self.smoothness <= 0 or self.step_bound <= 0 or self.copy_interval <= 0:
            msg = f"KL bound parameters must be positive: {self}"
            raise ContractViolationError(msg)
        if not 0.0 < self.alpha < 1.0:
            msg = f"alpha must lie in (0, 1), got {self.alpha}"
            raise ContractViolationError(msg)


def kl_bound(params: KlBoundParams) -> tuple[float, float]:
    """Return the EMA steady-state bound L̂ε²/(2(1−α)²) and the hard-copy peak (L̂/2)T²ε²."""
    steady = params.smoothness * params.step_bound**2 / (2.0 * (1.0 - params.alpha) ** 2)
    peak = params.smoothness / 2.0 * params.copy_interval**2 * params.step_bound**2
    return steady, peak


def estimate_smoothness(
    gradient: Callable[[np.ndarray], np.ndarray], pairs: Iterable[tuple[np.ndarray, np.ndarray]]
) -> float:
    """Return max ‖∇f(θ) − ∇f(θ′)‖ / ‖θ − θ′‖ over parameter pairs, skipping coincident ones."""
    best = 0.0
    for first, second in pairs:
        distance = float(np.linalg.norm(first - second))
        if distance < 1e-12:  # noqa: PLR2004
            continue
        best = max(best, float(np.linalg.norm(gradient(first) - gradient(second))) / distance)
    return best


def reference_kl_gradient(trainer: Trainer, teacher_theta: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Return θ_S ↦ gradient of the mean reference KL against a fixed teacher."""
    teacher = ToySoftmaxPolicy(teacher_theta, include_hint=True)
    batch = trainer.reference_batch()
    limit = trainer.config.max_response_tokens

    def gradient(theta: np.ndarray) -> np.ndarray:
        student = ToySoftmaxPolicy(theta)
        total = np.zeros_like(theta)
        for sample in batch:
            total += turn_level_kl(student, teacher, sample, limit).gradient
        return total / len(batch)

    return gradient


# Finite differences


def finite_diff_audit(
    make_objective: Callable[[np.random.Generator], tuple[np.ndarray, Objective]],
    trials: int = AUDIT_TRIALS,
    seed: int = 0,
    step: float = GRADIENT_AUDIT_STEP,
) -> float:
    """
    Compare analytic gradients with central differences on random instances.

    make_objective draws a point and an objective returning (value,
    gradient). Each trial checks a few random unit directions; the error of a
    direction is |fd − g·d| / max(|fd|, |g·d|, 1e-3).

    Returns:
        The worst relative error

    """
    if trials < 1:
        msg = f"trials must be at least 1, got {trials}"
        raise ContractViolationError(msg)
    rng = derive_seed(seed)
    worst = 0.0
    for _ in range(trials):
        theta, objective = make_objective(rng)
        _, gradient = objective(theta)
        for _ in range(AUDIT_DIRECTIONS):
            direction = rng.standard_normal(theta.shape)
            direction /= np.linalg.norm(direction)
            upper, _ = objective(theta + step * direction)
            lower, _ = objective(theta - step * direction)
            numeric = (upper - lower) / (2.0 * step)
            analytic = float(np.sum(gradient * direction))
            scale = max(abs(numeric), abs(analytic), AUDIT_SCALE_FLOOR)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def random_context(rng: np.random.Generator, hint: str | None = None) -> PolicyContext:
    """Draw a policy context."""
    evidence = rng.integers(len(OPTION_LETTERS) + 1)
    cue = rng.integers(len(OPTION_LETTERS) + 1)
    return PolicyContext(
        turn=int(rng.integers(6)),
        last_tool=LAST_TOOLS[int(rng.integers(len(LAST_TOOLS)))],
        evidence=None if evidence == 0 else OPTION_LETTERS[evidence - 1],
        cue=None if cue == 0 else OPTION_LETTERS[cue - 1],
        ticket_bucket=int(rng.integers(4)),
        hint=hint or HINT_NONE,
    )


def random_sample(rng: np.random.Generator, student: ToySoftmaxPolicy) -> TrainingSample:
    """Draw a hinted training sample whose old logprobs come from the student."""
    turns = int(rng.integers(1, 4))
    hint = HINTS[int(rng.integers(len(HINTS)))]
    contexts = [random_context(rng) for _ in range(turns)]
    tokens = [tuple(int(t) for t in rng.integers(VOCABULARY.size, size=int(rng.integers(1, 7)))) for _ in contexts]
    old = [student.logprob_of(context, ids) for context, ids in zip(contexts, tokens, strict=True)]
    hint_tokens = tuple(int(t) for t in rng.choice(VOCABULARY.word_ids, size=int(rng.integers(1, 5))))
    teacher = PrivilegedContext([c.with_hint(hint) for c in contexts], hint_tokens)
    return TrainingSample(contexts, tokens, old, float(rng.standard_normal()), teacher)


def logprob_objective(rng: np.random.Generator) -> tuple[np.ndarray, Objective]:
    """Draw Σ c·logπ over a random batch."""
    theta = prior_parameters() + 0.5 * rng.standard_normal(prior_parameters().shape)
    items = []
    for _ in range(int(rng.integers(1, 4))):
        ids = tuple(int(t) for t in rng.integers(VOCABULARY.size, size=int(rng.integers(1, 7))))
        items.append(GradientItem(random_context(rng), ids, rng.standard_normal(len(ids))))

    def objective(point: np.ndarray) -> tuple[float, np.ndarray]:
        policy = ToySoftmaxPolicy(point)
        value = math.fsum(float(np.dot(i.coefficients, policy.logprob_of(i.context, i.token_ids))) for i in items)
        return value, analytic_gradient(policy, items)

    return theta, objective


def combined_objective(rng: np.random.Generator) -> tuple[np.ndarray, Objective]:
    """Draw the full GRPO + λ·KL objective on a random hinted batch."""
    student_theta = prior_parameters() + 0.5 * rng.standard_normal(prior_parameters().shape)
    teacher = ToySoftmaxPolicy(student_theta + 0.3 * rng.standard_normal(student_theta.shape), include_hint=True)
    student = ToySoftmaxPolicy(student_theta)
    batch = [random_sample(rng, student) for _ in range(int(rng.integers(1, 3)))]
    config = TrainerConfig(variant="full")

    def objective(point: np.ndarray) -> tuple[float, np.ndarray]:
        result = total_loss(ToySoftmaxPolicy(point), teacher, batch, config)
        return result.loss, result.gradient

    return student_theta, objective


# Experiments


@attrs.frozen
class LabCheck:
    """A pass/fail assertion of an experiment."""

    name: str
    passed: bool
    detail: str = ""


@attrs.frozen
class SeedResult:
    """CSV rows, scalar summary and checks of one seed."""

    seed: int
    rows: list[dict[str, Any]]
    summary: dict[str, float]
    checks: tuple[LabCheck, ...] = ()


@attrs.frozen
class LabReport:
    """Outcome of an experiment over all seeds."""

    experiment: str
    results: tuple[SeedResult, ...]
    summary: dict[str, float]
    checks: tuple[LabCheck, ...]

    @property
    def passed(self) -> bool:
        """Return True when every check passed."""
        return all(check.passed for check in self.checks)


def _row_dict(row: MetricsRow, **extra: Any) -> dict[str, Any]:
    return {**extra, **attrs.asdict(row)}


def _cosine_sweep(seed: int, config: TrainerConfig) -> SeedResult:
    params = CosineRewardParams(max_tokens=config.max_response_tokens)
    rows = [
        {
            "length": length,
            "correct": cosine_reward(True, False, length, params),  # noqa: FBT003
            "wrong": cosine_reward(False, False, length, params),  # noqa: FBT003
            "truncated": cosine_reward(False, True, length, params),  # noqa: FBT003
        }
        for length in range(params.max_tokens + 1)
    ]
    measured = {
        "correct_at_0": rows[0]["correct"],
        "correct_at_max": rows[-1]["correct"],
        "wrong_at_max": rows[-1]["wrong"],
        "truncated": rows[0]["truncated"],
    }
    checks = tuple(
        LabCheck(f"cosine {name}", math.isclose(measured[name], value, abs_tol=1e-12), f"{measured[name]!r}")
        for name, value in COSINE_ENDPOINTS.items()
    )
    return SeedResult(seed, rows, measured, checks)


def _snr(seed: int, config: TrainerConfig) -> SeedResult:
    weights = attrs.asdict(RewardWeights())
    component_weights = {f"r_{name[2:]}": value for name, value in weights.items()}
    tasks = micro_clinic_suite(seed, SNR_EPISODES, cue_reliability=config.cue_reliability)
    coordinator = RolloutCoordinator(ToySoftmaxPolicy(), seed, EpisodeConfig(max_turns=config.max_turns))
    collected: dict[str, list[float | None]] = {name: [] for name in component_weights}
    for index, item in enumerate(tasks):
        components = coordinator.rollout(item.task, index).reward.components
        for name in collected:
            collected[name].append(getattr(components, name))
    # a component that does not apply to every episode has no aligned spread
    samples = {name: [v for v in values if v is not None] for name, values in collected.items() if None not in values}
    if skipped := sorted(set(collected) - set(samples)):
        _LOGGER.debug("SNR skips components that do not always apply: %s", skipped)
    report = snr_report(samples, {name: component_weights[name] for name in samples})
    rows = [
        {"component": name, **attrs.asdict(component)} for name, component in report.components.items()
    ]

    sigma_acc, sigma_fmt = SYNTHETIC_SNR["sigma_acc"], SYNTHETIC_SNR["sigma_fmt"]
    synthetic = snr_report(
        {"r_acc": [0.5 - sigma_acc, 0.5 + sigma_acc], "r_fmt": [0.5 + sigma_fmt, 0.5 - sigma_fmt]},
        {"r_acc": component_weights["r_acc"], "r_fmt": component_weights["r_fmt"]},
    )
    ratio = synthetic.ratio("r_acc", "r_fmt")
    summary = {
        "sigma_total": report.sigma_total,
        "accuracy_share_reduction": report.accuracy_share_reduction,
        "synthetic_ratio": ratio,
    }
    passed = abs(ratio - SYNTHETIC_SNR["ratio"]) < 1e-9  # noqa: PLR2004
    checks = (LabCheck("synthetic acc/fmt ratio", passed, f"{ratio!r}"),)
    return SeedResult(seed, rows, summary, checks)


def _teacher_drops(rows: Sequence[MetricsRow], steps: Iterable[int]) -> list[float]:
    by_step = {row.step: row for row in rows}
    ratios = []
    for step in steps:
        row = by_step.get(step)
        if row is not None and row.reference_kl_pre > KL_DROP_FLOOR:
            ratios.append(row.reference_kl / row.reference_kl_pre)
    return ratios


def _kl_bound(seed: int, config: TrainerConfig) -> SeedResult:
    rows: list[dict[str, Any]] = []
    summary: dict[str, float] = {}
    checks = []
    for variant in ("reset", "ema", "full"):
        variant_config = attrs.evolve(config, variant=variant)
        trainer = Trainer(variant_config, seed)
        metrics = []
        smoothness = 0.0
        for _ in range(variant_config.steps):
            row = trainer.train_step()
            metrics.append(row)
            teacher_theta = trainer.teacher.theta.copy()
            gradient = reference_kl_gradient(trainer, teacher_theta)
            smoothness = max(smoothness, estimate_smoothness(gradient, [(trainer.student.theta.copy(), teacher_theta)]))
            rows.append(_row_dict(row, variant=variant))

        updates = [row.update_norm for row in metrics]
        if variant == "reset":
            interval = variant_config.hard_copy_interval
            copy_steps = range(interval, variant_config.steps + 1, interval)
            drops = _teacher_drops(metrics, copy_steps)
            checks.append(
                LabCheck("reset sawtooth", all(r < SAWTOOTH_MAX_RATIO for r in drops), f"post/pre ratios {drops}")
            )
            step_bound = max(updates)
            if smoothness > 0 and step_bound > 0:
                params = KlBoundParams(smoothness, step_bound, variant_config.ema_decay, interval)
                peak = kl_bound(params)[1]
                measured = max(row.reference_kl_pre for row in metrics)
                summary["reset_peak_bound"] = peak
                summary["reset_peak_measured"] = measured
                checks.append(LabCheck("reset peak below bound", measured <= peak, f"{measured!r} <= {peak!r}"))
        elif variant == "full":
            # the hinted teacher stays apart from the student right after a copy
            drops = _teacher_drops(metrics, range(1, variant_config.steps + 1))
            checks.append(
                LabCheck(
                    "full smooth",
                    all(r >= 1.0 - SMOOTH_MAX_DROP for r in drops),
                    f"min ratio {min(drops, default=1.0)!r}",
                )
            )
            step_bound = max(updates, default=0.0)
        else:
            interval = variant_config.ema_interval
            ema_steps = range(interval, variant_config.steps + 1, interval)
            drops = _teacher_drops(metrics, ema_steps)
            checks.append(
                LabCheck(
                    "ema smooth",
                    all(r >= 1.0 - SMOOTH_MAX_DROP for r in drops),
                    f"min ratio {min(drops, default=1.0)!r}",
                )
            )
            # one EMA event per interval, so ε is the displacement between events
            step_bound = max((sum(updates[i : i + interval]) for i in range(0, len(updates), interval)), default=0.0)
            if smoothness > 0 and step_bound > 0:
                params = KlBoundParams(
                    smoothness, step_bound, variant_config.ema_decay, variant_config.hard_copy_interval
                )
                steady = kl_bound(params)[0]
                measured = max(row.reference_kl for row in metrics)
                summary["ema_steady_bound"] = steady
                summary["ema_measured_max"] = measured
                checks.append(
                    LabCheck("ema below steady-state bound", measured <= steady, f"{measured!r} <= {steady!r}")
                )
        summary[f"{variant}_smoothness"] = smoothness
        summary[f"{variant}_step_bound"] = step_bound
    return SeedResult(seed, rows, summary, tuple(checks))


def _ablation(seed: int, config: TrainerConfig) -> SeedResult:
    rows: list[dict[str, Any]] = []
    summary: dict[str, float] = {}
    for variant in VARIANTS:
        metrics = Trainer(attrs.evolve(config, variant=variant), seed).run()
        rows.extend(_row_dict(row, variant=variant) for row in metrics)
        for column in ("validation_accuracy", "mean_turns", "mean_response_tokens", "reference_kl"):
            series = [getattr(row, column) for row in metrics]
            summary[f"{variant}.{column}"] = trailing_mean(series, TRAILING_WINDOW_FRACTION)
    return SeedResult(seed, rows, summary)


def _ablation_checks(summary: Mapping[str, float]) -> tuple[LabCheck, ...]:
    accuracy = {variant: summary[f"{variant}.validation_accuracy"] for variant in VARIANTS}
    checks = [
        LabCheck(
            f"accuracy full >= {variant}",
            accuracy["full"] >= accuracy[variant],
            f"{accuracy['full']!r} vs {accuracy[variant]!r}",
        )
        for variant in VARIANTS
        if variant != "full"
    ]
    turns_full, turns_reset = summary["full.mean_turns"], summary["reset.mean_turns"]
    checks.append(LabCheck("turns full > reset", turns_full > turns_reset, f"{turns_full!r} vs {turns_reset!r}"))
    tokens_hints, tokens_full = summary["ema_hints.mean_response_tokens"], summary["full.mean_response_tokens"]
    checks.append(
        LabCheck("tokens ema_hints > full", tokens_hints > tokens_full, f"{tokens_hints!r} vs {tokens_full!r}")
    )
    return tuple(checks)


def _restoring_force(seed: int, config: TrainerConfig) -> SeedResult:
    metrics = Trainer(attrs.evolve(config, variant=RESTORING_FORCE_VARIANT), seed).run()
    distances = [row.teacher_distance for row in metrics]
    gradients = [row.kl_grad_norm for row in metrics]
    rho = float(spearmanr(distances, gradients).statistic) if len(metrics) > 2 else float("nan")  # noqa: PLR2004
    rows = [_row_dict(row, variant=RESTORING_FORCE_VARIANT) for row in metrics]
    passed = math.isfinite(rho) and rho > RESTORING_FORCE_MIN_SPEARMAN
    return SeedResult(seed, rows, {"spearman": rho}, (LabCheck("restoring force", passed, f"spearman {rho!r}"),))


def _gradient_audit(seed: int, config: TrainerConfig) -> SeedResult:  # noqa: ARG001
    logprob_error = finite_diff_audit(logprob_objective, AUDIT_TRIALS, seed)
    objective_error = finite_diff_audit(combined_objective, AUDIT_TRIALS, seed + 1)
    rows = [
        {"objective": "logprob", "max_relative_error": logprob_error},
        {"objective": "combined", "max_relative_error": objective_error},
    ]
    checks = (
        LabCheck("logprob gradient", logprob_error < LOGPROB_AUDIT_TOLERANCE, f"{logprob_error!r}"),
        LabCheck("combined gradient", objective_error < OBJECTIVE_AUDIT_TOLERANCE, f"{objective_error!r}"),
    )
    return SeedResult(seed, rows, {"logprob": logprob_error, "combined": objective_error}, checks)


_EXPERIMENTS: dict[str, Callable[[int, TrainerConfig], SeedResult]] = {
    "cosine-sweep": _cosine_sweep,
    "snr": _snr,
    "kl-bound": _kl_bound,
    "ablation-suite": _ablation,
    "restoring-force": _restoring_force,
    "gradient-audit": _gradient_audit,
}


def run_seed(experiment: str, seed: int, config: TrainerConfig) -> SeedResult:
    """Run one seed of an experiment."""
    _LOGGER.debug("Running %s for seed %s", experiment, seed)
    return _EXPERIMENTS[experiment](seed, config)


def _write_rows(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    columns: list[str] = []
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column, "")) for column in columns])


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def run_experiment(
    experiment: str,
    out_dir: str | Path,
    seeds: Sequence[int] = (0,),
    config: TrainerConfig | None = None,
    workers: int = 1,
) -> LabReport:
    """
    Run an experiment over seeds and write its CSV artifacts.

    Writes <out_dir>/<experiment>/<seed>.csv per seed and a summary.csv of
    seed values, seed means and check outcomes.

    Raises:
        UsageError: on an unknown experiment or an empty seed list

    """
    if experiment not in _EXPERIMENTS:
        msg = f"Unknown experiment {experiment!r}, expected one of {LAB_EXPERIMENTS}"
        raise UsageError(msg)
    if not seeds:
        msg = "At least one seed is needed"
        raise UsageError(msg)
    config = config or TrainerConfig()
    _LOGGER.info("Running experiment %s over %s seeds", experiment, len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, [experiment] * len(seeds), seeds, [config] * len(seeds)))
    else:
        results = [run_seed(experiment, seed, config) for seed in seeds]

    keys = sorted({key for result in results for key in result.summary})
    summary = {
        key: math.fsum(r.summary[key] for r in results if key in r.summary)
        / sum(1 for r in results if key in r.summary)
        for key in keys
    }
    checks = [check for result in results for check in result.checks]
    if experiment == "ablation-suite":
        checks.extend(_ablation_checks(summary))

    target = Path(out_dir) / experiment
    target.mkdir(parents=True, exist_ok=True)
    for result in results:
        _write_rows(target / f"{result.seed}.csv", result.rows)
    summary_rows: list[dict[str, Any]] = [
        {"scope": str(result.seed), "name": key, "value": value}
        for result in results
        for key, value in sorted(result.summary.items())
    ]
    summary_rows.extend({"scope": "mean", "name": key, "value": value} for key, value in summary.items())
    summary_rows.extend({"scope": "check", "name": check.name, "value": check.passed} for check in checks)
    _write_rows(target / "summary.csv", summary_rows)

    report = LabReport(experiment, tuple(results), summary, tuple(checks))
    for check in checks:
        if not check.passed:
            _LOGGER.warning("Check %r of %s failed: %s", check.name, experiment, check.detail)
    return report
