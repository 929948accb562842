"""Seeded learning-curve experiments over Taxi.

A config names a domain and a method; ``run_experiment`` trains ``trials``
independent learners, freezes each one every ``eval_interval`` primitive
steps to score its greedy policy, and averages the scores at matched step
counts.
"""

from __future__ import annotations

import csv
import math
import random
import re
from dataclasses import dataclass, field, fields, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .chain import exact_greedy_return
from .learner import (
    DEFAULT_STEP_CAP,
    ExplorationSchedule,
    FlatQLearner,
    LearningSchedule,
    MaxqLearner,
    StepSizeRule,
)
from .oracle import flat_value_iteration
from .taxi import TaxiConfig, taxi_model, taxi_task_graph

METHODS = ("flat-q", "maxq-plain", "maxq-abstracted")
DOMAINS = ("taxi-deterministic", "taxi-noisy")
EVAL_MODES = ("exact", "sampled")
DEFAULT_NOISE = 0.2
CSV_HEADER = ("steps", "mean_return", "stderr", "trials")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    domain: str
    budget: int
    trials: int = 20
    noise: float = 0.0
    gamma: float = 1.0
    eval_interval: int = 10_000
    eval_episodes: int = 100
    eval_mode: str = "sampled"
    eval_cap: int = 1000
    alpha: StepSizeRule = StepSizeRule()
    alpha_overrides: tuple[tuple[str, StepSizeRule], ...] = ()
    temperature: float = 10.0
    cooling: float = 0.99
    min_temperature: float = 0.05
    step_cap: int = DEFAULT_STEP_CAP
    seed: int = 0
    workers: int = 1
    threshold: float = 1.0

    @property
    def schedule(self) -> LearningSchedule:
        return LearningSchedule(self.alpha, dict(self.alpha_overrides))

    @property
    def exploration(self) -> ExplorationSchedule:
        return ExplorationSchedule(self.temperature, self.cooling, self.min_temperature)

    def to_text(self) -> str:
        """The config in the file format ``parse_config`` reads."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "alpha_overrides":
                for name, rule in value:
                    lines.append(f"alpha.{name} = {_rule_text(rule)}")
                continue
            if f.name == "alpha":
                value = _rule_text(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _rule_text(rule: StepSizeRule) -> str:
    return f"{rule.kind}:{rule.value!r}"


REQUIRED_KEYS = ("method", "domain", "budget")
_INT_KEYS = {"trials": 1, "budget": 0, "eval_interval": 1, "eval_episodes": 1, "eval_cap": 1,
             "step_cap": 1, "workers": 1, "seed": 0}
_FLOAT_KEYS = ("noise", "gamma", "temperature", "cooling", "min_temperature", "threshold")
_LINE = re.compile(r"^\s*([A-Za-z_][\w.()]*)\s*=\s*(.*?)\s*$")
_NOISY = re.compile(r"^taxi-noisy\(\s*([^)]*)\s*\)$")


def _parse_rule(key: str, text: str) -> StepSizeRule:
    kind, _, value = text.partition(":")
    kind = kind.strip()
    try:
        number = float(value) if value.strip() else 1.0
        return StepSizeRule(kind, number)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}; expected harmonic:<c> or constant:<alpha>") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``domain`` accepts ``taxi-deterministic``, ``taxi-noisy`` (noise 0.2
    unless ``noise`` is given) or ``taxi-noisy(p)``. Step sizes are written
    ``harmonic:<c>`` or ``constant:<alpha>``; ``alpha.<table> = ...``
    overrides the default for one completion table, primitive, or ``Q``.
    """
    values: dict[str, str] = {}
    overrides: list[tuple[str, StepSizeRule]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        match = _LINE.match(line)
        if match is None:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = match.groups()
        if key.startswith("alpha."):
            overrides.append((key[6:], _parse_rule(key, value)))
            continue
        if key in values:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        known = {f.name for f in fields(ExperimentConfig)} - {"alpha_overrides"}
        if key not in known:
            raise ConfigError(f"line {number}: unknown key {key!r}")
        values[key] = value
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    kwargs: dict[str, object] = {}
    method = values.pop("method")
    if method not in METHODS:
        raise ConfigError(f"method: {method!r} is not one of {', '.join(METHODS)}")
    kwargs["method"] = method
    domain = values.pop("domain")
    noisy = _NOISY.match(domain)
    if noisy:
        kwargs["noise"] = _number("domain", noisy.group(1))
        domain = "taxi-noisy"
    elif domain == "taxi-noisy":
        kwargs["noise"] = DEFAULT_NOISE
    elif domain != "taxi-deterministic":
        raise ConfigError(f"domain: {domain!r} is not one of {', '.join(DOMAINS)} or taxi-noisy(p)")
    kwargs["domain"] = domain
    for key, text_value in values.items():
        if key in _INT_KEYS:
            try:
                number = int(text_value)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {text_value!r}") from None
            if number < _INT_KEYS[key]:
                raise ConfigError(f"{key}: must be at least {_INT_KEYS[key]}, got {number}")
            kwargs[key] = number
        elif key in _FLOAT_KEYS:
            kwargs[key] = _number(key, text_value)
        elif key == "alpha":
            kwargs[key] = _parse_rule(key, text_value)
        elif key == "eval_mode":
            if text_value not in EVAL_MODES:
                raise ConfigError(f"eval_mode: {text_value!r} is not one of {', '.join(EVAL_MODES)}")
            kwargs[key] = text_value
    kwargs["alpha_overrides"] = tuple(overrides)
    if domain == "taxi-deterministic" and kwargs.get("noise", 0.0) != 0.0:
        raise ConfigError("noise: must be 0 for taxi-deterministic")
    config = ExperimentConfig(**kwargs)
    _check_ranges(config)
    return config


def _number(key: str, text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite")
    return value


def _check_ranges(c: ExperimentConfig) -> None:
    if not 0.0 < c.gamma <= 1.0:
        raise ConfigError(f"gamma: must lie in (0, 1], got {c.gamma}")
    if not 0.0 <= c.noise <= 1.0:
        raise ConfigError(f"noise: must lie in [0, 1], got {c.noise}")
    if not c.temperature > 0:
        raise ConfigError(f"temperature: must be positive, got {c.temperature}")
    if not c.min_temperature > 0:
        raise ConfigError(f"min_temperature: must be positive, got {c.min_temperature}")
    if not 0.0 < c.cooling <= 1.0:
        raise ConfigError(f"cooling: must lie in (0, 1], got {c.cooling}")
    if c.threshold < 0:
        raise ConfigError(f"threshold: must be non-negative, got {c.threshold}")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text)


# -- curves and CSV ----------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    steps: int
    mean_return: float
    stderr: float
    trials: int


@dataclass
class LearningCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self) -> None:
        steps = [p.steps for p in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("curve steps must be strictly increasing")
        if not all(math.isfinite(p.mean_return) for p in self.points):
            raise ValueError("curve means must be finite")


def aggregate(trial_points: list[list[tuple[int, float]]]) -> LearningCurve:
    """Mean and standard error across trials at each matched step count.

    The result does not depend on the order of the trials beyond float
    summation, which is done in a fixed sorted order.
    """
    by_step: dict[int, list[float]] = {}
    for points in trial_points:
        for steps, value in points:
            by_step.setdefault(steps, []).append(value)
    out = []
    for steps in sorted(by_step):
        values = np.sort(np.array(by_step[steps]))
        n = len(values)
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append(CurvePoint(steps, mean, se, n))
    return LearningCurve(out)


def write_csv(curve: LearningCurve, path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for p in curve.points:
                writer.writerow((p.steps, repr(p.mean_return), repr(p.stderr), p.trials))
    except OSError as err:
        raise OSError(err.errno, f"cannot write {path}: {err.strerror}") from None


def read_csv(path: str | Path) -> LearningCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return LearningCurve([CurvePoint(int(a), float(b), float(c), int(d)) for a, b, c, d in reader])


# -- running -----------------------------------------------------------------


def build_model(config: ExperimentConfig):
    return taxi_model(TaxiConfig(config.noise))


def build_learner(config: ExperimentConfig, model, seed: int):
    rng = random.Random(seed)
    if config.method == "flat-q":
        return FlatQLearner(model, config.schedule, config.exploration, config.gamma, rng, config.step_cap)
    graph = taxi_task_graph()
    if config.method == "maxq-plain":
        graph = graph.plain()
    return MaxqLearner(model, graph, config.schedule, config.exploration, config.gamma, rng, config.step_cap)


def trial_seeds(master: int, trials: int) -> list[tuple[int, int]]:
    """(learner seed, evaluation seed) per trial, independent of trial order."""
    out = []
    for child in np.random.SeedSequence(master).spawn(trials):
        a, b = child.generate_state(2)
        out.append((int(a), int(b)))
    return out


@dataclass
class TrialResult:
    index: int
    points: list[tuple[int, float]]
    snapshot: str
    episodes: int
    truncations: int


def evaluate(learner, config: ExperimentConfig, rng: random.Random) -> float:
    """Mean undiscounted greedy return; never touches the learner's tables."""
    if config.eval_mode == "exact":
        return exact_greedy_return(learner, config.eval_cap)
    starts = learner.tabular.starts
    total = 0.0
    for _ in range(config.eval_episodes):
        s = starts[rng.randrange(len(starts))]
        total += learner.greedy_return(s, config.eval_cap, rng)
    return total / config.eval_episodes


def run_trial(config: ExperimentConfig, index: int) -> TrialResult:
    learner_seed, eval_seed = trial_seeds(config.seed, config.trials)[index]
    model = build_model(config)
    learner = build_learner(config, model, learner_seed)
    eval_rng = random.Random(eval_seed)
    points: list[tuple[int, float]] = []

    def checkpoint(steps: int) -> None:
        points.append((steps, evaluate(learner, config, eval_rng)))

    try:
        if config.budget == 0:
            checkpoint(0)
        else:
            learner.train(config.budget, config.eval_interval, checkpoint)
    except Exception as err:
        raise RuntimeError(f"trial {index} (learner seed {learner_seed}) failed: {err}") from err
    return TrialResult(index, points, learner.snapshot(), learner.episodes, learner.truncations)


def _run_trial_args(args: tuple[ExperimentConfig, int]) -> TrialResult:
    return run_trial(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curve: LearningCurve
    trials: list[TrialResult]
    optimum: float

    def steps_to_threshold(self) -> list[int | None]:
        return [steps_to_threshold(t.points, self.optimum - self.config.threshold) for t in self.trials]

    def summary(self) -> dict[str, object]:
        reached = self.steps_to_threshold()
        hit = [s for s in reached if s is not None]
        out: dict[str, object] = {
            "method": self.config.method,
            "domain": self.config.domain,
            "noise": self.config.noise,
            "trials": len(self.trials),
            "oracle_mean_return": self.optimum,
            "final_mean_return": self.curve.points[-1].mean_return if self.curve.points else float("nan"),
            "final_stderr": self.curve.points[-1].stderr if self.curve.points else float("nan"),
            "threshold": self.config.threshold,
            "trials_reaching_threshold": len(hit),
        }
        censored = [s if s is not None else self.config.budget for s in reached]
        if censored:
            mean = float(np.mean(censored))
            se = float(np.std(censored, ddof=1) / math.sqrt(len(censored))) if len(censored) > 1 else 0.0
            out["steps_to_threshold_mean"] = mean
            out["steps_to_threshold_stderr"] = se
        out["episodes_mean"] = float(np.mean([t.episodes for t in self.trials]))
        out["truncated_episodes"] = sum(t.truncations for t in self.trials)
        return out


def steps_to_threshold(points: list[tuple[int, float]], level: float) -> int | None:
    """First evaluated step count from which every later score is at least ``level``."""
    answer = None
    for steps, value in points:
        if value >= level:
            if answer is None:
                answer = steps
        else:
            answer = None
    return answer


def oracle_mean_return(config: ExperimentConfig) -> float:
    """Optimal expected undiscounted return from a uniformly random start."""
    model = build_model(config)
    return flat_value_iteration(model, 1.0).mean_start_value(model)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    jobs = [(config, i) for i in range(config.trials)]
    if config.workers > 1 and config.trials > 1:
        with get_context("fork").Pool(min(config.workers, config.trials)) as pool:
            results = pool.map(_run_trial_args, jobs)
    else:
        results = [run_trial(config, i) for i in range(config.trials)]
    results.sort(key=lambda r: r.index)
    curve = aggregate([r.points for r in results])
    return ExperimentResult(config, curve, results, oracle_mean_return(config))


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config, seed=seed)
