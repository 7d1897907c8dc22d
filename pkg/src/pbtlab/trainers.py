"""Trainer contract, the adaptive learning-rate rule, and a synthetic trainer.

The synthetic "landscape" trainer stands in for hours-long RL training: it
accumulates a scalar skill whose per-update gain depends on how well the
agent's tunable parameters match a slowly drifting optimum. It reproduces
the decision structure the population loop cares about (nonstationary
optimum, noisy returns, saturating success metric) in microseconds, which
makes population-vs-baseline comparisons statistically testable on a desk.
"""

from __future__ import annotations

import abc
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .hyperparams import INTEGER, POSITIVE, UNIT, HyperParams, ParamSpec
from .meta import EvalResult


class Trainer(abc.ABC):
    """Contract every trainer driven by the population loop must satisfy.

    ``restore(snapshot())`` must be an exact state round trip, and ``train``
    must be deterministic given (state, hyperparams, n_steps). The success
    tolerance is owned by the agent loop (each agent anneals its own), so it
    is pushed in via ``set_tolerance`` before training/evaluation.
    """

    @abc.abstractmethod
    def train(self, hyperparams: HyperParams, n_steps: int) -> None: ...

    @abc.abstractmethod
    def evaluate(self) -> EvalResult: ...

    @abc.abstractmethod
    def snapshot(self) -> bytes: ...

    @abc.abstractmethod
    def restore(self, blob: bytes) -> None: ...

    @abc.abstractmethod
    def set_hyperparams(self, hyperparams: HyperParams) -> None: ...

    @abc.abstractmethod
    def set_tolerance(self, epsilon: float) -> None: ...


# -- adaptive learning rate ---------------------------------------------------


@dataclass(frozen=True)
class AdaptiveLr:
    """Learning rate controlled to hold a KL divergence at a target value."""

    lr: float
    kl_target: float = 0.016
    lr_min: float = 1e-6
    lr_max: float = 1e-2


def adaptive_lr_update(state: AdaptiveLr, measured_kl: float) -> AdaptiveLr:
    """Divide the rate by 1.5 when the measured KL overshoots the target,
    multiply by 1.5 when it undershoots, leave it alone on an exact hit;
    always clamp to the configured range."""
    if not math.isfinite(measured_kl) or measured_kl < 0:
        raise ValueError(f"measured KL must be finite and >= 0, got {measured_kl}")
    if measured_kl > state.kl_target:
        lr = state.lr / 1.5
    elif measured_kl < state.kl_target:
        lr = state.lr * 1.5
    else:
        return state
    return replace(state, lr=min(max(lr, state.lr_min), state.lr_max))


# -- synthetic landscape trainer ----------------------------------------------


@dataclass(frozen=True)
class LandscapeConfig:
    """Constants of the synthetic skill landscape.

    One skill update is credited per ``steps_per_update`` environment steps.
    The optimum for ``lr_kl`` drifts as optimum_center * exp(sin(2*pi*t/T)),
    sweeping a factor of e each way over one ``drift_period``. The update
    gain is exp(-(ln lr_kl - ln optimum)^2 / match_sharpness) times a bump
    over ``epochs_like`` peaking at 1.0, plus Gaussian noise; skill never
    goes below zero. ``gamma_like`` is carried in the parameter vector to
    exercise the unit-interval mutation rule but does not move the gain.
    """

    steps_per_update: int = 200
    drift_period: float = 10000.0
    optimum_center: float = 0.016
    match_sharpness: float = 0.5
    epochs_peak: float = 4.0
    epochs_width: float = 1.2
    noise_std: float = 0.05
    max_successes: float = 50.0
    half_saturation: float = 25.0  # skill at which the success count is half max


def landscape_optimum(cfg: LandscapeConfig, step: int) -> float:
    return cfg.optimum_center * math.exp(math.sin(2.0 * math.pi * step / cfg.drift_period))


def landscape_gain(cfg: LandscapeConfig, values: dict, step: int) -> float:
    """Deterministic part of the per-update skill gain at a given step count."""
    mismatch = math.log(values["lr_kl"]) - math.log(landscape_optimum(cfg, step))
    tune = math.exp(-(mismatch * mismatch) / cfg.match_sharpness)
    e = values["epochs_like"] - cfg.epochs_peak
    bump = math.exp(-(e * e) / (2.0 * cfg.epochs_width**2))
    return tune * bump


def landscape_specs() -> list[ParamSpec]:
    """Tunable parameters the landscape trainer requires by name."""
    return [
        ParamSpec("lr_kl", POSITIVE, 0.016, (0.0016, 0.16)),
        ParamSpec("gamma_like", UNIT, 0.99, (0.8, 0.9999)),
        ParamSpec("epochs_like", INTEGER, 2, (1, 8)),
    ]


class LandscapeTrainer(Trainer):
    REQUIRED = ("lr_kl", "gamma_like", "epochs_like")
    SNAPSHOT_FORMAT = 1

    def __init__(self, seed: int, cfg: LandscapeConfig | None = None):
        self.cfg = cfg or LandscapeConfig()
        self.skill = 0.0
        self.steps = 0
        self.tolerance = 0.075
        self.rng = np.random.default_rng(seed)
        self._values: dict | None = None

    def set_hyperparams(self, hyperparams: HyperParams) -> None:
        values = hyperparams.as_dict()
        missing = [n for n in self.REQUIRED if n not in values]
        if missing:
            raise ConfigError(f"landscape trainer needs parameters {missing}")
        self._values = values

    def set_tolerance(self, epsilon: float) -> None:
        self.tolerance = float(epsilon)

    def train(self, hyperparams: HyperParams, n_steps: int) -> None:
        self.set_hyperparams(hyperparams)
        updates = max(1, int(round(n_steps / self.cfg.steps_per_update)))
        for _ in range(updates):
            gain = landscape_gain(self.cfg, self._values, self.steps)
            noise = self.rng.normal(0.0, self.cfg.noise_std)
            self.skill = max(0.0, self.skill + gain + noise)
            self.steps += self.cfg.steps_per_update

    def evaluate(self) -> EvalResult:
        n = self.cfg.max_successes * self.skill / (self.skill + self.cfg.half_saturation)
        return EvalResult(n_succ=n, epsilon=self.tolerance)

    def snapshot(self) -> bytes:
        return json.dumps(
            {
                "format": self.SNAPSHOT_FORMAT,
                "kind": "landscape",
                "skill": self.skill,
                "steps": self.steps,
                "tolerance": self.tolerance,
                "rng": self.rng.bit_generator.state,
            }
        ).encode("utf-8")

    def restore(self, blob: bytes) -> None:
        raw = json.loads(blob.decode("utf-8"))
        if raw.get("format") != self.SNAPSHOT_FORMAT or raw.get("kind") != "landscape":
            raise ConfigError("incompatible landscape snapshot")
        self.skill = float(raw["skill"])
        self.steps = int(raw["steps"])
        self.tolerance = float(raw["tolerance"])
        rng = np.random.default_rng()
        rng.bit_generator.state = raw["rng"]
        self.rng = rng
