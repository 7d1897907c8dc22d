"""Mutable hyperparameter vectors and the population mutation rules.

Three parameter kinds are supported, each with its own perturbation rule:

* ``positive-continuous`` values are multiplied or divided (50/50) by a
  uniform factor from ``[scale_min, scale_max]``.
* ``unit-interval`` values (discount-factor style, living in (0, 1)) apply
  the same multiplicative rule to the complement ``1 - v`` so the value can
  approach but never cross 1.
* ``integer-range`` values move by +/-1.

Every rule clamps to the parameter's hard bounds afterwards, so mutation is
closed over the configured box. All randomness comes from a caller-supplied
``random.Random`` so results are reproducible per seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .errors import ConfigError

POSITIVE = "positive-continuous"
UNIT = "unit-interval"
INTEGER = "integer-range"

_KINDS = (POSITIVE, UNIT, INTEGER)

# Initial-value jitter applied when sampling a fresh population member.
DEFAULT_JITTER = (1.0 / 1.3, 1.3)


@dataclass(frozen=True)
class ParamSpec:
    """Definition of one tunable parameter: kind, starting value, hard bounds."""

    name: str
    kind: str
    initial: float
    bounds: tuple[float, float]
    mutable: bool = True

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"{self.name}: unknown parameter kind {self.kind!r}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ConfigError(f"{self.name}: bounds must satisfy lo < hi, got {self.bounds}")
        if not lo <= self.initial <= hi:
            raise ConfigError(f"{self.name}: initial {self.initial} outside bounds {self.bounds}")
        if self.kind == UNIT and not (0.0 < lo and hi < 1.0):
            raise ConfigError(f"{self.name}: unit-interval bounds must lie inside (0, 1)")
        if self.kind == INTEGER and (lo != int(lo) or hi != int(hi)):
            raise ConfigError(f"{self.name}: integer-range bounds must be integers")

    def clamp(self, value: float) -> float:
        lo, hi = self.bounds
        if self.kind == INTEGER:
            return int(min(max(round(value), lo), hi))
        return min(max(value, lo), hi)


@dataclass
class HyperParams:
    """An ordered name -> value map aligned with a ParamSpec list."""

    specs: list[ParamSpec]
    values: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_initial(cls, specs: list[ParamSpec]) -> "HyperParams":
        return cls(specs, {s.name: s.initial for s in specs})

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def as_dict(self) -> dict[str, float]:
        """Plain dict snapshot in spec order, suitable for serialization."""
        return {s.name: self.values[s.name] for s in self.specs}

    def with_values(self, values: dict[str, float]) -> "HyperParams":
        missing = [s.name for s in self.specs if s.name not in values]
        if missing:
            raise ConfigError(f"hyperparameter values missing names: {missing}")
        return HyperParams(self.specs, {s.name: values[s.name] for s in self.specs})


@dataclass(frozen=True)
class MutationConfig:
    """Per-parameter mutation probability and multiplicative perturbation range."""

    prob: float = 0.2
    scale_min: float = 1.1
    scale_max: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"mutation prob must be in [0, 1], got {self.prob}")
        if not 1.0 < self.scale_min <= self.scale_max:
            raise ConfigError(
                f"perturbation range must satisfy 1 < min <= max, got "
                f"({self.scale_min}, {self.scale_max})"
            )


def mutate(p: HyperParams, cfg: MutationConfig, rng: random.Random) -> HyperParams:
    """Independently perturb each mutable parameter with probability cfg.prob.

    Draw order per selected parameter is fixed (selection coin, scale factor,
    direction coin) so a given seed always yields the same output.
    """
    out = {}
    for spec in p.specs:
        v = p.values[spec.name]
        if not spec.mutable or rng.random() >= cfg.prob:
            out[spec.name] = v
            continue
        if spec.kind == INTEGER:
            step = 1 if rng.random() < 0.5 else -1
            out[spec.name] = spec.clamp(v + step)
            continue
        mu = rng.uniform(cfg.scale_min, cfg.scale_max)
        up = rng.random() < 0.5
        if spec.kind == POSITIVE:
            out[spec.name] = spec.clamp(v * mu if up else v / mu)
        else:  # UNIT: perturb the headroom below 1 so the value stays in (0, 1)
            q = 1.0 - v
            q = q * mu if up else q / mu
            out[spec.name] = spec.clamp(1.0 - q)
    return HyperParams(p.specs, out)


def sample_initial(
    specs: list[ParamSpec],
    rng: random.Random,
    jitter: tuple[float, float] = DEFAULT_JITTER,
) -> HyperParams:
    """Draw a starting vector: each mutable parameter jittered around its initial.

    The jitter factor is uniform on ``jitter`` and applied with the same
    kind-aware transform as mutation (unit-interval parameters jitter their
    complement), then clamped. Immutable parameters keep their exact initials,
    and ``jitter=(1, 1)`` reproduces the initial column exactly.
    """
    out = {}
    for spec in specs:
        if not spec.mutable:
            out[spec.name] = spec.initial
            continue
        f = rng.uniform(jitter[0], jitter[1])
        if spec.kind == UNIT:
            out[spec.name] = spec.clamp(1.0 - (1.0 - spec.initial) * f)
        else:
            out[spec.name] = spec.clamp(spec.initial * f)
    return HyperParams(list(specs), out)


def validate(p: HyperParams, specs: list[ParamSpec] | None = None) -> list[str]:
    """Return one message per violated constraint; empty list means valid."""
    specs = p.specs if specs is None else specs
    problems = []
    for spec in specs:
        if spec.name not in p.values:
            problems.append(f"{spec.name}: missing")
            continue
        v = p.values[spec.name]
        lo, hi = spec.bounds
        if not lo <= v <= hi:
            problems.append(f"{spec.name}: value {v} outside bounds [{lo}, {hi}]")
        if spec.kind == INTEGER and v != int(v):
            problems.append(f"{spec.name}: value {v} not an integer")
    known = {s.name for s in specs}
    problems.extend(f"{name}: not in spec list" for name in p.values if name not in known)
    return problems


def save_param_specs(specs: list[ParamSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(
                json.dumps(
                    {
                        "name": s.name,
                        "kind": s.kind,
                        "initial": s.initial,
                        "bounds": list(s.bounds),
                        "mutable": s.mutable,
                    }
                )
                + "\n"
            )


def load_param_specs(path) -> list[ParamSpec]:
    specs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            specs.append(
                ParamSpec(
                    name=raw["name"],
                    kind=raw["kind"],
                    initial=raw["initial"],
                    bounds=tuple(raw["bounds"]),
                    mutable=raw.get("mutable", True),
                )
            )
    return specs


def default_rl_specs() -> list[ParamSpec]:
    """The stock RL-style parameter table used by tests and the report tooling.

    Positive parameters default to a decade of headroom either side of the
    initial; the discount-style parameters get (0.8, 0.9999); epoch counts
    get [1, 8]. The GAE discount, learning rate (adaptive, see trainers) and
    entropy coefficient are present but frozen.
    """
    return [
        ParamSpec("gamma", UNIT, 0.99, (0.8, 0.9999)),
        ParamSpec("gae_lambda", UNIT, 0.95, (0.8, 0.9999), mutable=False),
        ParamSpec("kl_target", POSITIVE, 0.016, (0.0016, 0.16)),
        ParamSpec("grad_norm_limit", POSITIVE, 1.0, (0.1, 10.0)),
        ParamSpec("clip_range", POSITIVE, 0.1, (0.01, 1.0)),
        ParamSpec("critic_coef", POSITIVE, 4.0, (0.4, 40.0)),
        ParamSpec("entropy_coef", POSITIVE, 0.0, (0.0, 0.01), mutable=False),
        ParamSpec("ppo_epochs", INTEGER, 2, (1, 8)),
        ParamSpec("reach_coef", POSITIVE, 50.0, (5.0, 500.0)),
        ParamSpec("pick_coef", POSITIVE, 20.0, (2.0, 200.0)),
        ParamSpec("picked_bonus", POSITIVE, 300.0, (30.0, 3000.0)),
        ParamSpec("targ_coef", POSITIVE, 200.0, (20.0, 2000.0)),
        ParamSpec("success_bonus", POSITIVE, 1000.0, (100.0, 10000.0)),
    ]
