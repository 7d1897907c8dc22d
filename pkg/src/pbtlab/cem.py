"""Cross-entropy search over a linear policy for the planar environment.

A deliberately small derivative-free learner: policies are linear maps from
an 8-dimensional feature vector to (vx, vy, grip logit), and training fits
a diagonal Gaussian over the 24 weights by repeatedly keeping the elite
fraction of sampled candidates. Slow, simple, and deterministic per seed,
which is all the population loop needs from it.
"""

from __future__ import annotations

import json

import numpy as np

from .env import EnvConfig, EnvState, RewardCoeffs, rollout
from .errors import ConfigError
from .hyperparams import INTEGER, POSITIVE, UNIT, HyperParams, ParamSpec
from .meta import EvalResult
from .trainers import Trainer

N_FEATURES = 8
N_OUTPUTS = 3
N_WEIGHTS = N_FEATURES * N_OUTPUTS

COEFF_NAMES = ("reach_coef", "pick_coef", "picked_bonus", "targ_coef", "success_bonus")


def features(state: EnvState) -> np.ndarray:
    """Stage-gated relative positions plus a few scalars.

    The gating means a single linear layer can express "move to the object,
    then carry it to the target, gripping when close", which keeps the
    search space small enough for quick desk-scale runs.
    """
    held = 1.0 if state.held else 0.0
    free = 1.0 - held
    dx, dy = state.obj_x - state.hand_x, state.obj_y - state.hand_y
    return np.array(
        [
            free * dx,
            free * dy,
            held * (state.targ_x - state.obj_x),
            held * (state.targ_y - state.obj_y),
            held,
            1.0,
            (dx * dx + dy * dy) ** 0.5,
            state.obj_y,
        ]
    )


class LinearPolicy:
    def __init__(self, weights: np.ndarray):
        self.w = np.asarray(weights, dtype=float).reshape(N_OUTPUTS, N_FEATURES)

    def __call__(self, state: EnvState):
        out = self.w @ features(state)
        return out[0], out[1], 1.0 if out[2] > 0.0 else 0.0


def cem_param_specs() -> list[ParamSpec]:
    """Search hyperparameters plus the reward coefficients, all mutable."""
    return [
        ParamSpec("cem_pop", INTEGER, 24, (8, 64)),
        ParamSpec("cem_elite", UNIT, 0.2, (0.05, 0.6)),
        ParamSpec("cem_sigma", POSITIVE, 0.5, (0.03, 3.0)),
        ParamSpec("reach_coef", POSITIVE, 50.0, (0.0, 500.0)),
        ParamSpec("pick_coef", POSITIVE, 20.0, (0.0, 200.0)),
        ParamSpec("picked_bonus", POSITIVE, 300.0, (0.0, 3000.0)),
        ParamSpec("targ_coef", POSITIVE, 200.0, (0.0, 2000.0)),
        ParamSpec("success_bonus", POSITIVE, 1000.0, (0.0, 10000.0)),
    ]


def coeffs_from(values: dict) -> RewardCoeffs:
    return RewardCoeffs(
        reach_coef=values["reach_coef"],
        pick_coef=values["pick_coef"],
        picked_bonus=values["picked_bonus"],
        targ_coef=values["targ_coef"],
        success_bonus=values["success_bonus"],
    )


class CemTrainer(Trainer):
    SNAPSHOT_FORMAT = 1
    SIGMA_FLOOR = 0.02

    def __init__(
        self,
        env_cfg: EnvConfig,
        seed: int,
        train_rollout_cap: int = 450,
        eval_episodes: int = 3,
        eval_rollout_cap: int = 1500,
    ):
        self.env_cfg = env_cfg
        self.train_rollout_cap = train_rollout_cap
        self.eval_episodes = eval_episodes
        self.eval_rollout_cap = eval_rollout_cap
        self.rng = np.random.default_rng(seed)
        self.mean = np.zeros(N_WEIGHTS)
        self.sigma = np.full(N_WEIGHTS, 0.5)
        self.generations = 0
        self.steps_used = 0
        self.tolerance = 0.075
        self._values: dict | None = None

    def set_hyperparams(self, hyperparams: HyperParams) -> None:
        values = hyperparams.as_dict()
        missing = [n for n in ("cem_pop", "cem_elite", "cem_sigma", *COEFF_NAMES) if n not in values]
        if missing:
            raise ConfigError(f"cem trainer needs parameters {missing}")
        if self._values is None:
            self.sigma = np.full(N_WEIGHTS, values["cem_sigma"])
        self._values = values

    def set_tolerance(self, epsilon: float) -> None:
        self.tolerance = float(epsilon)

    def train(self, hyperparams: HyperParams, n_steps: int) -> None:
        self.set_hyperparams(hyperparams)
        if n_steps == 0:
            return
        pop = int(self._values["cem_pop"])
        if n_steps < pop:  # cannot even give one step to each candidate
            raise ConfigError(
                f"budget {n_steps} below one generation of {pop} rollouts"
            )
        budget = n_steps
        while budget > 0:
            budget -= self._generation()

    def _generation(self) -> int:
        values = self._values
        pop = int(values["cem_pop"])
        elite_n = max(1, int(round(pop * values["cem_elite"])))
        coeffs = coeffs_from(values)
        noise = self.rng.standard_normal((pop, N_WEIGHTS))
        candidates = self.mean + self.sigma * noise
        # common random numbers: every candidate faces the same episode, so
        # return differences reflect the policy rather than starting luck
        episode_seed = int(self.rng.integers(2**63))
        returns = np.empty(pop)
        consumed = 0
        for i in range(pop):
            res = rollout(
                self.env_cfg,
                coeffs,
                LinearPolicy(candidates[i]),
                np.random.default_rng(episode_seed),
                self.tolerance,
                max_steps=self.train_rollout_cap,
            )
            returns[i] = res.total_reward
            consumed += res.steps
        elite_idx = np.argsort(-returns, kind="stable")[:elite_n]
        elites = candidates[elite_idx]
        self.mean = elites.mean(axis=0)
        self.sigma = elites.std(axis=0) + self.SIGMA_FLOOR
        self.generations += 1
        self.steps_used += consumed
        return consumed

    def policy(self) -> LinearPolicy:
        return LinearPolicy(self.mean)

    def evaluate(self) -> EvalResult:
        total = 0.0
        coeffs = coeffs_from(self._values) if self._values else RewardCoeffs()
        for _ in range(self.eval_episodes):
            res = rollout(
                self.env_cfg,
                coeffs,
                self.policy(),
                self.rng,
                self.tolerance,
                max_steps=self.eval_rollout_cap,
            )
            total += res.successes
        return EvalResult(n_succ=total / self.eval_episodes, epsilon=self.tolerance)

    def snapshot(self) -> bytes:
        return json.dumps(
            {
                "format": self.SNAPSHOT_FORMAT,
                "kind": "cem",
                "mean": self.mean.tolist(),
                "sigma": self.sigma.tolist(),
                "generations": self.generations,
                "steps_used": self.steps_used,
                "tolerance": self.tolerance,
                "rng": self.rng.bit_generator.state,
            }
        ).encode("utf-8")

    def restore(self, blob: bytes) -> None:
        raw = json.loads(blob.decode("utf-8"))
        if raw.get("format") != self.SNAPSHOT_FORMAT or raw.get("kind") != "cem":
            raise ConfigError("incompatible cem snapshot")
        self.mean = np.array(raw["mean"], dtype=float)
        self.sigma = np.array(raw["sigma"], dtype=float)
        self.generations = int(raw["generations"])
        self.steps_used = int(raw["steps_used"])
        self.tolerance = float(raw["tolerance"])
        rng = np.random.default_rng()
        rng.bit_generator.state = raw["rng"]
        self.rng = rng


def cem_learn(env_cfg: EnvConfig, p: HyperParams, budget_steps: int, seed: int):
    """Train a fresh policy for a step budget and return (weights, EvalResult).

    ``budget_steps == 0`` is the explicit degenerate case (evaluate the
    initial random policy); a nonzero budget below one generation raises.
    """
    trainer = CemTrainer(env_cfg, seed)
    if budget_steps:
        trainer.train(p, budget_steps)
    else:
        trainer.set_hyperparams(p)
    return trainer.mean.copy(), trainer.evaluate()
