"""The per-process population-training loop.

Each agent repeatedly trains for one period, evaluates, publishes a
checkpoint, ranks itself against step-aligned peer checkpoints, and then
either continues, mutates its own hyperparameters, or replaces itself with
a mutated copy of a top performer. Two step-based gates keep the population
diverse: no action at all before the start delay, and no action within the
burn-in window after a mutation. Everything is driven by per-agent seeded
randomness; there is no wall-clock anywhere.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import signal
from dataclasses import dataclass, field

from .errors import ConfigError
from .hyperparams import HyperParams, MutationConfig, mutate, sample_initial
from .meta import ToleranceSchedule, anneal, meta_objective
from .trainers import Trainer
from .workspace import (
    DECISIONS_FILE,
    CheckpointRecord,
    Workspace,
    aligned_snapshot,
    stale_agent_ids,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PbtConfig:
    """Population constants, in environment steps before scaling.

    ``step_scale`` divides the three step constants together so desk-scale
    runs preserve their 10 : 2.5 : 1 ratio.
    """

    population_size: int = 8
    split: tuple[float, float, float] = (0.3, 0.4, 0.3)
    start_delay: float = 2.0e8  # enable population actions only after this
    burn_in: float = 5.0e7      # pause actions this long after a mutation
    period: float = 2.0e7       # steps between evaluate/publish/rank rounds
    step_scale: float = 1.0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must sum to 1, got {self.split}")
        if self.burn_in > self.start_delay:
            raise ConfigError("burn_in must not exceed start_delay")
        if self.period <= 0 or self.step_scale <= 0:
            raise ConfigError("period and step_scale must be positive")

    def _scaled(self, steps: float) -> int:
        return max(1, int(round(steps / self.step_scale)))

    @property
    def start_delay_steps(self) -> int:
        return self._scaled(self.start_delay)

    @property
    def burn_in_steps(self) -> int:
        return self._scaled(self.burn_in)

    @property
    def period_steps(self) -> int:
        return self._scaled(self.period)


@dataclass
class AgentState:
    agent_id: int
    hyperparams: HyperParams
    tolerance: ToleranceSchedule
    rng: random.Random
    step: int = 0
    last_mutation_step: int = 0
    trainer_payload: bytes = b""


@dataclass(frozen=True)
class Decision:
    """Outcome of one ranking round: continue, mutate self, or replace self."""

    kind: str  # "continue" | "mutate" | "replace"
    reason: str = ""
    hyperparams: HyperParams | None = None
    source_id: int | None = None
    source_step: int | None = None
    payload_ref: str | None = None


def _cont(reason: str) -> Decision:
    return Decision("continue", reason)


def subseed(seed: int, tag: str) -> int:
    """Stable derived seed so init/decision/trainer streams never collide."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def make_agent_state(
    agent_id: int,
    specs,
    tolerance: ToleranceSchedule,
    seed: int,
    jitter=None,
    initial_values: dict | None = None,
) -> AgentState:
    """Sample a fresh population member. ``initial_values`` overrides the
    jittered draw (used by tests to stage specific populations)."""
    init_rng = random.Random(subseed(seed, "init"))
    if jitter is None:
        hp = sample_initial(specs, init_rng)
    else:
        hp = sample_initial(specs, init_rng, jitter)
    if initial_values:
        hp = hp.with_values({**hp.values, **initial_values})
    return AgentState(
        agent_id=agent_id,
        hyperparams=hp,
        tolerance=tolerance,
        rng=random.Random(subseed(seed, "decisions")),
    )


def tier_assignment(snapshot, split=(0.3, 0.4, 0.3)) -> dict[int, str]:
    """Sort a step-aligned snapshot by score and label top/mid/bottom tiers.

    Ties break towards the higher step, then the lower agent id. Edge tiers
    hold round(split * n) members each (half-up, minimum one); populations
    below three members are all mid, which leaves the loop inert.
    """
    n = len(snapshot)
    tiers = {agent_id: "mid" for agent_id, _ in snapshot}
    if n < 3:
        return tiers
    order = sorted(snapshot, key=lambda e: (-e[1].meta_score, -e[1].step, e[0]))
    n_top = max(1, int(split[0] * n + 0.5))
    n_bottom = max(1, int(split[2] * n + 0.5))
    for agent_id, _ in order[:n_top]:
        tiers[agent_id] = "top"
    for agent_id, _ in order[n - n_bottom:]:
        tiers[agent_id] = "bottom"
    return tiers


def pbt_step(
    state: AgentState,
    snapshot,
    cfg: PbtConfig,
    mcfg: MutationConfig,
    stale_ids: frozenset | set = frozenset(),
) -> Decision:
    """Decide this agent's action from a step-aligned snapshot.

    Deterministic given the agent's rng state. Stale agents keep their slots
    in the ranking but are skipped when picking a replacement source, so a
    long-dead competitor can push us into the bottom tier without us ever
    resurrecting its ancient weights.
    """
    if not snapshot:
        return _cont("empty-snapshot")
    if state.step < cfg.start_delay_steps:
        return _cont("start-delay")
    if state.step - state.last_mutation_step < cfg.burn_in_steps:
        return _cont("burn-in")
    if len(snapshot) < 3:
        return _cont("population-too-small")
    tiers = tier_assignment(snapshot, cfg.split)
    tier = tiers.get(state.agent_id)
    if tier is None:
        return _cont("self-not-in-snapshot")
    if tier == "top":
        return _cont("top-tier")
    if tier == "mid":
        return Decision(
            "mutate", "mid-tier", hyperparams=mutate(state.hyperparams, mcfg, state.rng)
        )
    sources = [
        (agent_id, rec)
        for agent_id, rec in snapshot
        if tiers[agent_id] == "top" and agent_id != state.agent_id and agent_id not in stale_ids
    ]
    if not sources:
        return _cont("no-replacement-source")
    source_id, rec = sources[state.rng.randrange(len(sources))]
    try:
        source_hp = state.hyperparams.with_values(rec.hyperparams)
    except ConfigError:
        logger.warning("agent %d: source %d hyperparams do not match specs", state.agent_id, source_id)
        return _cont("source-hyperparams-mismatch")
    return Decision(
        "replace",
        "bottom-tier",
        hyperparams=mutate(source_hp, mcfg, state.rng),
        source_id=source_id,
        source_step=rec.step,
        payload_ref=rec.payload_ref,
    )


def apply_decision(state: AgentState, decision: Decision, workspace: Workspace) -> AgentState:
    """Fold a decision into the agent state.

    Replacing loads the source payload from the workspace; if the blob was
    garbage collected in the meantime we log and fall back to continuing.
    The tolerance schedule is never copied: each agent anneals its own.
    """
    if decision.kind == "continue":
        return state
    if decision.kind == "mutate":
        state.hyperparams = decision.hyperparams
        state.last_mutation_step = state.step
        return state
    if decision.kind != "replace":
        raise ValueError(f"unknown decision kind {decision.kind!r}")
    blob = workspace.load_blob(decision.source_id, decision.payload_ref)
    if blob is None:
        logger.warning(
            "agent %d: payload %s from agent %d vanished (gc race), continuing",
            state.agent_id,
            decision.payload_ref,
            decision.source_id,
        )
        return state
    state.trainer_payload = blob
    state.hyperparams = decision.hyperparams
    state.last_mutation_step = state.step
    return state


class SimulatedKill(Exception):
    """Raised instead of SIGKILL when an in-process harness hosts the agent."""


@dataclass
class IterationTrace:
    step: int
    n_succ: float
    epsilon: float
    meta_score: float
    decision: str


class AgentLoop:
    """One agent's train/evaluate/publish/rank/decide cycle, one call per period.

    ``kill_at_step`` emulates losing the process at an iteration boundary:
    a real SIGKILL to our own pid by default, or a SimulatedKill exception
    when ``simulate_kill`` is set by a single-process harness.
    """

    def __init__(
        self,
        state: AgentState,
        trainer: Trainer,
        cfg: PbtConfig,
        mcfg: MutationConfig,
        workspace: Workspace,
        max_steps: int,
        pbt_enabled: bool = True,
        kill_at_step: int | None = None,
        simulate_kill: bool = False,
    ):
        self.state = state
        self.trainer = trainer
        self.cfg = cfg
        self.mcfg = mcfg
        self.workspace = workspace
        self.max_steps = max_steps
        self.pbt_enabled = pbt_enabled
        self.kill_at_step = kill_at_step
        self.simulate_kill = simulate_kill
        self.iteration = 0
        self.traces: list[IterationTrace] = []
        self.writer = workspace.writer(state.agent_id)
        self._log_path = self.writer.dir / DECISIONS_FILE
        trainer.set_hyperparams(state.hyperparams)
        if state.trainer_payload:
            trainer.restore(state.trainer_payload)

    @property
    def done(self) -> bool:
        return self.state.step >= self.max_steps

    def run_iteration(self) -> None:
        state = self.state
        if self.kill_at_step is not None and state.step >= self.kill_at_step:
            if self.simulate_kill:
                raise SimulatedKill(state.agent_id)
            os.kill(os.getpid(), signal.SIGKILL)

        period = self.cfg.period_steps
        self.trainer.set_tolerance(state.tolerance.current)
        self.trainer.train(state.hyperparams, period)
        state.step += period

        result = self.trainer.evaluate()
        state.tolerance = anneal(state.tolerance, result)
        score = meta_objective(result, state.tolerance)

        state.trainer_payload = self.trainer.snapshot()
        self.writer.publish(
            CheckpointRecord(
                agent_id=state.agent_id,
                step=state.step,
                meta_score=score,
                tolerance=result.epsilon,
                hyperparams=state.hyperparams.as_dict(),
            ),
            state.trainer_payload,
        )

        view = self.workspace.read_population(state.agent_id, state.step)
        snapshot = aligned_snapshot(view, state.step)
        stale = stale_agent_ids(view, period)
        if self.pbt_enabled:
            decision = pbt_step(state, snapshot, self.cfg, self.mcfg, stale_ids=stale)
        else:
            decision = _cont("pbt-disabled")
        self._log_decision(decision, snapshot, stale)
        self.traces.append(
            IterationTrace(state.step, result.n_succ, result.epsilon, score, decision.kind)
        )

        prev_hp = state.hyperparams
        prev_payload = state.trainer_payload
        self.state = apply_decision(state, decision, self.workspace)
        if self.state.hyperparams is not prev_hp:
            self.trainer.set_hyperparams(self.state.hyperparams)
        if self.state.trainer_payload is not prev_payload:
            self.trainer.restore(self.state.trainer_payload)
        self.iteration += 1

    def _log_decision(self, decision: Decision, snapshot, stale) -> None:
        line = json.dumps(
            {
                "iteration": self.iteration,
                "step": self.state.step,
                "decision": decision.kind,
                "reason": decision.reason,
                "source": decision.source_id,
                "source_step": decision.source_step,
                "peers": [[agent_id, rec.step] for agent_id, rec in snapshot],
                "stale": sorted(stale),
            }
        )
        try:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except OSError as exc:  # the trace is a debug artifact, never fatal
            logger.warning("agent %d: could not append decision log: %s", self.state.agent_id, exc)


def run_agent(
    state: AgentState,
    trainer: Trainer,
    cfg: PbtConfig,
    mcfg: MutationConfig,
    workspace: Workspace,
    max_steps: int,
    pbt_enabled: bool = True,
    kill_at_step: int | None = None,
) -> AgentState:
    """Drive one agent to its stop condition. Every iteration publishes
    exactly one checkpoint record."""
    loop = AgentLoop(
        state,
        trainer,
        cfg,
        mcfg,
        workspace,
        max_steps,
        pbt_enabled=pbt_enabled,
        kill_at_step=kill_at_step,
    )
    while not loop.done:
        loop.run_iteration()
    return loop.state


def read_decision_log(path) -> list[dict]:
    """Parse a decisions.log, skipping unparseable (possibly torn) lines."""
    entries = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    entries.append(json.loads(line))
                except ValueError:
                    continue
    except OSError:
        pass
    return entries
