"""Experiment orchestration: launching populations, baselines, and reports.

Two execution modes share all agent code. ``launch_processes`` spawns one
OS process per agent and interacts with them only through the shared
workspace and signals, which preserves the no-orchestrator property even
under test. ``run_population`` drives the same loops cooperatively inside
one process (round-robin, deterministic) for fast statistical experiments.
"""

from __future__ import annotations

import json
import logging
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .agent import AgentLoop, PbtConfig, SimulatedKill, make_agent_state, read_decision_log, subseed
from .cem import CemTrainer, cem_param_specs
from .env import EnvConfig
from .errors import ConfigError, WorkspaceError
from .hyperparams import MutationConfig, ParamSpec, load_param_specs
from .meta import ToleranceSchedule
from .trainers import LandscapeConfig, LandscapeTrainer, landscape_specs
from .workspace import DECISIONS_FILE, Workspace

logger = logging.getLogger(__name__)

KILL_AT_STEP = "kill-at-step"
START_DELAY = "start-delay-steps"


@dataclass(frozen=True)
class Fault:
    agent_id: int
    kind: str  # KILL_AT_STEP | START_DELAY
    step: int

    def __post_init__(self):
        if self.kind not in (KILL_AT_STEP, START_DELAY):
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.step < 0:
            raise ConfigError("fault step must be nonnegative")


@dataclass
class ExperimentConfig:
    trainer: str = "landscape"  # "landscape" | "planar"
    population_size: int = 8
    seed: int = 0
    seeds: list[int] | None = None
    step_scale: float = 1e5
    iterations: int = 50  # ranking periods per agent
    mutation: MutationConfig = field(default_factory=MutationConfig)
    pbt: PbtConfig = field(default_factory=PbtConfig)
    tolerance: ToleranceSchedule = field(default_factory=ToleranceSchedule)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    faults: list[Fault] = field(default_factory=list)
    spec_file: str | None = None
    process_timeout: float = 900.0

    def __post_init__(self):
        if self.trainer not in ("landscape", "planar"):
            raise ConfigError(f"unknown trainer kind {self.trainer!r}")
        if self.population_size < 1:
            raise ConfigError("population_size must be >= 1")
        if self.seeds is not None:
            if len(self.seeds) != self.population_size:
                raise ConfigError("seeds list must match population_size")
            if len(set(self.seeds)) != len(self.seeds):
                raise ConfigError("per-agent seeds must be unique")
        for f in self.faults:
            if not 0 <= f.agent_id < self.population_size:
                raise ConfigError(f"fault references unknown agent {f.agent_id}")
        self.pbt = replace(self.pbt, population_size=self.population_size, step_scale=self.step_scale)

    # -- derived -----------------------------------------------------------

    def agent_seed(self, agent_id: int) -> int:
        if self.seeds is not None:
            return self.seeds[agent_id]
        return subseed(self.seed, f"agent-{agent_id}")

    def max_steps(self) -> int:
        return self.iterations * self.pbt.period_steps

    def param_specs(self) -> list[ParamSpec]:
        if self.spec_file:
            return load_param_specs(self.spec_file)
        return landscape_specs() if self.trainer == "landscape" else cem_param_specs()

    def make_trainer(self, agent_id: int):
        seed = subseed(self.agent_seed(agent_id), "trainer")
        if self.trainer == "landscape":
            return LandscapeTrainer(seed, self.landscape)
        return CemTrainer(self.env, seed)

    def fault_for(self, agent_id: int, kind: str) -> int | None:
        for f in self.faults:
            if f.agent_id == agent_id and f.kind == kind:
                return f.step
        return None

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        raw = {
            "trainer": self.trainer,
            "population_size": self.population_size,
            "seed": self.seed,
            "seeds": self.seeds,
            "step_scale": self.step_scale,
            "iterations": self.iterations,
            "mutation": vars(self.mutation),
            "pbt": {
                "split": list(self.pbt.split),
                "start_delay": self.pbt.start_delay,
                "burn_in": self.pbt.burn_in,
                "period": self.pbt.period,
            },
            "tolerance": {
                "initial": self.tolerance.initial,
                "final": self.tolerance.final,
                "current": self.tolerance.current,
                "decay": self.tolerance.decay,
                "trigger": self.tolerance.trigger,
            },
            "landscape": vars(self.landscape),
            "env": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.env).items()},
            "faults": [vars(f) for f in self.faults],
            "spec_file": self.spec_file,
            "process_timeout": self.process_timeout,
        }
        return json.dumps(raw, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        kwargs = {}
        for key in ("trainer", "population_size", "seed", "seeds", "step_scale",
                    "iterations", "spec_file", "process_timeout"):
            if key in raw:
                kwargs[key] = raw[key]
        if "mutation" in raw:
            kwargs["mutation"] = MutationConfig(**raw["mutation"])
        if "pbt" in raw:
            p = dict(raw["pbt"])
            if "split" in p:
                p["split"] = tuple(p["split"])
            kwargs["pbt"] = PbtConfig(**p)
        if "tolerance" in raw:
            kwargs["tolerance"] = ToleranceSchedule(**raw["tolerance"])
        if "landscape" in raw:
            kwargs["landscape"] = LandscapeConfig(**raw["landscape"])
        if "env" in raw:
            env = {k: tuple(v) if isinstance(v, list) else v for k, v in raw["env"].items()}
            kwargs["env"] = EnvConfig(**env)
        if raw.get("faults"):
            kwargs["faults"] = [Fault(**f) for f in raw["faults"]]
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def build_loop(
    cfg: ExperimentConfig,
    workspace: Workspace,
    agent_id: int,
    baseline: bool = False,
    simulate_kill: bool = False,
    initial_values: dict | None = None,
) -> AgentLoop:
    seed = cfg.agent_seed(agent_id)
    state = make_agent_state(
        agent_id, cfg.param_specs(), cfg.tolerance, seed, initial_values=initial_values
    )
    return AgentLoop(
        state,
        cfg.make_trainer(agent_id),
        cfg.pbt,
        cfg.mutation,
        workspace,
        max_steps=cfg.max_steps(),
        pbt_enabled=not baseline,
        kill_at_step=cfg.fault_for(agent_id, KILL_AT_STEP),
        simulate_kill=simulate_kill,
    )


def run_population(
    cfg: ExperimentConfig,
    root,
    baseline: bool = False,
    initial_values: dict[int, dict] | None = None,
) -> list[AgentLoop]:
    """Cooperative single-process run: agents advance round-robin, one
    ranking period per turn, against a real (non-fsynced) workspace.

    Start-delay faults skip an agent's early turns; kill faults stop its
    scheduling at the configured step, leaving its records in place exactly
    like a lost process would.
    """
    workspace = Workspace(root, fsync=False).create()
    loops = []
    delay_rounds = {}
    for agent_id in range(cfg.population_size):
        loops.append(
            build_loop(
                cfg,
                workspace,
                agent_id,
                baseline=baseline,
                simulate_kill=True,
                initial_values=(initial_values or {}).get(agent_id),
            )
        )
        delay = cfg.fault_for(agent_id, START_DELAY)
        period = cfg.pbt.period_steps
        delay_rounds[agent_id] = -(-delay // period) if delay else 0
    dead: set[int] = set()
    rnd = 0
    while any(loop.state.agent_id not in dead and not loop.done for loop in loops):
        for loop in loops:
            agent_id = loop.state.agent_id
            if agent_id in dead or loop.done or rnd < delay_rounds[agent_id]:
                continue
            try:
                loop.run_iteration()
            except SimulatedKill:
                dead.add(agent_id)
        rnd += 1
    return loops


# -- process-based launching --------------------------------------------------


@dataclass
class LaunchResult:
    exit_codes: dict[int, int | None]
    finished: int
    total: int

    @property
    def ok(self) -> bool:
        return self.finished * 2 >= self.total


def launch_processes(cfg: ExperimentConfig, root, config_path, baseline: bool = False) -> LaunchResult:
    """One OS process per agent; the launcher only touches the workspace and
    sends signals, never anything else. Agents with a start delay are spawned
    once peers' published steps reach the delay."""
    workspace = Workspace(root).create()
    delayed = {
        a: cfg.fault_for(a, START_DELAY)
        for a in range(cfg.population_size)
        if cfg.fault_for(a, START_DELAY)
    }
    procs: dict[int, subprocess.Popen] = {}

    def spawn(agent_id: int) -> subprocess.Popen:
        argv = [
            sys.executable,
            "-m",
            "pbtlab.cli",
            "agent",
            "--config",
            str(config_path),
            "--workspace",
            str(root),
            "--agent-id",
            str(agent_id),
        ]
        if baseline:
            argv.append("--baseline")
        return subprocess.Popen(argv)

    for agent_id in range(cfg.population_size):
        if agent_id not in delayed:
            procs[agent_id] = spawn(agent_id)

    deadline = time.monotonic() + cfg.process_timeout
    pending = dict(delayed)
    while pending and time.monotonic() < deadline:
        view = workspace.read_population(-1)
        furthest = max((recs[-1].step for recs in view.agents.values() if recs), default=0)
        for agent_id, delay in list(pending.items()):
            if furthest >= delay:
                procs[agent_id] = spawn(agent_id)
                del pending[agent_id]
        if pending:
            time.sleep(0.05)
    for agent_id in pending:  # peers never got far enough; start anyway
        logger.warning("agent %d: start delay %s never reached, spawning late", agent_id, pending[agent_id])
        procs[agent_id] = spawn(agent_id)

    exit_codes: dict[int, int | None] = {}
    for agent_id, proc in procs.items():
        remaining = max(1.0, deadline - time.monotonic())
        try:
            exit_codes[agent_id] = proc.wait(timeout=remaining)
        except subprocess.TimeoutExpired:
            logger.warning("agent %d: timed out, killing", agent_id)
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            exit_codes[agent_id] = None
    finished = sum(1 for rc in exit_codes.values() if rc == 0)
    return LaunchResult(exit_codes, finished, cfg.population_size)


def run_agent_process(cfg: ExperimentConfig, root, agent_id: int, baseline: bool = False) -> int:
    """Entry point for the internal ``agent`` CLI verb."""
    workspace = Workspace(root)
    workspace.check_version()
    loop = build_loop(cfg, workspace, agent_id, baseline=baseline)
    while not loop.done:
        loop.run_iteration()
    return 0


# -- reporting ----------------------------------------------------------------


@dataclass
class RunReport:
    """Plot-ready series extracted from a workspace; a pure function of it."""

    meta_series: dict[int, list[tuple[int, float, float]]]  # agent -> (step, score, tol)
    best_curve: list[tuple[int, float, float]]  # (step, best at step, best so far)
    hyper_series: dict[str, list[tuple[int, float, float, float, int]]]
    decisions: list[dict]
    agent_summary: dict[int, dict]

    def best_final_score(self) -> float:
        finals = [series[-1][1] for series in self.meta_series.values() if series]
        if not finals:
            raise ValueError("workspace has no records to report on")
        return max(finals)

    def write(self, outdir) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "meta_score.tsv", "w") as fh:
            fh.write("agent\tstep\tmeta_score\ttolerance\n")
            for agent_id in sorted(self.meta_series):
                for step, score, tol in self.meta_series[agent_id]:
                    fh.write(f"{agent_id}\t{step}\t{score:.12g}\t{tol:.12g}\n")
        with open(out / "best_meta_score.tsv", "w") as fh:
            fh.write("step\tbest_at_step\tbest_so_far\n")
            for step, at, cum in self.best_curve:
                fh.write(f"{step}\t{at:.12g}\t{cum:.12g}\n")
        for name, series in sorted(self.hyper_series.items()):
            with open(out / f"hp_{name}.tsv", "w") as fh:
                fh.write("step\tmin\tmean\tmax\tn\n")
                for step, lo, mean, hi, n in series:
                    fh.write(f"{step}\t{lo:.12g}\t{mean:.12g}\t{hi:.12g}\t{n}\n")
        with open(out / "decisions.tsv", "w") as fh:
            fh.write("agent\tstep\tdecision\treason\tsource\n")
            for d in self.decisions:
                fh.write(
                    f"{d['agent']}\t{d['step']}\t{d['decision']}\t{d['reason']}\t"
                    f"{'' if d['source'] is None else d['source']}\n"
                )
        with open(out / "summary.txt", "w") as fh:
            fh.write(self.summary_text())

    def summary_text(self) -> str:
        lines = [f"agents: {len(self.agent_summary)}"]
        max_step = max((s["last_step"] for s in self.agent_summary.values()), default=0)
        for agent_id in sorted(self.agent_summary):
            s = self.agent_summary[agent_id]
            behind = " (behind)" if s["last_step"] < max_step else ""
            lines.append(
                f"agent {agent_id}: records={s['records']} steps=[{s['first_step']}, "
                f"{s['last_step']}]{behind} final={s['final_score']:.6g} best={s['best_score']:.6g}"
            )
        if self.best_curve:
            lines.append(f"population best (final): {self.best_curve[-1][2]:.6g}")
        counts: dict[str, int] = {}
        for d in self.decisions:
            counts[d["decision"]] = counts.get(d["decision"], 0) + 1
        lines.append("decisions: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
        return "\n".join(lines) + "\n"


def report(root) -> RunReport:
    workspace = Workspace(root)
    view = workspace.read_population(-1)
    if not any(view.agents.values()):
        raise WorkspaceError(f"no records found under {root}")

    meta_series = {}
    latest: dict[tuple[int, int], object] = {}
    for agent_id, recs in view.agents.items():
        meta_series[agent_id] = [(r.step, r.meta_score, r.tolerance) for r in recs]
        for r in recs:
            key = (agent_id, r.step)
            if key not in latest or latest[key].wall_seq < r.wall_seq:
                latest[key] = r

    steps = sorted({step for _, step in latest})
    best_curve = []
    best_so_far = float("-inf")
    for step in steps:
        here = [r.meta_score for (a, s), r in latest.items() if s == step]
        best_at = max(here)
        best_so_far = max(best_so_far, best_at)
        best_curve.append((step, best_at, best_so_far))

    names = sorted({name for r in latest.values() for name in r.hyperparams})
    hyper_series: dict[str, list] = {name: [] for name in names}
    for step in steps:
        rows = [r for (a, s), r in latest.items() if s == step]
        for name in names:
            vals = [r.hyperparams[name] for r in rows if name in r.hyperparams]
            if vals:
                hyper_series[name].append(
                    (step, min(vals), sum(vals) / len(vals), max(vals), len(vals))
                )

    decisions = []
    for agent_id in sorted(view.agents):
        for entry in read_decision_log(workspace.agent_dir(agent_id) / DECISIONS_FILE):
            decisions.append(
                {
                    "agent": agent_id,
                    "step": entry.get("step"),
                    "decision": entry.get("decision"),
                    "reason": entry.get("reason", ""),
                    "source": entry.get("source"),
                }
            )
    decisions.sort(key=lambda d: (d["step"] or 0, d["agent"]))

    agent_summary = {}
    for agent_id, recs in view.agents.items():
        agent_summary[agent_id] = {
            "records": len(recs),
            "first_step": recs[0].step,
            "last_step": recs[-1].step,
            "final_score": recs[-1].meta_score,
            "best_score": max(r.meta_score for r in recs),
        }
    return RunReport(meta_series, best_curve, hyper_series, decisions, agent_summary)
