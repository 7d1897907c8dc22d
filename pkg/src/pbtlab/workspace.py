"""Shared-directory coordination protocol (format version 1).

Agents coordinate with no orchestrator: each one appends checkpoint records
to its own subdirectory of a shared workspace and reads everyone else's.
The layout is:

    <root>/FORMAT_VERSION        text file containing "1"
    <root>/<agent_id>/records.jsonl
    <root>/<agent_id>/<agent_id>_<step>_<wall_seq>.bin   (payload blobs)
    <root>/<agent_id>/decisions.log                      (debug trace, optional)

``records.jsonl`` holds one JSON object per line. Field names are frozen:

    agent_id     int,   owner of the record
    step         int,   cumulative environment steps consumed at publish time
    meta_score   float, population-ranking score of this checkpoint
    tolerance    float, success tolerance the score was measured at
    hyperparams  object, parameter name -> value
    payload_ref  str,   blob file name relative to the agent directory
    wall_seq     int,   per-agent publish counter starting at 0

Consistency rules:

* One writer per agent directory, any number of readers, no locks.
* No visible file is ever modified in place. A publish writes the payload
  blob first (tmp file, fsync, rename), then replaces ``records.jsonl``
  the same way, so a reader can never observe a record whose payload does
  not exist. A crash mid-publish leaves at most an orphan blob or tmp file,
  both of which the garbage collector removes.
* Readers skip lines that fail to parse (a truncated trailing line on a
  weakly consistent filesystem) and records whose blob is missing (already
  garbage collected), and never wait for slow or dead agents.

The protocol works the same on a local directory and on NFS-style shares
with close-to-open consistency; weaker filesystems merely delay when a
record becomes visible.
"""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import WorkspaceError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
VERSION_FILE = "FORMAT_VERSION"
RECORDS_FILE = "records.jsonl"
DECISIONS_FILE = "decisions.log"

# Number of ranking periods an agent may lag the population median before
# it is considered stale (still ranked, never copied from).
STALE_LAG_PERIODS = 3

_RECORD_KEYS = {
    "agent_id",
    "step",
    "meta_score",
    "tolerance",
    "hyperparams",
    "payload_ref",
    "wall_seq",
}


@dataclass
class CheckpointRecord:
    """One published checkpoint: the unit of inter-agent communication."""

    agent_id: int
    step: int
    meta_score: float
    tolerance: float
    hyperparams: dict
    payload_ref: str = ""
    wall_seq: int = -1

    def to_json(self) -> str:
        return json.dumps(
            {
                "agent_id": self.agent_id,
                "step": self.step,
                "meta_score": self.meta_score,
                "tolerance": self.tolerance,
                "hyperparams": self.hyperparams,
                "payload_ref": self.payload_ref,
                "wall_seq": self.wall_seq,
            },
            sort_keys=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "CheckpointRecord":
        raw = json.loads(line)
        if not isinstance(raw, dict) or not _RECORD_KEYS.issubset(raw):
            raise ValueError(f"record line missing keys: {line[:80]!r}")
        return cls(
            agent_id=int(raw["agent_id"]),
            step=int(raw["step"]),
            meta_score=float(raw["meta_score"]),
            tolerance=float(raw["tolerance"]),
            hyperparams=dict(raw["hyperparams"]),
            payload_ref=str(raw["payload_ref"]),
            wall_seq=int(raw["wall_seq"]),
        )

    def validate(self) -> None:
        if self.agent_id < 0:
            raise ValueError(f"agent_id must be nonnegative, got {self.agent_id}")
        if self.step < 0:
            raise ValueError(f"step must be nonnegative, got {self.step}")
        if not math.isfinite(self.meta_score):
            raise ValueError(f"meta_score must be finite, got {self.meta_score}")
        if not math.isfinite(self.tolerance):
            raise ValueError(f"tolerance must be finite, got {self.tolerance}")


@dataclass
class PopulationView:
    """Best-effort reconstruction of the population from the workspace.

    ``agents`` maps agent id to its records sorted by (step, wall_seq).
    The view may be stale or partial; diagnostics count skipped content.
    """

    agents: dict[int, list[CheckpointRecord]] = field(default_factory=dict)
    observed_at: int = 0
    parse_errors: int = 0
    missing_blobs: int = 0


class Workspace:
    """Handle on a workspace root. Cheap to construct; all I/O is per call."""

    def __init__(self, root, fsync: bool = True):
        self.root = Path(root)
        self.fsync = fsync

    # -- lifecycle ---------------------------------------------------------

    def create(self) -> "Workspace":
        """Create the root (if needed) and stamp or verify the format version."""
        self.root.mkdir(parents=True, exist_ok=True)
        vfile = self.root / VERSION_FILE
        if vfile.exists():
            self.check_version()
        else:
            _atomic_write_bytes(vfile, f"{FORMAT_VERSION}\n".encode(), self.fsync)
        return self

    def check_version(self) -> None:
        vfile = self.root / VERSION_FILE
        try:
            found = int(vfile.read_text().strip())
        except FileNotFoundError:
            raise WorkspaceError(f"{self.root}: not a workspace (no {VERSION_FILE})")
        except ValueError:
            raise WorkspaceError(f"{self.root}: unreadable {VERSION_FILE}")
        if found != FORMAT_VERSION:
            raise WorkspaceError(
                f"{self.root}: format version {found}, this build speaks {FORMAT_VERSION}"
            )

    def agent_dir(self, agent_id: int) -> Path:
        return self.root / str(agent_id)

    def writer(self, agent_id: int) -> "RecordWriter":
        return RecordWriter(self, agent_id)

    # -- reading -----------------------------------------------------------

    def read_population(self, self_id: int, self_step: int = 0) -> PopulationView:
        """Collect every parseable record for every agent directory.

        Skips truncated trailing lines and records whose payload blob is
        gone; an unreadable agent directory is omitted with a warning. Never
        blocks on anything.
        """
        if not self.root.is_dir():
            raise WorkspaceError(f"workspace root missing: {self.root}")
        view = PopulationView(observed_at=self_step)
        try:
            entries = sorted(os.listdir(self.root))
        except OSError as exc:
            raise WorkspaceError(f"cannot list workspace root {self.root}: {exc}")
        for name in entries:
            if not name.isdigit():
                continue
            agent_id = int(name)
            try:
                records = self._read_agent(agent_id, view)
            except OSError as exc:
                logger.warning("skipping unreadable agent dir %s: %s", name, exc)
                continue
            if records:
                view.agents[agent_id] = records
        return view

    def _read_agent(self, agent_id: int, view: PopulationView) -> list[CheckpointRecord]:
        adir = self.agent_dir(agent_id)
        rfile = adir / RECORDS_FILE
        try:
            data = rfile.read_text(encoding="utf-8", errors="replace")
        except FileNotFoundError:
            return []
        # one directory listing instead of a stat per blob; blob names are flat
        try:
            present = set(os.listdir(adir))
        except FileNotFoundError:
            return []
        lines = data.split("\n")
        records = []
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                rec = CheckpointRecord.from_json(line)
            except (ValueError, KeyError, TypeError):
                if i >= len(lines) - 2:  # final (possibly truncated) line
                    logger.debug("agent %d: skipping truncated trailing line", agent_id)
                else:
                    view.parse_errors += 1
                    logger.warning("agent %d: unparseable record line %d", agent_id, i)
                continue
            if rec.payload_ref not in present:
                view.missing_blobs += 1
                continue
            records.append(rec)
        records.sort(key=lambda r: (r.step, r.wall_seq))
        return records

    def load_blob(self, agent_id: int, payload_ref: str) -> bytes | None:
        """Payload bytes for a record, or None if the blob has been removed."""
        path = self.agent_dir(agent_id) / payload_ref
        try:
            return path.read_bytes()
        except OSError:
            return None

    # -- garbage collection --------------------------------------------------

    def gc(self, keep_last_k: int, period_steps: int | None = None) -> int:
        """Delete payload blobs no live agent can still need; never touch records.

        Per agent, keeps the blobs of the ``keep_last_k`` most recent records
        plus every record still selectable by a step-aligned read from the
        slowest live agent. When ``period_steps`` is given, stale agents (see
        stale_agent_ids) do not count as live for that computation. Orphan
        blobs and old temp files go too. Deletion failures are logged and left
        for the next pass.
        """
        if keep_last_k < 2:
            raise ValueError(f"keep_last_k must be >= 2, got {keep_last_k}")
        view = self.read_population(self_id=-1)
        newest = {a: recs[-1].step for a, recs in view.agents.items() if recs}
        live = set(newest)
        if period_steps:
            live -= stale_agent_ids(view, period_steps)
        slowest = min((newest[a] for a in live), default=None)
        removed = 0
        for agent_id, recs in view.agents.items():
            keep = {r.payload_ref for r in recs[-keep_last_k:]}
            if slowest is None:
                keep = {r.payload_ref for r in recs}
            else:
                reachable = [r.step for r in recs if r.step <= slowest]
                if reachable:
                    floor = max(reachable)
                    keep |= {r.payload_ref for r in recs if r.step >= floor}
                else:
                    # the slowest agent has not caught up to this one's first
                    # record yet; everything is still selectable eventually
                    keep = {r.payload_ref for r in recs}
            removed += self._sweep_agent_dir(agent_id, keep)
        return removed

    def _sweep_agent_dir(self, agent_id: int, keep: set[str]) -> int:
        adir = self.agent_dir(agent_id)
        removed = 0
        try:
            names = os.listdir(adir)
        except OSError:
            return 0
        now = time.time()
        for name in names:
            path = adir / name
            if name.endswith(".bin") and name not in keep:
                pass
            elif ".tmp" in name:
                try:
                    if now - path.stat().st_mtime < 300:
                        continue  # possibly a live writer's in-flight file
                except OSError:
                    continue
            else:
                continue
            try:
                path.unlink()
                removed += 1
            except OSError as exc:
                logger.warning("gc could not remove %s: %s (will retry)", path, exc)
        return removed


class RecordWriter:
    """Single writer for one agent's directory.

    Re-opening a directory after a crash resumes from whatever publish
    history is visible on disk (the in-memory list and the wall_seq counter
    are rebuilt from ``records.jsonl``).
    """

    def __init__(self, workspace: Workspace, agent_id: int):
        self.workspace = workspace
        self.agent_id = agent_id
        self.dir = workspace.agent_dir(agent_id)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise WorkspaceError(f"cannot create agent dir {self.dir}: {exc}")
        view = PopulationView()
        self.records = workspace._read_agent(agent_id, view)
        # serialized prefix of the records file, so a publish appends one line
        # instead of re-encoding the whole history
        self._lines = [r.to_json() for r in self.records]

    @property
    def next_seq(self) -> int:
        return self.records[-1].wall_seq + 1 if self.records else 0

    def publish(self, record: CheckpointRecord, payload: bytes, fault_hook=None) -> CheckpointRecord:
        """Durably publish (payload blob first, record second) and return the
        stamped record.

        ``fault_hook(stage)`` is a test seam invoked between the publish
        steps; production callers leave it None.
        """
        record.validate()
        if record.agent_id != self.agent_id:
            raise ValueError(f"record for agent {record.agent_id} via writer {self.agent_id}")
        if self.records and record.step < self.records[-1].step:
            raise ValueError(
                f"step must be nondecreasing: {record.step} < {self.records[-1].step}"
            )
        hook = fault_hook or (lambda stage: None)
        seq = self.next_seq
        record.wall_seq = seq
        record.payload_ref = f"{self.agent_id}_{record.step}_{seq}.bin"

        blob_path = self.dir / record.payload_ref
        _atomic_write_bytes(blob_path, payload, self.workspace.fsync, hook)
        hook("blob_visible")

        line = record.to_json()
        body = ("\n".join(self._lines + [line]) + "\n").encode("utf-8")
        _atomic_write_bytes(self.dir / RECORDS_FILE, body, self.workspace.fsync, hook)
        hook("record_visible")

        self.records.append(record)
        self._lines.append(line)
        return record


def _atomic_write_bytes(path: Path, data: bytes, fsync: bool, hook=lambda stage: None) -> None:
    """write tmp -> fsync -> rename, optionally fsyncing the directory after."""
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            hook("tmp_written")
            if fsync:
                fh.flush()
                os.fsync(fh.fileno())
        hook("tmp_synced")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    if fsync:
        dfd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)


# -- module-level operations (the documented protocol surface) ---------------


def publish(root, record: CheckpointRecord, payload: bytes, fsync: bool = True) -> CheckpointRecord:
    """One-shot publish; long-lived agents should hold a RecordWriter instead."""
    return Workspace(root, fsync=fsync).writer(record.agent_id).publish(record, payload)


def read_population(root, self_id: int, self_step: int = 0) -> PopulationView:
    return Workspace(root).read_population(self_id, self_step)


def aligned_snapshot(view: PopulationView, self_step: int) -> list[tuple[int, CheckpointRecord]]:
    """Per agent, the record with the largest step <= self_step.

    Ties break towards the largest wall_seq. Agents whose earliest record is
    ahead of self_step (late joiners, from our perspective) are excluded;
    agents that stopped publishing long ago still contribute their latest
    eligible record. Pure function: identical inputs give identical output,
    ordered by agent id.
    """
    out = []
    for agent_id in sorted(view.agents):
        eligible = [r for r in view.agents[agent_id] if r.step <= self_step]
        if not eligible:
            continue
        out.append((agent_id, max(eligible, key=lambda r: (r.step, r.wall_seq))))
    return out


def stale_agent_ids(view: PopulationView, period_steps: int, lag_periods: int = STALE_LAG_PERIODS) -> set[int]:
    """Agents whose newest record lags the population median by more than
    ``lag_periods`` ranking periods. Stale agents stay in the rankings but
    are never used as replacement sources."""
    newest = {a: recs[-1].step for a, recs in view.agents.items() if recs}
    if not newest:
        return set()
    median = statistics.median(newest.values())
    cutoff = median - lag_periods * period_steps
    return {a for a, s in newest.items() if s < cutoff}


def gc_workspace(root, keep_last_k: int, period_steps: int | None = None) -> int:
    return Workspace(root).gc(keep_last_k, period_steps)
