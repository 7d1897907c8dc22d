"""Population ranking score and success-tolerance annealing.

Agents are ranked by a scalar that first rewards curriculum progress
(shrinking the success tolerance from its loose starting value towards the
final one) and, once the final tolerance is reached, rewards consecutive
successes directly. Tolerances are compared with a small relative slack so
branch selection stays stable after many 0.9x multiplications.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

# Relative slack used when comparing annealed tolerances for equality.
REL_TOL = 1e-9


@dataclass(frozen=True)
class ToleranceSchedule:
    """Current success tolerance plus the annealing rule that shrinks it."""

    initial: float = 0.075
    final: float = 0.01
    current: float = 0.075
    decay: float = 0.9
    trigger: float = 3.0  # anneal when mean consecutive successes exceed this

    def __post_init__(self):
        if not 0.0 < self.final <= self.initial:
            raise ValueError(f"need 0 < final <= initial, got {self.final}, {self.initial}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {self.decay}")
        lo = self.final * (1.0 - REL_TOL)
        hi = self.initial * (1.0 + REL_TOL)
        if not lo <= self.current <= hi:
            raise ValueError(
                f"current tolerance {self.current} outside [{self.final}, {self.initial}]"
            )

    @property
    def at_final(self) -> bool:
        return self.current <= self.final * (1.0 + REL_TOL)


@dataclass(frozen=True)
class EvalResult:
    """Mean consecutive successes over an evaluation window, and the tolerance used."""

    n_succ: float
    epsilon: float


def meta_objective(result: EvalResult, sched: ToleranceSchedule) -> float:
    """Score an evaluation for population ranking.

    While the tolerance is still above the final value the score is the
    fraction of the tolerance range already annealed away plus a small
    success term; at the final tolerance it switches to 1 + successes, which
    dominates every score attainable before the curriculum completes.
    """
    eps = result.epsilon
    if eps < sched.final * (1.0 - REL_TOL) or eps > sched.initial * (1.0 + REL_TOL):
        raise ValueError(
            f"tolerance {eps} outside schedule range [{sched.final}, {sched.initial}]"
        )
    if eps <= sched.final * (1.0 + REL_TOL):
        return 1.0 + result.n_succ
    return (sched.initial - eps) / (sched.initial - sched.final) + 0.01 * result.n_succ


def anneal(sched: ToleranceSchedule, result: EvalResult) -> ToleranceSchedule:
    """Shrink the tolerance once performance crosses the trigger (strictly).

    Idempotent at the final tolerance: max(decay * final, final) = final.
    """
    if result.n_succ > sched.trigger:
        return replace(sched, current=max(sched.decay * sched.current, sched.final))
    return sched
