"""Speak/skip controller layer: counterfactual regret accounting and regret matching.

Each controller decision realizes a value for both action modes. The regret of an
action against the policy in force is

    re(a) = v_a - (p_skip * v_skip + p_speak * v_speak)

accumulated per phase across the whole run. The behavioral policy at a phase is
the positive-part normalization of cumulative regret (uniform when nothing is
positive), and the visitation-weighted average of the per-decision policies is
the object with the no-regret guarantee.

Update order per decision is fixed: read the current policy, sample, realize
values, compute regret against that same pre-update policy, accumulate, snapshot
the pre-update policy into the running average, then re-match to produce the
policy for the next visit.
"""

from __future__ import annotations

import csv
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple

from .core import ActionMode, Phase


class ActionValues(NamedTuple):
    v_skip: float
    v_speak: float


class PolicyAtPhase(NamedTuple):
    p_skip: float
    p_speak: float


UNIFORM_POLICY = PolicyAtPhase(0.5, 0.5)


def regret_match(cumulative: Tuple[float, float]) -> PolicyAtPhase:
    """Positive-part normalization of cumulative regret; uniform fallback."""
    pos_skip = max(cumulative[0], 0.0)
    pos_speak = max(cumulative[1], 0.0)
    total = pos_skip + pos_speak
    if total > 0.0:
        return PolicyAtPhase(pos_skip / total, pos_speak / total)
    return UNIFORM_POLICY


def instantaneous_regret(values: ActionValues, policy: PolicyAtPhase) -> Tuple[float, float]:
    """Per-action regret against the expected value under the given policy.

    The policy-weighted sum of the two components is identically zero.
    """
    ev = policy.p_skip * values.v_skip + policy.p_speak * values.v_speak
    return (values.v_skip - ev, values.v_speak - ev)


def sample_action(policy: PolicyAtPhase, rng) -> ActionMode:
    """Draw one action, consuming exactly one uniform variate.

    Degenerate policies do not depend on the drawn value, so a (0, 1) policy
    speaks under every seed.
    """
    return ActionMode.SPEAK if rng.random() < policy.p_speak else ActionMode.SKIP


class RegretTable:
    """Mutable per-controller store of cumulative regret, visits and policy sums.

    Unvisited phases have zero cumulative regret and a uniform current policy.
    All updates for one controller must be applied serially in global episode
    order; reads are plain snapshots.
    """

    def __init__(self) -> None:
        self.cumulative: Dict[Phase, List[float]] = {}
        self.visits: Dict[Phase, int] = {}
        self.policy_sum: Dict[Phase, List[float]] = {}
        self.current: Dict[Phase, PolicyAtPhase] = {}

    def policy_at(self, phase: Phase) -> PolicyAtPhase:
        return self.current.get(phase, UNIFORM_POLICY)

    def cumulative_at(self, phase: Phase) -> Tuple[float, float]:
        entry = self.cumulative.get(phase)
        return (entry[0], entry[1]) if entry is not None else (0.0, 0.0)

    def accumulate(self, phase: Phase, regret: Tuple[float, float]) -> None:
        entry = self.cumulative.setdefault(phase, [0.0, 0.0])
        entry[0] += regret[0]
        entry[1] += regret[1]

    def record_visit(self, phase: Phase, policy: Optional[PolicyAtPhase] = None) -> None:
        """Count one decision at `phase`, snapshotting the policy used to sample."""
        if policy is None:
            policy = self.policy_at(phase)
        self.visits[phase] = self.visits.get(phase, 0) + 1
        entry = self.policy_sum.setdefault(phase, [0.0, 0.0])
        entry[0] += policy.p_skip
        entry[1] += policy.p_speak

    def refresh_policy(self, phase: Phase) -> PolicyAtPhase:
        matched = regret_match(self.cumulative_at(phase))
        self.current[phase] = matched
        return matched

    def observe(self, phase: Phase, values: ActionValues) -> Tuple[PolicyAtPhase, Tuple[float, float]]:
        """Apply the full fixed-order update for one decision.

        Returns the pre-update policy and the instantaneous regret, so callers
        can log exactly what was applied.
        """
        policy = self.policy_at(phase)
        regret = instantaneous_regret(values, policy)
        self.accumulate(phase, regret)
        self.record_visit(phase, policy)
        self.refresh_policy(phase)
        return policy, regret

    def observe_skip_only(self, phase: Phase, v_skip: float) -> Tuple[PolicyAtPhase, Tuple[float, float]]:
        """Degraded update for a skip realized without a shadow rollout.

        The untaken speak value is unknown; it enters the expectation as a
        neutral 0 and only the skip component of cumulative regret is touched.
        """
        policy = self.policy_at(phase)
        ev = policy.p_skip * v_skip
        regret = (v_skip - ev, 0.0)
        self.accumulate(phase, regret)
        self.record_visit(phase, policy)
        self.refresh_policy(phase)
        return policy, regret

    def average_policy(self, phase: Phase) -> PolicyAtPhase:
        """Visitation-weighted mean of the policies in force; uniform if unvisited."""
        count = self.visits.get(phase, 0)
        if count == 0:
            return UNIFORM_POLICY
        sums = self.policy_sum[phase]
        return PolicyAtPhase(sums[0] / count, sums[1] / count)

    def phases(self) -> Iterator[Phase]:
        seen = set(self.cumulative) | set(self.visits)
        return iter(sorted(seen))

    def max_positive_regret(self, phase: Phase) -> float:
        cum = self.cumulative_at(phase)
        return max(cum[0], cum[1], 0.0)


class AveragedController:
    """Frozen view of per-phase average policies, used by the inference loop."""

    def __init__(self, policies: Optional[Dict[Phase, PolicyAtPhase]] = None) -> None:
        self.policies: Dict[Phase, PolicyAtPhase] = dict(policies or {})

    @classmethod
    def from_table(cls, table: RegretTable) -> "AveragedController":
        return cls({phase: table.average_policy(phase) for phase in table.phases()})

    def policy_at(self, phase: Phase) -> PolicyAtPhase:
        return self.policies.get(phase, UNIFORM_POLICY)


SNAPSHOT_FIELDS = [
    "controller",
    "vote_bucket",
    "turn_bucket",
    "re_skip",
    "re_speak",
    "visits",
    "avg_p_skip",
    "avg_p_speak",
]


def snapshot_rows(tables: Dict[str, RegretTable]) -> List[Dict[str, object]]:
    """Flatten controller tables into the checkpoint record format."""
    rows: List[Dict[str, object]] = []
    for name in sorted(tables):
        table = tables[name]
        for phase in table.phases():
            cum = table.cumulative_at(phase)
            avg = table.average_policy(phase)
            rows.append(
                {
                    "controller": name,
                    "vote_bucket": phase.vote_bucket,
                    "turn_bucket": phase.turn_bucket,
                    "re_skip": repr(cum[0]),
                    "re_speak": repr(cum[1]),
                    "visits": table.visits.get(phase, 0),
                    "avg_p_skip": repr(avg.p_skip),
                    "avg_p_speak": repr(avg.p_speak),
                }
            )
    return rows


def write_snapshot_csv(path: str, tables: Dict[str, RegretTable]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SNAPSHOT_FIELDS)
        writer.writeheader()
        for row in snapshot_rows(tables):
            writer.writerow(row)


def load_average_policies(path: str) -> Dict[str, AveragedController]:
    """Rebuild averaged controllers from a snapshot CSV.

    The stored average probabilities are used verbatim so that a save/load
    round trip reproduces inference decisions bit for bit.
    """
    controllers: Dict[str, Dict[Phase, PolicyAtPhase]] = {}
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            phase = Phase(int(row["vote_bucket"]), int(row["turn_bucket"]))
            policy = PolicyAtPhase(float(row["avg_p_skip"]), float(row["avg_p_speak"]))
            controllers.setdefault(row["controller"], {})[phase] = policy
    return {name: AveragedController(policies) for name, policies in controllers.items()}
