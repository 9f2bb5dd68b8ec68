"""Shared domain types: roles, actions, verdicts, phases, turn records, episode clock."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Tuple, Union


class Role(Enum):
    """The two fixed agent roles. Proposer carries index 1, reviewer index 2."""

    PROPOSER = 1
    REVIEWER = 2

    @property
    def index(self) -> int:
        return self.value

    @property
    def label(self) -> str:
        return self.name.lower()


class ActionMode(Enum):
    SKIP = "skip"
    SPEAK = "speak"


class Verdict(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INVALID = "invalid"


class TaskKind(Enum):
    NUMERIC = "numeric"
    OPTION = "option"


class Phase(NamedTuple):
    """Discrete controller state key: clamped pending vote plus saturated turn index."""

    vote_bucket: int
    turn_bucket: int


def clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))


def phase_of(vote: int, turn: int, clamp_bound: int, horizon: int) -> Phase:
    """Bucket a raw (vote, turn) pair into the finite controller state key.

    The vote is clamped to [-clamp_bound, +clamp_bound] and the turn saturates
    at the horizon, so the number of distinct phases is fixed up front.
    """
    if turn < 1:
        raise ValueError(f"turn must be >= 1, got {turn}")
    if clamp_bound < 1:
        raise ValueError(f"clamp_bound must be >= 1, got {clamp_bound}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    return Phase(clamp(vote, -clamp_bound, clamp_bound), min(turn, horizon))


def active_role(turn: int) -> Role:
    """Proposer acts on odd turns, reviewer on even turns."""
    if turn < 1:
        raise ValueError(f"turn must be >= 1, got {turn}")
    return Role.PROPOSER if turn % 2 == 1 else Role.REVIEWER


@dataclass(frozen=True)
class EpisodeClock:
    """Global decision clock with identity m = k * horizon + t.

    k counts started tasks, t is the turn inside the current task. m never
    resets between tasks; tasks that stop before the horizon leave a gap in m.
    """

    horizon: int
    k: int = 0
    t: int = 1

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 1 <= self.t <= self.horizon:
            raise ValueError(f"turn {self.t} outside [1, {self.horizon}]")
        if self.k < 0:
            raise ValueError("task count must be >= 0")

    @property
    def m(self) -> int:
        return self.k * self.horizon + self.t

    def next_turn(self) -> "EpisodeClock":
        return EpisodeClock(self.horizon, self.k, self.t + 1)

    def next_task(self) -> "EpisodeClock":
        return EpisodeClock(self.horizon, self.k + 1, 1)


ParseResult = Union[Verdict, str, None]


@dataclass(frozen=True)
class TurnRecord:
    """One executed turn, carrying enough raw material to replay it exactly.

    Trajectory token counts cover only the utterance that entered the trajectory;
    candidate groups and shadow rollouts are charged through the aux_* fields.
    `values` holds the realized (v_skip, v_speak) pair for learned controller
    decisions; v_speak is None when a skip was taken without a shadow rollout.
    """

    turn: int
    m: int
    actor: Optional[Role]
    action: ActionMode
    forced: bool
    phase_before: Optional[Phase]
    policy_used: Optional[Tuple[float, float]]
    utterance: Optional[str]
    parse_result: ParseResult
    values: Optional[Tuple[float, Optional[float]]]
    vote_after: int
    pending_after: Optional[str]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    aux_calls: int = 0
    aux_prompt_tokens: int = 0
    aux_completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.action is ActionMode.SKIP:
            if self.utterance is not None or self.prompt_tokens or self.completion_tokens:
                raise ValueError("a skipped turn carries no utterance and no trajectory tokens")


def derive_seed(seed: int, label: str) -> int:
    """Stable per-component child seed so independent streams never alias."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
