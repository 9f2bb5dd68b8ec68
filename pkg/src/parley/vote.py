"""Pending-answer state machine.

The system holds exactly one candidate answer at a time. Positive reviews add a
vote, negative reviews subtract one, invalid reviews leave it alone. Re-proposing
the same (normalized) answer keeps the accumulated vote; a distinct answer
replaces it and resets the vote to zero. The final answer is simply the latest
proposal, regardless of its vote.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, replace
from decimal import Decimal, InvalidOperation
from typing import Optional

from .core import TaskKind, Verdict

_CURRENCY = "$€£¥"
_OPTION_LETTERS = "ABCD"


def normalize_answer(raw: Optional[str], task_kind: TaskKind) -> Optional[str]:
    """Canonicalize an extracted answer payload, or None if it does not parse.

    Numeric answers are compared as exact decimal strings (no float tolerance):
    formatting characters are stripped, then the value is reduced to a canonical
    form without sign/zero artifacts ("  1,234 " -> "1234", "+3.50" -> "3.5").
    Option answers reduce to a single letter in A-D.
    """
    if raw is None:
        return None
    text = raw.strip()
    if not text:
        return None

    if task_kind is TaskKind.OPTION:
        letter = text.strip(string.whitespace + string.punctuation)
        if len(letter) == 1 and letter.upper() in _OPTION_LETTERS:
            return letter.upper()
        return None

    cleaned = text
    for ch in _CURRENCY + ",":
        cleaned = cleaned.replace(ch, "")
    cleaned = cleaned.strip()
    try:
        value = Decimal(cleaned)
    except (InvalidOperation, ValueError):
        return None
    if not value.is_finite():
        return None
    if value == 0:
        return "0"
    canonical = value.normalize()
    if canonical.as_tuple().exponent > 0:
        # keep plain integer notation instead of scientific ("1E+2" -> "100")
        canonical = canonical.quantize(Decimal(1))
    return str(canonical)


@dataclass(frozen=True)
class PendingAnswer:
    """The current candidate solution with its signed review count."""

    answer: str
    vote: int
    proposed_at_turn: int


def install_proposal(state: Optional[PendingAnswer], new_answer: str, turn: int) -> PendingAnswer:
    """Install a freshly parsed proposal.

    An identical normalized answer keeps its accumulated vote (only the
    provenance turn moves); a distinct answer replaces the old one at vote 0.
    """
    if not new_answer:
        raise ValueError("install_proposal requires a non-empty normalized answer")
    if state is not None and state.answer == new_answer:
        return replace(state, proposed_at_turn=turn)
    return PendingAnswer(answer=new_answer, vote=0, proposed_at_turn=turn)


def apply_verdict(state: PendingAnswer, verdict: Verdict) -> PendingAnswer:
    """Apply one review outcome to the pending vote (answer text never changes)."""
    if state is None:
        raise ValueError("no pending answer to review; the reviewer acted before any proposal")
    if verdict is Verdict.POSITIVE:
        return replace(state, vote=state.vote + 1)
    if verdict is Verdict.NEGATIVE:
        return replace(state, vote=state.vote - 1)
    return state


def final_answer(state: Optional[PendingAnswer]) -> Optional[str]:
    """The latest proposed answer; the vote does not gate finality."""
    return state.answer if state is not None else None
