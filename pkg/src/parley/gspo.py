"""Generation-credit layer: role rewards, group advantages, clipped sequence loss.

Rewards are structural only: the proposer is scored on its extracted answer, the
reviewer on the correctness of its judgment, never on reasoning text. A group of
G sampled utterances is standardized into advantages

    A_j = (r_j - mean) / (std + eps)        (population std, divide by G)

and optimized with the clipped surrogate over length-normalized sequence ratios

    rho_j  = exp((logp_new_j - logp_old_j) / len_j)
    loss   = -(1/G) * sum_j min(rho_j * A_j, clip(rho_j, 1-eps', 1+eps') * A_j)

The trainable policy here is a tabular toy: one shared categorical over a small
token vocabulary, applied independently at each sequence position, which keeps
the analytic gradient exact and checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Verdict


def proposer_reward(answer: Optional[str], gold: str) -> int:
    """+1 for the gold answer, -1 otherwise; unparseable proposals score -1."""
    if answer is None:
        return -1
    return 1 if answer == gold else -1


def reviewer_reward(verdict: Verdict, pending_correct: bool) -> int:
    """+1 for a correct judgment, -1 for a wrong one, 0 for an invalid one."""
    if verdict is Verdict.INVALID:
        return 0
    agrees = verdict is Verdict.POSITIVE
    return 1 if agrees == pending_correct else -1


def normalize_advantages(rewards: Sequence[float], epsilon: float) -> List[float]:
    """Standardize a reward group with the population standard deviation.

    A zero-variance group yields all-zero advantages (the numerators vanish),
    which makes the downstream update a no-op.
    """
    count = len(rewards)
    if count == 0:
        raise ValueError("cannot normalize an empty reward group")
    mean = sum(rewards) / count
    variance = sum((r - mean) ** 2 for r in rewards) / count
    std = math.sqrt(variance)
    denom = std + epsilon
    if denom == 0.0:
        return [0.0] * count
    return [(r - mean) / denom for r in rewards]


def importance_ratio(logp_new: float, logp_old: float, length: int) -> float:
    """Length-normalized sequence ratio: the geometric mean of per-token ratios."""
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise ValueError("non-finite log-probability; the policy evaluation is broken")
    return math.exp((logp_new - logp_old) / length)


@dataclass
class ToyPolicy:
    """Product of per-position categoricals sharing one logit vector."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @classmethod
    def uniform(cls, vocab: int) -> "ToyPolicy":
        return cls(np.zeros(vocab))

    @property
    def vocab(self) -> int:
        return int(self.logits.shape[0])

    def log_probs(self) -> np.ndarray:
        shifted = self.logits - self.logits.max()
        return shifted - math.log(np.exp(shifted).sum())

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def sequence_logprob(self, tokens: Sequence[int]) -> float:
        logp = self.log_probs()
        return float(sum(logp[t] for t in tokens))

    def sample_sequence(self, length: int, rng) -> Tuple[int, ...]:
        """Draw `length` tokens, one uniform variate per position."""
        cumulative = np.cumsum(self.probs())
        out = []
        for _ in range(length):
            u = rng.random()
            out.append(int(np.searchsorted(cumulative, u, side="right")))
        return tuple(min(t, self.vocab - 1) for t in out)


@dataclass
class CandidateGroup:
    """G sampled sequences with their at-sampling log-probs and rewards."""

    tokens: List[Tuple[int, ...]]
    logp_old: List[float]
    rewards: List[float]
    lengths: List[int]
    advantages: List[float]
    reward_mean: float
    reward_std: float

    @classmethod
    def build(
        cls,
        tokens: Sequence[Sequence[int]],
        logp_old: Sequence[float],
        rewards: Sequence[float],
        adv_epsilon: float,
    ) -> "CandidateGroup":
        if not (len(tokens) == len(logp_old) == len(rewards)):
            raise ValueError("candidate lists must have equal length")
        if len(tokens) == 0:
            raise ValueError("a candidate group needs at least one member")
        lengths = [len(seq) for seq in tokens]
        if any(length < 1 for length in lengths):
            raise ValueError("every candidate needs at least one token")
        mean = sum(rewards) / len(rewards)
        std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / len(rewards))
        return cls(
            tokens=[tuple(seq) for seq in tokens],
            logp_old=list(logp_old),
            rewards=list(rewards),
            lengths=lengths,
            advantages=normalize_advantages(rewards, adv_epsilon),
            reward_mean=mean,
            reward_std=std,
        )

    @property
    def size(self) -> int:
        return len(self.tokens)


def _ratios(group: CandidateGroup, policy: ToyPolicy) -> List[float]:
    return [
        importance_ratio(policy.sequence_logprob(seq), old, length)
        for seq, old, length in zip(group.tokens, group.logp_old, group.lengths)
    ]


def gspo_loss(group: CandidateGroup, policy: ToyPolicy, clip_eps: float) -> float:
    total = 0.0
    for rho, adv in zip(_ratios(group, policy), group.advantages):
        clipped = min(max(rho, 1.0 - clip_eps), 1.0 + clip_eps)
        total += min(rho * adv, clipped * adv)
    return -total / group.size


def gspo_gradient(group: CandidateGroup, policy: ToyPolicy, clip_eps: float) -> np.ndarray:
    """Exact gradient of the clipped loss w.r.t. the shared logits.

    The min/clip selector is treated as piecewise constant: a candidate whose
    clipped branch is active contributes nothing, because the clipped value has
    no logits dependence there. For the unclipped branch,

        d rho / d z = rho * (counts / len - softmax(z))

    with `counts` the token occurrence vector of the sequence.
    """
    probs = policy.probs()
    grad = np.zeros_like(probs)
    for seq, old, length, adv in zip(group.tokens, group.logp_old, group.lengths, group.advantages):
        rho = importance_ratio(policy.sequence_logprob(seq), old, length)
        clipped = min(max(rho, 1.0 - clip_eps), 1.0 + clip_eps)
        if rho * adv > clipped * adv:
            continue
        counts = np.bincount(np.asarray(seq), minlength=policy.vocab).astype(np.float64)
        grad -= adv * rho * (counts / length - probs)
    return grad / group.size


def gspo_step(policy: ToyPolicy, group: CandidateGroup, learning_rate: float, clip_eps: float) -> ToyPolicy:
    """One gradient step on the logits; returns the updated policy."""
    grad = gspo_gradient(group, policy, clip_eps)
    return ToyPolicy(policy.logits - learning_rate * grad)


@dataclass
class GspoStepLog:
    """Structured record of one generation-credit update."""

    group_size: int
    rewards: List[float]
    reward_mean: float
    reward_std: float
    clip_fraction: float
    loss: float
    grad_norm: float


def gspo_update(
    policy: ToyPolicy, group: CandidateGroup, learning_rate: float, clip_eps: float
) -> Tuple[ToyPolicy, GspoStepLog]:
    """Apply one step and report the diagnostics that go into the run log."""
    ratios = _ratios(group, policy)
    clipped_selected = 0
    for rho, adv in zip(ratios, group.advantages):
        clipped = min(max(rho, 1.0 - clip_eps), 1.0 + clip_eps)
        if rho * adv > clipped * adv:
            clipped_selected += 1
    loss = gspo_loss(group, policy, clip_eps)
    grad = gspo_gradient(group, policy, clip_eps)
    updated = ToyPolicy(policy.logits - learning_rate * grad)
    log = GspoStepLog(
        group_size=group.size,
        rewards=list(group.rewards),
        reward_mean=group.reward_mean,
        reward_std=group.reward_std,
        clip_fraction=clipped_selected / group.size,
        loss=loss,
        grad_norm=float(np.linalg.norm(grad)),
    )
    return updated, log
