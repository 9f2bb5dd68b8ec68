"""Agent backends and the structured prompt/parse boundary.

Raw reasoning text never flows between turns. Each utterance is reduced by a
role-specific parser to structured fields (an answer, or a verdict plus a
one-line reason), and prompts are rendered from those fields alone. Three
backends share one contract: seeded mocks with known ground-truth behavior,
a trainable tabular toy, and a remote chat-completions client.
"""

from __future__ import annotations

import json
import re
import string
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Dict, List, Optional, Protocol, Tuple

from .core import Role, TaskKind, Verdict
from .gspo import ToyPolicy
from .vote import normalize_answer

_OPTION_LETTERS = "ABCD"


@dataclass(frozen=True)
class PromptContext:
    """Structured prompt fields for one invocation; no raw prior reasoning."""

    question: str
    role: Role
    task_kind: TaskKind
    turn: int
    pending_answer: Optional[str] = None
    pending_vote: int = 0
    last_review: Optional[Tuple[Verdict, str]] = None


@dataclass(frozen=True)
class Utterance:
    """One generated response with its token accounting.

    `tokens` and `logp` are filled by trainable backends so the credit layer can
    recompute sequence ratios.
    """

    text: str
    prompt_tokens: int
    completion_tokens: int
    tokens: Optional[Tuple[int, ...]] = None
    logp: Optional[float] = None


class AgentBackend(Protocol):
    trainable: bool

    def generate(
        self, ctx: PromptContext, n: int, temperature: float, max_tokens: int, rng
    ) -> List[Utterance]: ...


_REVIEWER_TEMPLATE = """{context}

You are a careful reasoning assistant.
Check whether the current pending final answer is correct for the original math problem.
First line: RIGHT or WRONG.
Second line: one short reason.
Do not write a new solution or a new final answer.

Review:"""

_PROPOSER_NUMERIC_TEMPLATE = """{context}

Solve the original math problem directly.
If there is a pending solution or short review feedback, use it only as a hint.
Keep the reasoning concise.
End with exactly one final line: Final answer: <number>.

Solution:"""

_PROPOSER_OPTION_TEMPLATE = """{context}

Solve the original multiple-choice science question directly.
If there is a pending solution or short review feedback, use it only as a hint.
Keep one concise chain of thought; do not branch into alternatives.
Choose exactly one option letter from A, B, C, and D.
End with exactly one final line: Final answer: <A/B/C/D>.

Solution:"""


def render_prompt(ctx: PromptContext) -> str:
    """Render the role template with the structured context block.

    Field order is fixed: question, pending answer (if any), vote, last review
    (if any). Identical contexts render to identical bytes.
    """
    lines = [f"Question: {ctx.question}"]
    if ctx.pending_answer is not None:
        lines.append(f"Pending answer: {ctx.pending_answer}")
    lines.append(f"Pending vote: {ctx.pending_vote}")
    if ctx.last_review is not None:
        verdict, reason = ctx.last_review
        word = "RIGHT" if verdict is Verdict.POSITIVE else "WRONG"
        lines.append(f"Last review: {word} - {reason}")
    context = "\n".join(lines)
    if ctx.role is Role.REVIEWER:
        return _REVIEWER_TEMPLATE.format(context=context)
    if ctx.task_kind is TaskKind.OPTION:
        return _PROPOSER_OPTION_TEMPLATE.format(context=context)
    return _PROPOSER_NUMERIC_TEMPLATE.format(context=context)


_PUNCT_TABLE = str.maketrans("", "", string.punctuation + "\u2019\u201c\u201d")


def parse_reviewer(utterance: str) -> Verdict:
    """First non-empty line, punctuation stripped, must be exactly RIGHT or WRONG."""
    for line in utterance.splitlines():
        word = line.translate(_PUNCT_TABLE).strip()
        if not word:
            continue
        folded = word.casefold()
        if folded == "right":
            return Verdict.POSITIVE
        if folded == "wrong":
            return Verdict.NEGATIVE
        return Verdict.INVALID
    return Verdict.INVALID


def parse_review_reason(utterance: str) -> str:
    """The one-line reason following the verdict line, or an empty string."""
    seen_verdict_line = False
    for line in utterance.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if not seen_verdict_line:
            seen_verdict_line = True
            continue
        return stripped
    return ""


_ANSWER_MARKER = re.compile(r"final answer\s*:", re.IGNORECASE)
_BOXED = re.compile(r"\\?boxed\s*\{([^{}]*)\}")


def parse_proposer(utterance: str, task_kind: TaskKind) -> Optional[str]:
    """Extract and normalize the payload after the last `Final answer:` marker.

    The boxed form used by some templates is unwrapped before normalization.
    Returns None when no marker is present or the payload does not parse.
    """
    last = None
    for match in _ANSWER_MARKER.finditer(utterance):
        last = match
    if last is None:
        return None
    payload = utterance[last.end():].splitlines()[0] if utterance[last.end():] else ""
    boxed = _BOXED.search(payload)
    if boxed is not None:
        payload = boxed.group(1)
    return normalize_answer(payload, task_kind)


@dataclass(frozen=True)
class MockAgentSpec:
    """Stochastic stand-in for a pretrained agent, with tunable competence.

    The proposer's correctness probability is context dependent: it uses
    p_correct_hinted when a pending answer with a positive vote (or the gold
    answer itself) is visible, p_correct_fresh otherwise. That dependence is
    what makes the phase signal informative enough to learn from.
    """

    role: Role
    p_correct_fresh: float = 0.5
    p_correct_hinted: float = 0.8
    p_judge_correct: float = 0.9
    p_invalid: float = 0.0
    tokens_per_call: int = 80

    def __post_init__(self) -> None:
        for name in ("p_correct_fresh", "p_correct_hinted", "p_judge_correct", "p_invalid"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        if self.p_judge_correct + self.p_invalid > 1.0:
            raise ValueError("p_judge_correct + p_invalid must not exceed 1")


def _wrong_answer(gold: str, task_kind: TaskKind) -> str:
    if task_kind is TaskKind.OPTION:
        idx = _OPTION_LETTERS.index(gold)
        return _OPTION_LETTERS[(idx + 1) % len(_OPTION_LETTERS)]
    return str(Decimal(gold) + 1)


def _split_tokens(total: int) -> Tuple[int, int]:
    half = total // 2
    return half, total - half


_INVALID_REVIEW_TEXT = "The answer seems fine to me overall."


def mock_generate(
    spec: MockAgentSpec, ctx: PromptContext, gold: str, n: int, rng
) -> List[Utterance]:
    """Emit n mock utterances whose parse outcomes follow the spec probabilities."""
    prompt_tokens, completion_tokens = _split_tokens(spec.tokens_per_call)
    out: List[Utterance] = []
    for _ in range(n):
        if spec.role is Role.PROPOSER:
            hinted = ctx.pending_answer is not None and (
                ctx.pending_vote > 0 or ctx.pending_answer == gold
            )
            p_correct = spec.p_correct_hinted if hinted else spec.p_correct_fresh
            answer = gold if rng.random() < p_correct else _wrong_answer(gold, ctx.task_kind)
            text = f"Worked through the steps once more.\nFinal answer: {answer}"
        else:
            pending_correct = ctx.pending_answer == gold
            u = rng.random()
            if u < spec.p_invalid:
                text = _INVALID_REVIEW_TEXT
            else:
                correct_judgment = u < spec.p_invalid + spec.p_judge_correct
                says_right = pending_correct if correct_judgment else not pending_correct
                if says_right:
                    text = "RIGHT\nThe arithmetic checks out."
                else:
                    text = "WRONG\nOne of the steps does not hold."
        out.append(Utterance(text=text, prompt_tokens=prompt_tokens, completion_tokens=completion_tokens))
    return out


class MockAgent:
    """Seeded mock backend; ground truth is bound per task by the orchestrator."""

    trainable = False

    def __init__(self, spec: MockAgentSpec) -> None:
        self.spec = spec
        self.gold: Optional[str] = None

    def bind_gold(self, gold: str) -> None:
        self.gold = gold

    def generate(self, ctx: PromptContext, n: int, temperature: float, max_tokens: int, rng) -> List[Utterance]:
        if self.gold is None:
            raise RuntimeError("mock agent used before ground truth was bound")
        return mock_generate(self.spec, ctx, self.gold, n, rng)


class ToyAgent:
    """Trainable tabular backend: one toy policy per observed context key.

    The first sampled token decides the structured payload (the answer digit or
    the verdict); the remaining tokens are inert filler so sequence-length
    normalization in the credit layer is exercised nontrivially. Decoding
    temperature is ignored, the tabular policy is sampled as-is.
    """

    trainable = True

    def __init__(self, role: Role, vocab: int = 16, seq_len: int = 4) -> None:
        if vocab < 2 or seq_len < 1:
            raise ValueError("vocab must be >= 2 and seq_len >= 1")
        self.role = role
        self.vocab = vocab
        self.seq_len = seq_len
        self.policies: Dict[str, ToyPolicy] = {}

    def context_key(self, ctx: PromptContext) -> str:
        if self.role is Role.REVIEWER:
            return f"{ctx.question}\x1f{ctx.pending_answer}"
        return ctx.question

    def policy_for(self, ctx: PromptContext) -> ToyPolicy:
        key = self.context_key(ctx)
        if key not in self.policies:
            self.policies[key] = ToyPolicy.uniform(self.vocab)
        return self.policies[key]

    def set_policy(self, ctx: PromptContext, policy: ToyPolicy) -> None:
        self.policies[self.context_key(ctx)] = policy

    def _render(self, tokens: Tuple[int, ...], ctx: PromptContext) -> str:
        head = tokens[0]
        filler = " ".join(f"t{t}" for t in tokens[1:])
        if self.role is Role.REVIEWER:
            word = "RIGHT" if head < self.vocab // 2 else "WRONG"
            return f"{word}\nscratch {filler}".rstrip()
        if ctx.task_kind is TaskKind.OPTION:
            payload = _OPTION_LETTERS[head % len(_OPTION_LETTERS)]
        else:
            payload = str(head)
        return f"scratch {filler}\nFinal answer: {payload}"

    def generate(self, ctx: PromptContext, n: int, temperature: float, max_tokens: int, rng) -> List[Utterance]:
        policy = self.policy_for(ctx)
        prompt_tokens = len(render_prompt(ctx).split())
        out: List[Utterance] = []
        for _ in range(n):
            tokens = policy.sample_sequence(self.seq_len, rng)
            out.append(
                Utterance(
                    text=self._render(tokens, ctx),
                    prompt_tokens=prompt_tokens,
                    completion_tokens=self.seq_len,
                    tokens=tokens,
                    logp=policy.sequence_logprob(tokens),
                )
            )
        return out

    def score(self, ctx: PromptContext, utterance: Utterance) -> float:
        if utterance.tokens is None:
            raise ValueError("cannot score an utterance without its token sequence")
        return self.policy_for(ctx).sequence_logprob(utterance.tokens)

    def snapshot_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for key in sorted(self.policies):
            for token, logit in enumerate(self.policies[key].logits):
                rows.append(
                    {
                        "role": self.role.label,
                        "context_key": key,
                        "token": token,
                        "logit": repr(float(logit)),
                    }
                )
        return rows

    def load_rows(self, rows: List[Dict[str, object]]) -> None:
        by_key: Dict[str, Dict[int, float]] = {}
        for row in rows:
            if row["role"] != self.role.label:
                continue
            by_key.setdefault(str(row["context_key"]), {})[int(row["token"])] = float(row["logit"])
        for key, logit_map in by_key.items():
            logits = [logit_map[t] for t in range(self.vocab)]
            self.policies[key] = ToyPolicy(logits)


class BackendError(Exception):
    """A backend failed permanently; the current task aborts as failed."""


@dataclass
class RemoteEndpointConfig:
    base_url: str
    model: str
    api_key: Optional[str] = None
    api_key_env: str = "PARLEY_API_KEY"
    timeout: float = 60.0
    max_retries: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 8.0


_TRANSIENT_STATUSES = {408, 409, 429, 500, 502, 503, 504}


def _requests_transport(url: str, headers: Dict[str, str], payload: dict, timeout: float):
    import requests

    response = requests.post(url, headers=headers, data=json.dumps(payload), timeout=timeout)
    try:
        body = response.json()
    except ValueError:
        body = {}
    return response.status_code, body


class RemoteAgent:
    """Chat-completions client with capped exponential backoff on transient errors.

    Requests are issued sequentially so downstream parsing order is
    deterministic. Remote backends cannot report per-token log-probabilities,
    so they never participate in generation-credit updates.
    """

    trainable = False

    def __init__(
        self,
        config: RemoteEndpointConfig,
        transport: Optional[Callable] = None,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.transport = transport or _requests_transport
        self.sleeper = sleeper

    def _api_key(self) -> str:
        import os

        if self.config.api_key:
            return self.config.api_key
        return os.environ.get(self.config.api_key_env, "")

    def _one_completion(self, prompt: str, temperature: float, max_tokens: int) -> Utterance:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        key = self._api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        last_error: Optional[str] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                delay = min(self.config.backoff_base * (2 ** (attempt - 1)), self.config.backoff_cap)
                self.sleeper(delay)
            try:
                status, body = self.transport(url, headers, payload, self.config.timeout)
            except Exception as exc:  # connection-level failure, retry
                last_error = f"transport error: {exc}"
                continue
            if status in _TRANSIENT_STATUSES:
                last_error = f"transient HTTP {status}"
                continue
            if status != 200:
                raise BackendError(f"endpoint returned HTTP {status}: {body}")
            choices = body.get("choices") or []
            content = ""
            if choices:
                content = (choices[0].get("message") or {}).get("content") or ""
            usage = body.get("usage") or {}
            return Utterance(
                text=content,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            )
        raise BackendError(f"endpoint unreachable after {self.config.max_retries + 1} attempts: {last_error}")

    def generate(self, ctx: PromptContext, n: int, temperature: float, max_tokens: int, rng=None) -> List[Utterance]:
        prompt = render_prompt(ctx)
        return [self._one_completion(prompt, temperature, max_tokens) for _ in range(n)]
