"""Outer loop: turn alternation, forced first proposal, controller decisions,
generation-credit updates, trajectory assembly, early stopping, and the
inference loop over averaged policies.

Per turn the flow is: pick the acting role by parity (proposer odd, reviewer
even), let its controller decide speak/skip unless the decision is forced, and
on speak sample a candidate group for the credit update followed by one extra
utterance that alone enters the trajectory. Realized outcomes (with an optional
shadow rollout realizing the untaken speak) feed the controller's regret update.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .agents import (
    AgentBackend,
    BackendError,
    PromptContext,
    Utterance,
    parse_proposer,
    parse_review_reason,
    parse_reviewer,
)
from .controller import (
    ActionValues,
    AveragedController,
    PolicyAtPhase,
    RegretTable,
    UNIFORM_POLICY,
    sample_action,
)
from .core import (
    ActionMode,
    EpisodeClock,
    Phase,
    Role,
    TaskKind,
    TurnRecord,
    Verdict,
    active_role,
    derive_seed,
    phase_of,
)
from .datasets import Task
from .gspo import CandidateGroup, gspo_update, proposer_reward, reviewer_reward
from .vote import PendingAnswer, apply_verdict, final_answer, install_proposal

MODE_TRAIN = "train"
MODE_EVAL = "eval"

CONTROLLER_LEARNED = "learned"
CONTROLLER_RANDOM = "random"
CONTROLLER_REMOVED = "removed"


@dataclass
class TrainConfig:
    """Run configuration, including the ablation switches.

    `no_reviewer_controller` / `no_proposer_controller` remove the speak/skip
    layer for a role (the agent is invoked on every one of its turns), while the
    `random_*` flags keep the layer but pin it to a fixed uniform sampler with
    no learning. `no_reviewer` runs proposer-only self-refinement for the full
    horizon.
    """

    horizon: int = 5
    group_size: int = 4
    steps: int = 100
    envs: int = 1
    seed: int = 0
    clamp_bound: int = 3
    clip_eps: float = 0.2
    adv_eps: float = 1e-5
    learning_rate: float = 0.6
    temperature: float = 0.3
    max_tokens: int = 256
    stop_vote_threshold: int = 1
    shadow_rollout: bool = True
    freeze_controllers: bool = False
    freeze_reviewer_gspo: bool = False
    freeze_proposer_gspo: bool = False
    random_reviewer_controller: bool = False
    random_proposer_controller: bool = False
    no_reviewer_controller: bool = False
    no_proposer_controller: bool = False
    drop_vote_state: bool = False
    drop_iteration_state: bool = False
    no_reviewer: bool = False

    def __post_init__(self) -> None:
        if min(self.horizon, self.group_size, self.envs) < 1:
            raise ValueError("horizon, group_size and envs must all be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.clamp_bound < 1:
            raise ValueError("clamp_bound must be >= 1")

    def controller_mode(self, role: Role) -> str:
        if role is Role.REVIEWER and self.no_reviewer_controller:
            return CONTROLLER_REMOVED
        if role is Role.PROPOSER and self.no_proposer_controller:
            return CONTROLLER_REMOVED
        if self.freeze_controllers:
            return CONTROLLER_RANDOM
        if role is Role.REVIEWER and self.random_reviewer_controller:
            return CONTROLLER_RANDOM
        if role is Role.PROPOSER and self.random_proposer_controller:
            return CONTROLLER_RANDOM
        return CONTROLLER_LEARNED

    def gspo_frozen(self, role: Role) -> bool:
        if role is Role.REVIEWER:
            return self.freeze_reviewer_gspo
        return self.freeze_proposer_gspo


def phase_key(vote: int, turn: int, cfg: TrainConfig) -> Phase:
    """Controller state key with the ablation collapses applied."""
    raw_vote = 0 if cfg.drop_vote_state else vote
    phase = phase_of(raw_vote, turn, cfg.clamp_bound, cfg.horizon)
    if cfg.drop_iteration_state:
        phase = Phase(phase.vote_bucket, 1)
    return phase


def stop_rule(state: Optional[PendingAnswer], turn: int, cfg: TrainConfig) -> bool:
    """Stop at the horizon, or once a reviewer turn leaves the pending answer
    endorsed at or above the vote threshold."""
    if turn >= cfg.horizon:
        return True
    if turn % 2 == 0 and state is not None and state.vote >= cfg.stop_vote_threshold:
        return True
    return False


@dataclass
class RunRecord:
    """Per-task trace with trace-level cost accounting."""

    task_id: str
    k_index: int
    mode: str
    gold: str
    task_kind: TaskKind = TaskKind.NUMERIC
    turns: List[TurnRecord] = field(default_factory=list)
    final_answer: Optional[str] = None
    correct: bool = False
    total_prompt_tokens: int = 0
    total_completion_tokens: int = 0
    llm_calls: int = 0
    agents_spoken: int = 0
    failed: bool = False


class TaskSession:
    """One task episode, stepped turn by turn so environments can interleave."""

    def __init__(
        self,
        task: Task,
        backends: Dict[Role, AgentBackend],
        controllers: Dict[Role, RegretTable],
        cfg: TrainConfig,
        clock: EpisodeClock,
        rng: random.Random,
        mode: str = MODE_TRAIN,
        averaged: Optional[Dict[Role, AveragedController]] = None,
    ) -> None:
        if mode not in (MODE_TRAIN, MODE_EVAL):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == MODE_EVAL and averaged is None:
            raise ValueError("inference mode needs averaged controllers")
        self.task = task
        self.backends = backends
        self.controllers = controllers
        self.cfg = cfg
        self.clock = clock
        self.start_clock = clock
        self.rng = rng
        self.mode = mode
        self.averaged = averaged
        self.pending: Optional[PendingAnswer] = None
        self.last_review: Optional[Tuple[Verdict, str]] = None
        self.turns: List[TurnRecord] = []
        self.gspo_logs: List[dict] = []
        self.done = False
        self.failed = False

    def _context(self, role: Role) -> PromptContext:
        return PromptContext(
            question=self.task.question,
            role=role,
            task_kind=self.task.kind,
            turn=self.clock.t,
            pending_answer=self.pending.answer if self.pending else None,
            pending_vote=self.pending.vote if self.pending else 0,
            last_review=self.last_review,
        )

    def _generate(self, role: Role, ctx: PromptContext, n: int) -> List[Utterance]:
        backend = self.backends[role]
        # mocks need the task's ground truth; re-bind each call since sessions
        # from interleaved environments share backend objects
        bind = getattr(backend, "bind_gold", None)
        if bind is not None:
            bind(self.task.gold)
        return backend.generate(ctx, n, self.cfg.temperature, self.cfg.max_tokens, self.rng)

    def _policy_for(self, role: Role, phase: Phase, mode: str) -> PolicyAtPhase:
        if mode == CONTROLLER_RANDOM:
            return UNIFORM_POLICY
        if self.mode == MODE_EVAL:
            return self.averaged[role].policy_at(phase)
        return self.controllers[role].policy_at(phase)

    def step(self) -> bool:
        """Execute one turn; returns True once the task is finished."""
        if self.done:
            return True
        cfg = self.cfg
        t = self.clock.t
        role = Role.PROPOSER if cfg.no_reviewer else active_role(t)

        if role is Role.REVIEWER and self.pending is None:
            # nothing to review yet; no decision is made and nothing is charged
            self._finish_turn(
                TurnRecord(
                    turn=t,
                    m=self.clock.m,
                    actor=None,
                    action=ActionMode.SKIP,
                    forced=False,
                    phase_before=None,
                    policy_used=None,
                    utterance=None,
                    parse_result=None,
                    values=None,
                    vote_after=0,
                    pending_after=None,
                )
            )
            return self.done

        controller_mode = cfg.controller_mode(role)
        forced = role is Role.PROPOSER and (self.pending is None or cfg.no_reviewer)
        phase: Optional[Phase] = None
        policy: Optional[PolicyAtPhase] = None
        if forced or controller_mode == CONTROLLER_REMOVED:
            action = ActionMode.SPEAK
            forced = True
        else:
            phase = phase_key(self.pending.vote, t, cfg)
            policy = self._policy_for(role, phase, controller_mode)
            action = sample_action(policy, self.rng)

        pending_before = self.pending
        pending_correct_before = pending_before is not None and pending_before.answer == self.task.gold
        ctx = self._context(role)

        utterance: Optional[Utterance] = None
        parse_result = None
        new_answer_correct: Optional[bool] = None
        verdict_realized: Optional[Verdict] = None
        aux_calls = aux_prompt = aux_completion = 0

        try:
            if action is ActionMode.SPEAK:
                if self.mode == MODE_TRAIN and not cfg.gspo_frozen(role):
                    aux_calls, aux_prompt, aux_completion = self._credit_update(
                        role, ctx, pending_correct_before
                    )
                utterance = self._generate(role, ctx, 1)[0]
                if role is Role.PROPOSER:
                    answer = parse_proposer(utterance.text, self.task.kind)
                    parse_result = answer
                    new_answer_correct = answer is not None and answer == self.task.gold
                    if answer is not None:
                        self.pending = install_proposal(pending_before, answer, t)
                else:
                    verdict_realized = parse_reviewer(utterance.text)
                    parse_result = verdict_realized
                    self.pending = apply_verdict(pending_before, verdict_realized)
                    if verdict_realized is not Verdict.INVALID:
                        self.last_review = (verdict_realized, parse_review_reason(utterance.text))
            elif (
                self.mode == MODE_TRAIN
                and cfg.shadow_rollout
                and controller_mode == CONTROLLER_LEARNED
            ):
                # off-trajectory rollout realizing the value of the untaken speak
                shadow = self._generate(role, ctx, 1)[0]
                aux_calls += 1
                aux_prompt += shadow.prompt_tokens
                aux_completion += shadow.completion_tokens
                if role is Role.PROPOSER:
                    shadow_answer = parse_proposer(shadow.text, self.task.kind)
                    new_answer_correct = shadow_answer is not None and shadow_answer == self.task.gold
                else:
                    verdict_realized = parse_reviewer(shadow.text)
        except BackendError:
            self.failed = True
            self.done = True
            return True

        # -- controller update (training, learned decisions only) --------------
        values_logged: Optional[Tuple[float, Optional[float]]] = None
        if self.mode == MODE_TRAIN and not forced and controller_mode == CONTROLLER_LEARNED:
            table = self.controllers[role]
            if role is Role.PROPOSER:
                v_skip = 1.0 if pending_correct_before else -1.0
                if new_answer_correct is not None:
                    v_speak = 1.0 if new_answer_correct else -1.0
                    table.observe(phase, ActionValues(v_skip, v_speak))
                    values_logged = (v_skip, v_speak)
                else:
                    table.observe_skip_only(phase, v_skip)
                    values_logged = (v_skip, None)
            else:
                v_skip = 0.0
                if verdict_realized is not None:
                    v_speak = _reviewer_speak_value(verdict_realized, pending_correct_before)
                    table.observe(phase, ActionValues(v_skip, v_speak))
                    values_logged = (v_skip, v_speak)
                else:
                    table.observe_skip_only(phase, v_skip)
                    values_logged = (v_skip, None)

        self._finish_turn(
            TurnRecord(
                turn=t,
                m=self.clock.m,
                actor=role,
                action=action,
                forced=forced,
                phase_before=phase,
                policy_used=(policy.p_skip, policy.p_speak) if policy is not None else None,
                utterance=utterance.text if utterance else None,
                parse_result=parse_result,
                values=values_logged,
                vote_after=self.pending.vote if self.pending else 0,
                pending_after=self.pending.answer if self.pending else None,
                prompt_tokens=utterance.prompt_tokens if utterance else 0,
                completion_tokens=utterance.completion_tokens if utterance else 0,
                aux_calls=aux_calls,
                aux_prompt_tokens=aux_prompt,
                aux_completion_tokens=aux_completion,
            )
        )
        return self.done

    def _credit_update(
        self, role: Role, ctx: PromptContext, pending_correct_before: bool
    ) -> Tuple[int, int, int]:
        """Sample the G-candidate group, score it, and update a trainable backend.

        Candidates never enter the trajectory; they are charged as auxiliary
        calls. Mock backends are charged identically for cost comparability,
        they just have no parameters to move.
        """
        cfg = self.cfg
        backend = self.backends[role]
        group_utts = self._generate(role, ctx, cfg.group_size)
        calls = len(group_utts)
        prompt_tokens = sum(u.prompt_tokens for u in group_utts)
        completion_tokens = sum(u.completion_tokens for u in group_utts)
        if role is Role.PROPOSER:
            rewards = [
                float(proposer_reward(parse_proposer(u.text, self.task.kind), self.task.gold))
                for u in group_utts
            ]
        else:
            rewards = [
                float(reviewer_reward(parse_reviewer(u.text), pending_correct_before))
                for u in group_utts
            ]
        if backend.trainable:
            group = CandidateGroup.build(
                tokens=[u.tokens for u in group_utts],
                logp_old=[u.logp for u in group_utts],
                rewards=rewards,
                adv_epsilon=cfg.adv_eps,
            )
            updated, log = gspo_update(
                backend.policy_for(ctx), group, cfg.learning_rate, cfg.clip_eps
            )
            backend.set_policy(ctx, updated)
            self.gspo_logs.append(
                {
                    "m": self.clock.m,
                    "role": role.label,
                    "group_size": log.group_size,
                    "rewards": log.rewards,
                    "reward_mean": log.reward_mean,
                    "reward_std": log.reward_std,
                    "clip_fraction": log.clip_fraction,
                    "loss": log.loss,
                    "grad_norm": log.grad_norm,
                }
            )
        return calls, prompt_tokens, completion_tokens

    def _finish_turn(self, record: TurnRecord) -> None:
        self.turns.append(record)
        self.done = stop_rule(self.pending, self.clock.t, self.cfg)
        if not self.done:
            self.clock = self.clock.next_turn()

    def result(self) -> RunRecord:
        answer = final_answer(self.pending)
        speaks = [rec for rec in self.turns if rec.action is ActionMode.SPEAK and rec.actor is not None]
        record = RunRecord(
            task_id=self.task.id,
            k_index=self.start_clock.k,
            mode=self.mode,
            gold=self.task.gold,
            task_kind=self.task.kind,
            turns=list(self.turns),
            final_answer=answer,
            correct=answer is not None and answer == self.task.gold,
            total_prompt_tokens=sum(r.prompt_tokens + r.aux_prompt_tokens for r in self.turns),
            total_completion_tokens=sum(r.completion_tokens + r.aux_completion_tokens for r in self.turns),
            llm_calls=len(speaks) + sum(r.aux_calls for r in self.turns),
            agents_spoken=len({rec.actor for rec in speaks}),
            failed=self.failed,
        )
        return record


def _reviewer_speak_value(verdict: Verdict, pending_correct: bool) -> float:
    if verdict is Verdict.INVALID:
        return 0.0
    agrees = verdict is Verdict.POSITIVE
    return 1.0 if agrees == pending_correct else -1.0


def run_training_task(
    task: Task,
    backends: Dict[Role, AgentBackend],
    controllers: Dict[Role, RegretTable],
    cfg: TrainConfig,
    clock: EpisodeClock,
    rng: random.Random,
) -> Tuple[RunRecord, List[dict], EpisodeClock]:
    """Run one full training task; returns its record, credit logs, next clock."""
    session = TaskSession(task, backends, controllers, cfg, clock, rng, mode=MODE_TRAIN)
    while not session.step():
        pass
    return session.result(), session.gspo_logs, clock.next_task()


def run_inference_task(
    task: Task,
    backends: Dict[Role, AgentBackend],
    averaged: Dict[Role, AveragedController],
    cfg: TrainConfig,
    clock: EpisodeClock,
    rng: random.Random,
) -> RunRecord:
    """Run one task under the averaged policies: no learning, no extra sampling."""
    session = TaskSession(
        task, backends, {}, cfg, clock, rng, mode=MODE_EVAL, averaged=averaged
    )
    while not session.step():
        pass
    return session.result()


class RunSink:
    """Collector interface for experiment output; the default discards everything."""

    def meta(self, payload: dict) -> None: ...

    def train_record(self, record: RunRecord, gspo_logs: List[dict]) -> None: ...

    def eval_record(self, record: RunRecord) -> None: ...

    def accuracy_point(self, task_index: int, window_accuracy: float) -> None: ...

    def checkpoint(
        self,
        task_index: int,
        m: int,
        controllers: Dict[Role, RegretTable],
        backends: Dict[Role, AgentBackend],
    ) -> None: ...


@dataclass
class ExperimentSummary:
    accuracy: float
    tokens_per_task: float
    calls_per_task: float
    agents_per_task: float
    train_tasks: int
    eval_tasks: int


def run_experiment(
    train_tasks: Sequence[Task],
    eval_tasks: Sequence[Task],
    backends: Dict[Role, AgentBackend],
    cfg: TrainConfig,
    sink: Optional[RunSink] = None,
    controllers: Optional[Dict[Role, RegretTable]] = None,
    checkpoint_interval: int = 0,
    metric_window: int = 100,
) -> Tuple[ExperimentSummary, Dict[Role, RegretTable], List[RunRecord]]:
    """Train for cfg.steps tasks, then evaluate the averaged system.

    With envs > 1, that many sessions run at once and are stepped round-robin,
    so all table updates land in one well-defined global order.
    """
    sink = sink or RunSink()
    controllers = controllers or {Role.PROPOSER: RegretTable(), Role.REVIEWER: RegretTable()}
    train_rng = random.Random(derive_seed(cfg.seed, "train"))
    eval_rng = random.Random(derive_seed(cfg.seed, "eval"))

    window: deque = deque(maxlen=metric_window)
    started = 0
    completed = 0
    sessions: List[TaskSession] = []

    def new_session() -> Optional[TaskSession]:
        nonlocal started
        if started >= cfg.steps or not train_tasks:
            return None
        task = train_tasks[train_rng.randrange(len(train_tasks))]
        clock = EpisodeClock(cfg.horizon, k=started, t=1)
        started += 1
        return TaskSession(task, backends, controllers, cfg, clock, train_rng, mode=MODE_TRAIN)

    for _ in range(cfg.envs):
        session = new_session()
        if session is not None:
            sessions.append(session)

    while sessions:
        next_round: List[TaskSession] = []
        for session in sessions:
            done = session.step()
            if done:
                completed += 1
                record = session.result()
                sink.train_record(record, session.gspo_logs)
                window.append(1 if record.correct else 0)
                sink.accuracy_point(completed, sum(window) / len(window))
                if checkpoint_interval and completed % checkpoint_interval == 0:
                    sink.checkpoint(completed, session.clock.m, controllers, backends)
                replacement = new_session()
                if replacement is not None:
                    next_round.append(replacement)
            else:
                next_round.append(session)
        sessions = next_round

    averaged = {role: AveragedController.from_table(table) for role, table in controllers.items()}
    eval_records: List[RunRecord] = []
    for index, task in enumerate(eval_tasks):
        clock = EpisodeClock(cfg.horizon, k=index, t=1)
        record = run_inference_task(task, backends, averaged, cfg, clock, eval_rng)
        eval_records.append(record)
        sink.eval_record(record)

    count = len(eval_records)
    summary = ExperimentSummary(
        accuracy=sum(r.correct for r in eval_records) / count if count else 0.0,
        tokens_per_task=(
            sum(r.total_prompt_tokens + r.total_completion_tokens for r in eval_records) / count
            if count
            else 0.0
        ),
        calls_per_task=sum(r.llm_calls for r in eval_records) / count if count else 0.0,
        agents_per_task=sum(r.agents_spoken for r in eval_records) / count if count else 0.0,
        train_tasks=completed,
        eval_tasks=count,
    )
    return summary, controllers, eval_records
