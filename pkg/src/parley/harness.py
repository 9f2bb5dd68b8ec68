"""Experiment harness: configuration, persistence, replay, and cost accounting.

Run logs are newline-delimited JSON with a meta record first, then one record
per task (typed `train_task` / `eval_task`) and one per generation-credit step.
Everything needed to re-derive votes, phases, regrets, policies and costs is in
the log, so `replay` can verify a stored run bit for bit. Checkpoints are plain
CSV so they stay portable and diffable.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

from .agents import (
    MockAgent,
    MockAgentSpec,
    RemoteAgent,
    RemoteEndpointConfig,
    ToyAgent,
    parse_proposer,
    parse_reviewer,
)
from .controller import (
    ActionValues,
    AveragedController,
    PolicyAtPhase,
    RegretTable,
    UNIFORM_POLICY,
    load_average_policies,
    write_snapshot_csv,
)
from .core import ActionMode, Phase, Role, TaskKind, TurnRecord, Verdict, active_role
from .orchestrator import (
    CONTROLLER_LEARNED,
    MODE_EVAL,
    MODE_TRAIN,
    RunRecord,
    RunSink,
    TrainConfig,
    phase_key,
    stop_rule,
)
from .vote import PendingAnswer, apply_verdict, install_proposal

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_BACKEND_KINDS = ("mock", "toy", "remote")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    proposer_backend: dict = field(default_factory=lambda: {"kind": "mock"})
    reviewer_backend: dict = field(default_factory=lambda: {"kind": "mock"})
    train_dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint_interval: int = 0
    metric_window: int = 100

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        train_raw = dict(raw.pop("train", {}))
        allowed = {f.name for f in fields(TrainConfig)}
        unknown = set(train_raw) - allowed
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        backends = dict(raw.pop("backends", {}))
        dataset = dict(raw.pop("dataset", {}))
        config = cls(
            train=TrainConfig(**train_raw),
            proposer_backend=dict(backends.get("proposer", {"kind": "mock"})),
            reviewer_backend=dict(backends.get("reviewer", {"kind": "mock"})),
            train_dataset=dataset.get("train"),
            eval_dataset=dataset.get("eval"),
            out_dir=raw.pop("out_dir", None),
            checkpoint_interval=int(raw.pop("checkpoint_interval", 0)),
            metric_window=int(raw.pop("metric_window", 100)),
        )
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        with open(path) as handle:
            raw = json.load(handle)
        for override in overrides:
            apply_override(raw, override)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "train": asdict(self.train),
            "backends": {"proposer": self.proposer_backend, "reviewer": self.reviewer_backend},
            "dataset": {"train": self.train_dataset, "eval": self.eval_dataset},
            "out_dir": self.out_dir,
            "checkpoint_interval": self.checkpoint_interval,
            "metric_window": self.metric_window,
        }

    def validate(self) -> None:
        for name, backend in (("proposer", self.proposer_backend), ("reviewer", self.reviewer_backend)):
            kind = backend.get("kind")
            if kind not in _BACKEND_KINDS:
                raise ValueError(f"{name} backend kind must be one of {_BACKEND_KINDS}, got {kind!r}")

    def validate_for_training(self) -> None:
        self.validate()
        pairs = (
            (Role.PROPOSER, self.proposer_backend),
            (Role.REVIEWER, self.reviewer_backend),
        )
        for role, backend in pairs:
            if backend.get("kind") == "remote" and not self.train.gspo_frozen(role):
                raise ValueError(
                    f"remote {role.label} backend cannot take generation-credit updates; "
                    f"freeze its update or switch backends"
                )


def apply_override(raw: dict, override: str) -> None:
    """Apply one `dot.path=value` override; the value parses as JSON if it can."""
    if "=" not in override:
        raise ValueError(f"override must look like key=value, got {override!r}")
    path, value_text = override.split("=", 1)
    try:
        value = json.loads(value_text)
    except json.JSONDecodeError:
        value = value_text
    keys = path.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"override path {path!r} crosses a non-object value")
    node[keys[-1]] = value


def build_backend(role: Role, spec: dict):
    params = {k: v for k, v in spec.items() if k != "kind"}
    kind = spec.get("kind")
    if kind == "mock":
        return MockAgent(MockAgentSpec(role=role, **params))
    if kind == "toy":
        return ToyAgent(role, **params)
    if kind == "remote":
        return RemoteAgent(RemoteEndpointConfig(**params))
    raise ValueError(f"unknown backend kind {kind!r}")


def build_backends(config: ExperimentConfig) -> Dict[Role, object]:
    return {
        Role.PROPOSER: build_backend(Role.PROPOSER, config.proposer_backend),
        Role.REVIEWER: build_backend(Role.REVIEWER, config.reviewer_backend),
    }


# ---------------------------------------------------------------------------
# Run-record serialization
# ---------------------------------------------------------------------------


def _phase_out(phase: Optional[Phase]):
    return [phase.vote_bucket, phase.turn_bucket] if phase is not None else None


def _parse_out(rec: TurnRecord):
    if isinstance(rec.parse_result, Verdict):
        return rec.parse_result.value
    return rec.parse_result


def turn_to_dict(rec: TurnRecord) -> dict:
    return {
        "turn": rec.turn,
        "m": rec.m,
        "actor": rec.actor.label if rec.actor is not None else None,
        "action": rec.action.value,
        "forced": rec.forced,
        "phase": _phase_out(rec.phase_before),
        "policy": list(rec.policy_used) if rec.policy_used is not None else None,
        "utterance": rec.utterance,
        "parse": _parse_out(rec),
        "values": list(rec.values) if rec.values is not None else None,
        "vote_after": rec.vote_after,
        "pending_after": rec.pending_after,
        "prompt_tokens": rec.prompt_tokens,
        "completion_tokens": rec.completion_tokens,
        "aux_calls": rec.aux_calls,
        "aux_prompt_tokens": rec.aux_prompt_tokens,
        "aux_completion_tokens": rec.aux_completion_tokens,
    }


def turn_from_dict(raw: dict) -> TurnRecord:
    actor = None
    if raw["actor"] is not None:
        actor = Role.PROPOSER if raw["actor"] == "proposer" else Role.REVIEWER
    parse = raw["parse"]
    if actor is Role.REVIEWER and parse is not None:
        parse = Verdict(parse)
    phase = Phase(*raw["phase"]) if raw["phase"] is not None else None
    return TurnRecord(
        turn=raw["turn"],
        m=raw["m"],
        actor=actor,
        action=ActionMode(raw["action"]),
        forced=raw["forced"],
        phase_before=phase,
        policy_used=tuple(raw["policy"]) if raw["policy"] is not None else None,
        utterance=raw["utterance"],
        parse_result=parse,
        values=tuple(raw["values"]) if raw["values"] is not None else None,
        vote_after=raw["vote_after"],
        pending_after=raw["pending_after"],
        prompt_tokens=raw["prompt_tokens"],
        completion_tokens=raw["completion_tokens"],
        aux_calls=raw["aux_calls"],
        aux_prompt_tokens=raw["aux_prompt_tokens"],
        aux_completion_tokens=raw["aux_completion_tokens"],
    )


def record_to_dict(rec: RunRecord) -> dict:
    return {
        "type": f"{rec.mode}_task",
        "task_id": rec.task_id,
        "k": rec.k_index,
        "gold": rec.gold,
        "task_kind": rec.task_kind.value,
        "final_answer": rec.final_answer,
        "correct": rec.correct,
        "failed": rec.failed,
        "total_prompt_tokens": rec.total_prompt_tokens,
        "total_completion_tokens": rec.total_completion_tokens,
        "llm_calls": rec.llm_calls,
        "agents_spoken": rec.agents_spoken,
        "turns": [turn_to_dict(t) for t in rec.turns],
    }


def record_from_dict(raw: dict) -> RunRecord:
    mode = MODE_TRAIN if raw["type"] == "train_task" else MODE_EVAL
    return RunRecord(
        task_id=raw["task_id"],
        k_index=raw["k"],
        mode=mode,
        gold=raw["gold"],
        task_kind=TaskKind(raw["task_kind"]),
        turns=[turn_from_dict(t) for t in raw["turns"]],
        final_answer=raw["final_answer"],
        correct=raw["correct"],
        total_prompt_tokens=raw["total_prompt_tokens"],
        total_completion_tokens=raw["total_completion_tokens"],
        llm_calls=raw["llm_calls"],
        agents_spoken=raw["agents_spoken"],
        failed=raw["failed"],
    )


def _json_line(payload: dict) -> str:
    return json.dumps(payload, separators=(",", ":"), sort_keys=False) + "\n"


# ---------------------------------------------------------------------------
# File sink
# ---------------------------------------------------------------------------


class FileSink(RunSink):
    """Writes the run.jsonl stream plus curve CSVs and checkpoint directories."""

    def __init__(self, out_dir: str, config: ExperimentConfig) -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.out_dir = out_dir
        self.config = config
        self.run_log = open(os.path.join(out_dir, "run.jsonl"), "w")
        self.accuracy_csv = open(os.path.join(out_dir, "accuracy_curve.csv"), "w", newline="")
        self.accuracy_writer = csv.writer(self.accuracy_csv)
        self.accuracy_writer.writerow(["task_index", "window_accuracy"])
        self.regret_csv = open(os.path.join(out_dir, "regret_curves.csv"), "w", newline="")
        self.regret_writer = csv.writer(self.regret_csv)
        self.regret_writer.writerow(
            ["task_index", "m", "controller", "vote_bucket", "turn_bucket",
             "re_skip", "re_speak", "visits", "avg_positive_regret"]
        )
        # run identity excludes output paths so identical seeds give identical bytes
        meta = {
            "type": "meta",
            "config": asdict(config.train),
            "backends": {
                "proposer": config.proposer_backend,
                "reviewer": config.reviewer_backend,
            },
        }
        self.run_log.write(_json_line(meta))

    def train_record(self, record: RunRecord, gspo_logs: List[dict]) -> None:
        self.run_log.write(_json_line(record_to_dict(record)))
        for entry in gspo_logs:
            self.run_log.write(_json_line({"type": "gspo", **entry}))

    def eval_record(self, record: RunRecord) -> None:
        self.run_log.write(_json_line(record_to_dict(record)))

    def accuracy_point(self, task_index: int, window_accuracy: float) -> None:
        self.accuracy_writer.writerow([task_index, repr(window_accuracy)])

    def checkpoint(self, task_index: int, m: int, controllers, backends) -> None:
        directory = os.path.join(self.out_dir, f"checkpoint_{m}")
        write_checkpoint(directory, controllers, backends)
        for role, table in sorted(controllers.items(), key=lambda kv: kv[0].index):
            for phase in table.phases():
                cum = table.cumulative_at(phase)
                visits = table.visits.get(phase, 0)
                avg_pos = table.max_positive_regret(phase) / visits if visits else 0.0
                self.regret_writer.writerow(
                    [task_index, m, role.label, phase.vote_bucket, phase.turn_bucket,
                     repr(cum[0]), repr(cum[1]), visits, repr(avg_pos)]
                )

    def close(self) -> None:
        self.run_log.close()
        self.accuracy_csv.close()
        self.regret_csv.close()


def write_checkpoint(directory: str, controllers: Dict[Role, RegretTable], backends: Dict[Role, object]) -> None:
    os.makedirs(directory, exist_ok=True)
    tables = {role.label: table for role, table in controllers.items()}
    write_snapshot_csv(os.path.join(directory, "regret_table.csv"), tables)
    toy_rows: List[dict] = []
    for role in sorted(backends, key=lambda r: r.index):
        backend = backends[role]
        if isinstance(backend, ToyAgent):
            toy_rows.extend(backend.snapshot_rows())
    if toy_rows:
        with open(os.path.join(directory, "toy_policy.csv"), "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=["role", "context_key", "token", "logit"])
            writer.writeheader()
            writer.writerows(toy_rows)


def load_checkpoint_policies(directory: str) -> Dict[Role, AveragedController]:
    by_label = load_average_policies(os.path.join(directory, "regret_table.csv"))
    out: Dict[Role, AveragedController] = {}
    for role in (Role.PROPOSER, Role.REVIEWER):
        out[role] = by_label.get(role.label, AveragedController())
    return out


def load_checkpoint_toy(directory: str, backends: Dict[Role, object]) -> None:
    path = os.path.join(directory, "toy_policy.csv")
    if not os.path.exists(path):
        return
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    for backend in backends.values():
        if isinstance(backend, ToyAgent):
            backend.load_rows(rows)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


@dataclass
class CostSummary:
    """Arithmetic means of the per-task accounting fields."""

    accuracy: float
    tokens_per_task: float
    calls_per_task: float
    agents_per_task: float


def aggregate_costs(records: Sequence[RunRecord]) -> CostSummary:
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    count = len(records)
    return CostSummary(
        accuracy=sum(r.correct for r in records) / count,
        tokens_per_task=sum(r.total_prompt_tokens + r.total_completion_tokens for r in records) / count,
        calls_per_task=sum(r.llm_calls for r in records) / count,
        agents_per_task=sum(r.agents_spoken for r in records) / count,
    )


def write_summary_csv(path: str, summary: CostSummary) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["accuracy", "tokens_per_task", "calls_per_task", "agents_per_task"])
        writer.writerow(
            [repr(summary.accuracy), repr(summary.tokens_per_task),
             repr(summary.calls_per_task), repr(summary.agents_per_task)]
        )


# ---------------------------------------------------------------------------
# Replay: recompute every derived value in a stored log and compare
# ---------------------------------------------------------------------------


def replay_log(path: str) -> List[str]:
    """Re-derive votes, phases, policies, regrets and costs from raw events.

    Returns a list of violation messages; an empty list means the log is
    internally consistent. Policy and regret recomputation applies to training
    records (the log carries realized values there); eval records are checked
    for trajectory, accounting and stop-rule consistency.
    """
    violations: List[str] = []
    with open(path) as handle:
        lines = [json.loads(line) for line in handle if line.strip()]
    if not lines or lines[0].get("type") != "meta":
        return ["log does not start with a meta record"]
    cfg = TrainConfig(**lines[0]["config"])
    tables = {Role.PROPOSER: RegretTable(), Role.REVIEWER: RegretTable()}

    for index, raw in enumerate(lines[1:], start=2):
        kind = raw.get("type")
        if kind == "gspo":
            _replay_gspo(raw, index, violations)
        elif kind in ("train_task", "eval_task"):
            _replay_task(record_from_dict(raw), cfg, tables, index, violations)
        else:
            violations.append(f"line {index}: unknown record type {kind!r}")
    return violations


def _replay_gspo(raw: dict, index: int, violations: List[str]) -> None:
    rewards = raw["rewards"]
    mean = sum(rewards) / len(rewards)
    variance = sum((r - mean) ** 2 for r in rewards) / len(rewards)
    if raw["reward_mean"] != mean or raw["reward_std"] != math.sqrt(variance):
        violations.append(f"line {index}: credit-step reward statistics do not match rewards")
    if raw["group_size"] != len(rewards):
        violations.append(f"line {index}: credit-step group size mismatch")


def _replay_task(
    record: RunRecord,
    cfg: TrainConfig,
    tables: Dict[Role, RegretTable],
    index: int,
    violations: List[str],
) -> None:
    def err(message: str) -> None:
        violations.append(f"line {index} task {record.task_id}: {message}")

    pending: Optional[PendingAnswer] = None
    expected_turn = 1
    speaks = 0
    aux_calls = 0
    prompt_total = 0
    completion_total = 0
    spoken_roles = set()

    for rec in record.turns:
        if rec.turn != expected_turn:
            err(f"turn numbers not contiguous at turn {rec.turn}")
            return
        expected_turn += 1
        expected_m = record.k_index * cfg.horizon + rec.turn
        if rec.m != expected_m:
            err(f"episode index {rec.m} != k*T+t = {expected_m}")

        if rec.actor is not None:
            expected_role = Role.PROPOSER if cfg.no_reviewer else active_role(rec.turn)
            if rec.actor is not expected_role:
                err(f"turn {rec.turn}: actor {rec.actor.label} out of parity")

        vote_before = pending.vote if pending is not None else 0

        # controller decision bookkeeping (training only carries values)
        if rec.phase_before is not None:
            phase = phase_key(vote_before, rec.turn, cfg)
            if Phase(*rec.phase_before) != phase:
                err(f"turn {rec.turn}: phase {rec.phase_before} != recomputed {phase}")
            if record.mode == MODE_TRAIN and rec.values is not None and rec.actor is not None:
                if cfg.controller_mode(rec.actor) == CONTROLLER_LEARNED:
                    table = tables[rec.actor]
                    expected_policy = table.policy_at(phase)
                    if rec.policy_used is None or tuple(rec.policy_used) != tuple(expected_policy):
                        err(
                            f"turn {rec.turn}: policy {rec.policy_used} != recomputed "
                            f"{tuple(expected_policy)}"
                        )
                    if rec.values[1] is None:
                        table.observe_skip_only(phase, rec.values[0])
                    else:
                        table.observe(phase, ActionValues(rec.values[0], rec.values[1]))
            elif rec.policy_used is not None and rec.values is None:
                if tuple(rec.policy_used) != tuple(UNIFORM_POLICY) and record.mode == MODE_TRAIN:
                    err(f"turn {rec.turn}: unlearned decision must use the uniform policy")

        # vote machine
        if rec.action is ActionMode.SPEAK and rec.actor is Role.PROPOSER:
            speaks += 1
            spoken_roles.add(rec.actor)
            answer = parse_proposer(rec.utterance or "", record.task_kind)
            if answer != rec.parse_result:
                err(f"turn {rec.turn}: proposer parse {rec.parse_result!r} != recomputed {answer!r}")
            if answer is not None:
                pending = install_proposal(pending, answer, rec.turn)
        elif rec.action is ActionMode.SPEAK and rec.actor is Role.REVIEWER:
            speaks += 1
            spoken_roles.add(rec.actor)
            verdict = parse_reviewer(rec.utterance or "")
            if verdict != rec.parse_result:
                err(f"turn {rec.turn}: reviewer parse {rec.parse_result} != recomputed {verdict}")
            if pending is None:
                err(f"turn {rec.turn}: reviewer spoke with no pending answer")
                return
            pending = apply_verdict(pending, verdict)

        vote_now = pending.vote if pending is not None else 0
        answer_now = pending.answer if pending is not None else None
        if rec.vote_after != vote_now:
            err(f"turn {rec.turn}: stored vote {rec.vote_after} != recomputed {vote_now}")
        if rec.pending_after != answer_now:
            err(f"turn {rec.turn}: stored pending {rec.pending_after!r} != recomputed {answer_now!r}")

        aux_calls += rec.aux_calls
        prompt_total += rec.prompt_tokens + rec.aux_prompt_tokens
        completion_total += rec.completion_tokens + rec.aux_completion_tokens
        if record.mode == MODE_EVAL and rec.aux_calls:
            err(f"turn {rec.turn}: eval traces charge trajectory calls only")

    # stop-rule consistency: no stop may be missed, and the last turn must stop
    for rec in record.turns[:-1]:
        state = PendingAnswer(rec.pending_after, rec.vote_after, rec.turn) if rec.pending_after else None
        if stop_rule(state, rec.turn, cfg):
            err(f"turn {rec.turn}: run continued past a satisfied stop condition")
    if record.turns and not record.failed:
        last = record.turns[-1]
        state = PendingAnswer(last.pending_after, last.vote_after, last.turn) if last.pending_after else None
        if not stop_rule(state, last.turn, cfg):
            err("run ended before any stop condition held")

    expected_final = pending.answer if pending is not None else None
    if record.final_answer != expected_final:
        err(f"final answer {record.final_answer!r} != recomputed {expected_final!r}")
    if record.correct != (expected_final is not None and expected_final == record.gold):
        err("stored correctness flag does not match the recomputed final answer")
    if record.total_prompt_tokens != prompt_total or record.total_completion_tokens != completion_total:
        err("stored token totals do not match the per-turn sums")
    if record.llm_calls != speaks + aux_calls:
        err(f"stored llm_calls {record.llm_calls} != recomputed {speaks + aux_calls}")
    if record.agents_spoken != len(spoken_roles):
        err("stored agents_spoken does not match the distinct speakers")
