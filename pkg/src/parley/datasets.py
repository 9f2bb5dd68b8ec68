"""Task datasets: newline-delimited records plus a synthetic desk-scale family."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import List, Optional

from .core import TaskKind
from .vote import normalize_answer


@dataclass(frozen=True)
class Task:
    id: str
    question: str
    gold: str
    kind: TaskKind


def load_tasks(path: str) -> List[Task]:
    """Read {id, question, gold_answer, task_kind} records, normalizing golds."""
    tasks: List[Task] = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            kind = TaskKind(raw["task_kind"])
            gold = normalize_answer(str(raw["gold_answer"]), kind)
            if gold is None:
                raise ValueError(f"{path}:{line_no}: gold answer does not normalize")
            tasks.append(Task(id=str(raw["id"]), question=str(raw["question"]), gold=gold, kind=kind))
    if not tasks:
        raise ValueError(f"{path}: dataset is empty")
    return tasks


def write_tasks(path: str, tasks: List[Task]) -> None:
    with open(path, "w") as handle:
        for task in tasks:
            record = {
                "id": task.id,
                "question": task.question,
                "gold_answer": task.gold,
                "task_kind": task.kind.value,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def lookup_questions(n_questions: int = 16) -> List[Task]:
    """The base question set of the lookup family: slot k stores the value k."""
    return [
        Task(
            id=f"lookup-{k}",
            question=f"What value is stored at slot {k}?",
            gold=str(k),
            kind=TaskKind.NUMERIC,
        )
        for k in range(n_questions)
    ]


def make_lookup_dataset(count: int, n_questions: int = 16, seed: int = 0) -> List[Task]:
    """Sample `count` tasks from the lookup family, round-robin ids kept unique."""
    base = lookup_questions(n_questions)
    rng = random.Random(seed)
    out: List[Task] = []
    for i in range(count):
        picked = base[rng.randrange(n_questions)]
        out.append(Task(id=f"{picked.id}#{i}", question=picked.question, gold=picked.gold, kind=picked.kind))
    return out
