"""Acceptance suite: the executable exit criteria of this artifact.

Each criterion is a self-contained check with its tolerance pinned in code.
`run_all` executes them in order and reports one pass/fail line each; the CLI
`accept` command and tests/test_acceptance.py are thin wrappers around it.
"""

from __future__ import annotations

import math
import os
import random
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .agents import MockAgent, MockAgentSpec, ToyAgent
from .controller import RegretTable
from .core import Phase, Role, Verdict, derive_seed
from .datasets import lookup_questions, make_lookup_dataset
from .gspo import (
    CandidateGroup,
    ToyPolicy,
    gspo_gradient,
    gspo_loss,
    normalize_advantages,
)
from .harness import ExperimentConfig, FileSink, aggregate_costs, replay_log
from .orchestrator import TrainConfig, run_experiment
from .oracle import (
    alternating_phase_stream,
    check_regret_decomposition,
    decision_events_from_turns,
    best_fixed_action_regret,
    proposer_phase_stream,
    reviewer_phase_stream,
    verify_convergence,
    verify_no_regret,
)
from .vote import PendingAnswer, apply_verdict, final_answer, install_proposal


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float


def _two_phase_stationary_streams():
    # one dominant phase plus one value-indifferent phase; the indifferent one
    # is the hard case for the bound, dominant phases pass it trivially
    return [
        reviewer_phase_stream(Phase(0, 2), p_judge_correct=0.9, p_invalid=0.05),
        proposer_phase_stream(Phase(0, 3), belief_correct=0.5, p_correct_fresh=0.5, p_correct_hinted=0.5),
    ]


def criterion_no_regret_bound(quick: bool = False) -> CriterionResult:
    start = time.perf_counter()
    episodes = 20_000 if quick else 120_000
    report = verify_no_regret(_two_phase_stationary_streams(), episodes=episodes, seed=20240601)
    busy = [row for row in report.rows if row.visits >= 100]
    passed = report.passed and len(busy) == 2
    detail = "; ".join(
        f"phase {row.phase}: avg {row.avg_positive_regret:.5f} <= bound {row.bound:.5f}" for row in busy
    )
    return CriterionResult(1, "no-regret bound on stationary two-phase game", passed, detail,
                           time.perf_counter() - start)


def criterion_convergence_rate(quick: bool = False) -> CriterionResult:
    start = time.perf_counter()
    episodes = 40_000 if quick else 200_000
    streams = [
        reviewer_phase_stream(Phase(0, 2), p_judge_correct=0.9, p_invalid=0.0),
        alternating_phase_stream(Phase(0, 3), Role.PROPOSER),
    ]
    report = verify_convergence(streams, episodes=episodes, seed=20240602, slope_band=(-0.6, -0.4))
    mass_row = report.mass_rows[0]
    mass_ok = mass_row.visits >= 10_000 and mass_row.average_mass >= 0.96
    passed = report.passed and mass_ok
    detail = (
        f"slope {report.slope:.3f} in [-0.6, -0.4]; dominant-phase mass "
        f"{mass_row.average_mass:.4f} >= 0.96 at {mass_row.visits} visits (band {mass_row.band:.4f})"
    )
    return CriterionResult(2, "1/sqrt(M) convergence rate and averaged-policy mass", passed, detail,
                           time.perf_counter() - start)


def criterion_decomposition(quick: bool = False) -> CriterionResult:
    start = time.perf_counter()
    games = [
        dict(horizon=4, fresh=0.5, hinted=0.8, judge=0.9, invalid=0.05, threshold=1, seed=11),
        dict(horizon=4, fresh=0.3, hinted=0.9, judge=0.7, invalid=0.10, threshold=2, seed=12),
        dict(horizon=3, fresh=0.6, hinted=0.6, judge=0.8, invalid=0.00, threshold=1, seed=13),
    ]
    tasks_per_game = 120 if quick else 400
    checked = 0
    passed = True
    details: List[str] = []
    for game in games:
        cfg = TrainConfig(
            horizon=game["horizon"],
            steps=tasks_per_game,
            seed=game["seed"],
            stop_vote_threshold=game["threshold"],
            group_size=2,
        )
        backends = {
            Role.PROPOSER: MockAgent(MockAgentSpec(
                role=Role.PROPOSER, p_correct_fresh=game["fresh"], p_correct_hinted=game["hinted"])),
            Role.REVIEWER: MockAgent(MockAgentSpec(
                role=Role.REVIEWER, p_judge_correct=game["judge"], p_invalid=game["invalid"])),
        }
        collected: Dict[Role, list] = {Role.PROPOSER: [], Role.REVIEWER: []}

        class Collector:
            def meta(self, payload): ...
            def eval_record(self, record): ...
            def accuracy_point(self, *a): ...
            def checkpoint(self, *a): ...
            def train_record(self, record, gspo_logs):
                for role in (Role.PROPOSER, Role.REVIEWER):
                    collected[role].extend(decision_events_from_turns(record.turns, role))

        run_experiment([], [], backends, cfg, sink=Collector(),
                       controllers=None, checkpoint_interval=0)
        # run_experiment needs train tasks; use a single numeric task family
        # (the empty call above is replaced below)
        raise AssertionError("placeholder")
    return CriterionResult(3, "regret decomposition", passed, "; ".join(details), time.perf_counter() - start)
