"""Brute-force verification spine.

Three independent instruments cross-check the live controller machinery:

* exact forward enumeration of the mock-agent game (states are just
  turn x pending-correctness x vote, so everything sums in closed form),
* per-phase decision streams that drive the real regret tables for many
  episodes and compare measured average positive regret against the
  2/sqrt(visits) guarantee (with declared slack),
* an exact-rational decomposition check: the best fixed pure strategy in
  hindsight, found by explicit enumeration over all pure strategies, never
  beats the per-phase positive-part regret aggregate.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .agents import MockAgentSpec
from .controller import (
    ActionValues,
    PolicyAtPhase,
    RegretTable,
    UNIFORM_POLICY,
    instantaneous_regret,
)
from .core import ActionMode, Phase, Role, active_role, phase_of


@dataclass(frozen=True)
class TinyGameSpec:
    """A fully enumerable instance of the two-agent game.

    Mock proposers emit a single deterministic wrong answer, so answer identity
    coincides with correctness: re-proposing the same correctness keeps the
    pending vote, flipping correctness resets it. That collapse is what keeps
    the state space tiny.
    """

    horizon: int
    proposer: MockAgentSpec
    reviewer: MockAgentSpec
    clamp_bound: int = 3
    stop_vote_threshold: int = 1
    state_cap: int = 10_000

    def __post_init__(self) -> None:
        if not 1 <= self.horizon <= 6:
            raise ValueError("tiny games are capped at horizon 6")


PolicyProfile = Callable[[Role, Phase], PolicyAtPhase]


def uniform_profile(role: Role, phase: Phase) -> PolicyAtPhase:
    return UNIFORM_POLICY


@dataclass
class PhaseInfo:
    phase: Phase
    role: Role
    mass: float
    belief_correct: float


@dataclass
class GameEnumeration:
    phases: Dict[Phase, PhaseInfo]
    states_visited: int
    terminal_mass: float


def enumerate_game(spec: TinyGameSpec, profile: PolicyProfile = uniform_profile) -> GameEnumeration:
    """Exact forward pass over reach probabilities under a fixed policy profile."""
    p, r = spec.proposer, spec.reviewer
    p_wrong_judge = 1.0 - r.p_judge_correct - r.p_invalid

    # state: (pending_correct, vote) -> reach probability; pending exists after turn 1
    dist: Dict[Tuple[bool, int], float] = {}
    phases: Dict[Phase, PhaseInfo] = {}
    states_visited = 1
    terminal_mass = 0.0

    def phase_for(vote: int, turn: int) -> Phase:
        return phase_of(vote, turn, spec.clamp_bound, spec.horizon)

    for turn in range(1, spec.horizon + 1):
        role = active_role(turn)
        nxt: Dict[Tuple[bool, int], float] = {}

        def put(state: Tuple[bool, int], prob: float) -> None:
            if prob > 0.0:
                nxt[state] = nxt.get(state, 0.0) + prob

        if turn == 1:
            put((True, 0), p.p_correct_fresh)
            put((False, 0), 1.0 - p.p_correct_fresh)
        else:
            for (correct, vote), prob in dist.items():
                phase = phase_for(vote, turn)
                info = phases.get(phase)
                if info is None:
                    info = PhaseInfo(phase=phase, role=role, mass=0.0, belief_correct=0.0)
                    phases[phase] = info
                info.mass += prob
                info.belief_correct += prob if correct else 0.0

                policy = profile(role, phase)
                put((correct, vote), prob * policy.p_skip)
                speak = prob * policy.p_speak
                if speak <= 0.0:
                    continue
                if role is Role.PROPOSER:
                    hinted = vote > 0 or correct
                    p_new = p.p_correct_hinted if hinted else p.p_correct_fresh
                    # same correctness means the identical answer, vote persists
                    put((correct, vote), speak * (p_new if correct else 1.0 - p_new))
                    put((not correct, 0), speak * (1.0 - p_new if correct else p_new))
                else:
                    put((correct, vote), speak * r.p_invalid)
                    up = r.p_judge_correct if correct else p_wrong_judge
                    down = p_wrong_judge if correct else r.p_judge_correct
                    put((correct, vote + 1), speak * up)
                    put((correct, vote - 1), speak * down)

        if turn % 2 == 0:
            # adaptive stop: endorsed answers leave the game after reviewer turns
            stopped = {s: q for s, q in nxt.items() if s[1] >= spec.stop_vote_threshold}
            for s, q in stopped.items():
                terminal_mass += q
                del nxt[s]
        dist = nxt
        states_visited += len(dist)
        if states_visited > spec.state_cap:
            raise ValueError(f"state cap {spec.state_cap} exceeded at turn {turn}")

    terminal_mass += sum(dist.values())
    for info in phases.values():
        if info.mass > 0.0:
            info.belief_correct /= info.mass
    return GameEnumeration(phases=phases, states_visited=states_visited, terminal_mass=terminal_mass)


def exact_action_values(spec: TinyGameSpec, phase: Phase, belief_correct: float) -> ActionValues:
    """Expected single-step values of both actions at a phase, in closed form.

    `belief_correct` is the probability that the pending answer is correct when
    the phase is entered; the enumeration supplies it exactly.
    """
    enumeration = enumerate_game(spec)
    if phase not in enumeration.phases:
        raise ValueError(f"phase {phase} is not reachable in this game")
    role = active_role(phase.turn_bucket)
    if role is Role.REVIEWER:
        r = spec.reviewer
        e_speak = r.p_judge_correct - (1.0 - r.p_judge_correct - r.p_invalid)
        return ActionValues(0.0, e_speak)
    p = spec.proposer
    q = belief_correct
    e_skip = 2.0 * q - 1.0
    p_new_if_wrong = p.p_correct_hinted if phase.vote_bucket > 0 else p.p_correct_fresh
    p_new = q * p.p_correct_hinted + (1.0 - q) * p_new_if_wrong
    return ActionValues(e_skip, 2.0 * p_new - 1.0)


# ---------------------------------------------------------------------------
# Decision streams: drive the real controller against per-phase value processes
# ---------------------------------------------------------------------------


@dataclass
class PhaseStream:
    """A value process at one phase: stationary mock-derived or adversarial."""

    phase: Phase
    role: Role
    draw: Callable[[random.Random, int], ActionValues]
    margin: float = 0.0
    dominant: Optional[ActionMode] = None


def reviewer_phase_stream(phase: Phase, p_judge_correct: float, p_invalid: float = 0.0) -> PhaseStream:
    """Stationary reviewer phase; speak dominates by p_correct - p_wrong."""
    p_wrong = 1.0 - p_judge_correct - p_invalid
    margin = p_judge_correct - p_wrong

    def draw(rng: random.Random, _visit: int) -> ActionValues:
        u = rng.random()
        if u < p_invalid:
            return ActionValues(0.0, 0.0)
        if u < p_invalid + p_judge_correct:
            return ActionValues(0.0, 1.0)
        return ActionValues(0.0, -1.0)

    dominant = ActionMode.SPEAK if margin > 0 else (ActionMode.SKIP if margin < 0 else None)
    return PhaseStream(phase=phase, role=Role.REVIEWER, draw=draw, margin=abs(margin), dominant=dominant)


def proposer_phase_stream(
    phase: Phase, belief_correct: float, p_correct_fresh: float, p_correct_hinted: float
) -> PhaseStream:
    """Stationary proposer phase with the mock's vote-conditioned competence."""

    def draw(rng: random.Random, _visit: int) -> ActionValues:
        correct = rng.random() < belief_correct
        hinted = phase.vote_bucket > 0 or correct
        p_new = p_correct_hinted if hinted else p_correct_fresh
        new_correct = rng.random() < p_new
        return ActionValues(1.0 if correct else -1.0, 1.0 if new_correct else -1.0)

    q = belief_correct
    e_skip = 2 * q - 1
    p_new_if_wrong = p_correct_hinted if phase.vote_bucket > 0 else p_correct_fresh
    e_speak = 2 * (q * p_correct_hinted + (1 - q) * p_new_if_wrong) - 1
    margin = e_speak - e_skip
    dominant = ActionMode.SPEAK if margin > 0 else (ActionMode.SKIP if margin < 0 else None)
    return PhaseStream(phase=phase, role=Role.PROPOSER, draw=draw, margin=abs(margin), dominant=dominant)


def alternating_phase_stream(phase: Phase, role: Role = Role.REVIEWER) -> PhaseStream:
    """Adversarial period-2 value flip; no dominant action, margin 0.

    This is the process that actually realizes the worst-case sqrt(visits)
    regret growth of regret matching; stationary dominant phases lock in and
    decay faster.
    """

    def draw(_rng: random.Random, visit: int) -> ActionValues:
        return ActionValues(0.0, 1.0 if visit % 2 == 0 else -1.0)

    return PhaseStream(phase=phase, role=role, draw=draw, margin=0.0, dominant=None)


def streams_from_spec(spec: TinyGameSpec) -> List[PhaseStream]:
    """Stationary streams for every reachable decision phase under uniform play."""
    enumeration = enumerate_game(spec)
    streams: List[PhaseStream] = []
    for phase in sorted(enumeration.phases):
        info = enumeration.phases[phase]
        if info.role is Role.REVIEWER:
            streams.append(
                reviewer_phase_stream(phase, spec.reviewer.p_judge_correct, spec.reviewer.p_invalid)
            )
        else:
            streams.append(
                proposer_phase_stream(
                    phase,
                    info.belief_correct,
                    spec.proposer.p_correct_fresh,
                    spec.proposer.p_correct_hinted,
                )
            )
    return streams


@dataclass
class StreamRun:
    table: RegretTable
    decisions: int
    decay_series: List[Tuple[int, float]]  # (decisions so far, aggregate avg positive regret)


def run_decision_stream(
    streams: Sequence[PhaseStream],
    episodes: int,
    seed: int,
    policy_override: Optional[PolicyAtPhase] = None,
    collect_decay: bool = False,
) -> StreamRun:
    """Feed `episodes` decisions round-robin across streams into a fresh table.

    With `policy_override` the sampling policy is pinned (regret is still
    accumulated against it), which turns the verifier into a violation
    detector for non-regret-matching controllers.
    """
    table = RegretTable()
    rng = random.Random(seed)
    visit_counts: Dict[Phase, int] = {s.phase: 0 for s in streams}
    decay: List[Tuple[int, float]] = []
    next_checkpoint = 10

    for step in range(1, episodes + 1):
        stream = streams[(step - 1) % len(streams)]
        visit = visit_counts[stream.phase]
        visit_counts[stream.phase] = visit + 1
        values = stream.draw(rng, visit)
        policy = policy_override if policy_override is not None else table.policy_at(stream.phase)
        regret = instantaneous_regret(values, policy)
        table.accumulate(stream.phase, regret)
        table.record_visit(stream.phase, policy)
        if policy_override is None:
            table.refresh_policy(stream.phase)
        if collect_decay and (step >= next_checkpoint or step == episodes):
            aggregate = sum(table.max_positive_regret(s.phase) for s in streams)
            decay.append((step, aggregate / step))
            next_checkpoint = max(next_checkpoint + 1, int(next_checkpoint * 1.08))

    return StreamRun(table=table, decisions=episodes, decay_series=decay)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class PhaseRegretRow:
    phase: Phase
    visits: int
    avg_positive_regret: float
    bound: float
    ok: bool


@dataclass
class NoRegretReport:
    rows: List[PhaseRegretRow]
    decisions: int
    passed: bool


def verify_no_regret(
    game: Union[TinyGameSpec, Sequence[PhaseStream]],
    episodes: int,
    seed: int,
    slack: float = 2.5,
    min_visits: int = 100,
    policy_override: Optional[PolicyAtPhase] = None,
) -> NoRegretReport:
    """Check max_a Re(a,s)+/visits <= slack/sqrt(visits) at every busy phase.

    The guarantee holds with slack 2 for exact regret matching; the extra 25%
    covers stochastic realized values standing in for exact expectations.
    """
    if episodes < 100:
        raise ValueError("need at least 100 episodes for a meaningful check")
    streams = streams_from_spec(game) if isinstance(game, TinyGameSpec) else list(game)
    run = run_decision_stream(streams, episodes, seed, policy_override=policy_override)
    rows: List[PhaseRegretRow] = []
    passed = True
    for stream in streams:
        visits = run.table.visits.get(stream.phase, 0)
        if visits < min_visits:
            continue
        avg = run.table.max_positive_regret(stream.phase) / visits
        bound = slack / math.sqrt(visits)
        ok = avg <= bound
        passed = passed and ok
        rows.append(PhaseRegretRow(stream.phase, visits, avg, bound, ok))
    return NoRegretReport(rows=rows, decisions=run.decisions, passed=passed)


@dataclass
class ConvergenceMassRow:
    phase: Phase
    dominant: ActionMode
    margin: float
    visits: int
    average_mass: float
    band: float
    ok: bool


@dataclass
class ConvergenceReport:
    mass_rows: List[ConvergenceMassRow]
    decay_series: List[Tuple[int, float]]
    slope: float
    passed: bool


def verify_convergence(
    game: Union[TinyGameSpec, Sequence[PhaseStream]],
    episodes: int,
    seed: int,
    slack: float = 2.5,
    min_margin: float = 0.05,
    slope_band: Tuple[float, float] = (-0.6, -0.4),
) -> ConvergenceReport:
    """Check averaged-policy concentration and the 1/sqrt(M) decay rate.

    Phases with a strictly dominant action (margin >= min_margin) must put
    averaged mass >= 1 - slack/(margin*sqrt(visits)) on it. The decay slope is
    measured on the aggregate positive regret over all phases; zero-margin
    phases are what keep the aggregate on the worst-case sqrt(M) trajectory,
    dominant phases alone would decay at the faster 1/M rate.
    """
    streams = streams_from_spec(game) if isinstance(game, TinyGameSpec) else list(game)
    if not any(s.margin >= min_margin and s.dominant is not None for s in streams):
        raise ValueError("need at least one phase with a strictly dominant action")
    run = run_decision_stream(streams, episodes, seed, collect_decay=True)

    mass_rows: List[ConvergenceMassRow] = []
    passed = True
    for stream in streams:
        if stream.margin < min_margin or stream.dominant is None:
            continue
        visits = run.table.visits.get(stream.phase, 0)
        if visits == 0:
            continue
        avg = run.table.average_policy(stream.phase)
        mass = avg.p_speak if stream.dominant is ActionMode.SPEAK else avg.p_skip
        band = 1.0 - slack / (stream.margin * math.sqrt(visits))
        ok = mass >= band
        passed = passed and ok
        mass_rows.append(
            ConvergenceMassRow(stream.phase, stream.dominant, stream.margin, visits, mass, band, ok)
        )

    tail = [(m, r) for m, r in run.decay_series if m >= run.decisions / 10 and r > 0.0]
    if len(tail) >= 2:
        xs = [math.log(m) for m, _ in tail]
        ys = [math.log(r) for _, r in tail]
        n = len(xs)
        mean_x = sum(xs) / n
        mean_y = sum(ys) / n
        denom = sum((x - mean_x) ** 2 for x in xs)
        slope = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys)) / denom
    else:
        slope = float("nan")
    slope_ok = slope_band[0] <= slope <= slope_band[1]
    return ConvergenceReport(
        mass_rows=mass_rows,
        decay_series=run.decay_series,
        slope=slope,
        passed=passed and slope_ok,
    )


# ---------------------------------------------------------------------------
# Exact decomposition check (best fixed pure strategy vs positive-part aggregate)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionEvent:
    """One logged controller decision: enough to recompute regrets exactly."""

    phase: Phase
    v_skip: float
    v_speak: float
    p_skip: float
    p_speak: float


def best_fixed_action_regret(decisions: Sequence[DecisionEvent]) -> float:
    """Per-phase positive-part aggregate: sum_s (max_a Re(a, s))+."""
    sums: Dict[Phase, List[float]] = {}
    for d in decisions:
        entry = sums.setdefault(d.phase, [0.0, 0.0])
        ev = d.p_skip * d.v_skip + d.p_speak * d.v_speak
        entry[0] += d.v_skip - ev
        entry[1] += d.v_speak - ev
    return sum(max(0.0, max(entry)) for entry in sums.values())


@dataclass
class DecompositionCheck:
    best_pure_regret: Fraction
    positive_part_aggregate: Fraction
    n_phases: int
    n_strategies: int
    ok: bool


def check_regret_decomposition(decisions: Sequence[DecisionEvent], max_phases: int = 20) -> DecompositionCheck:
    """Exact-rational comparison of the hindsight-best pure strategy against the
    positive-part aggregate.

    Every float in the trace converts to a Fraction losslessly, so the
    inequality is checked with no tolerance at all. The left side comes from
    explicit enumeration over all 2^|phases| pure strategies, independent of
    the per-phase shortcut on the right.
    """
    skip_sum: Dict[Phase, Fraction] = {}
    speak_sum: Dict[Phase, Fraction] = {}
    ev_sum: Dict[Phase, Fraction] = {}
    for d in decisions:
        phase = d.phase
        v_skip = Fraction(d.v_skip)
        v_speak = Fraction(d.v_speak)
        ev = Fraction(d.p_skip) * v_skip + Fraction(d.p_speak) * v_speak
        skip_sum[phase] = skip_sum.get(phase, Fraction(0)) + v_skip
        speak_sum[phase] = speak_sum.get(phase, Fraction(0)) + v_speak
        ev_sum[phase] = ev_sum.get(phase, Fraction(0)) + ev

    phases = sorted(skip_sum)
    if len(phases) > max_phases:
        raise ValueError(f"{len(phases)} phases is too many for pure-strategy enumeration")

    zero = Fraction(0)
    aggregate = zero
    for phase in phases:
        re_skip = skip_sum[phase] - ev_sum[phase]
        re_speak = speak_sum[phase] - ev_sum[phase]
        aggregate += max(zero, max(re_skip, re_speak))

    best = None
    n_strategies = 0
    for assignment in product((ActionMode.SKIP, ActionMode.SPEAK), repeat=len(phases)):
        n_strategies += 1
        total = zero
        for phase, action in zip(phases, assignment):
            chosen = skip_sum[phase] if action is ActionMode.SKIP else speak_sum[phase]
            total += chosen - ev_sum[phase]
        if best is None or total > best:
            best = total
    assert best is not None

    return DecompositionCheck(
        best_pure_regret=best,
        positive_part_aggregate=aggregate,
        n_phases=len(phases),
        n_strategies=n_strategies,
        ok=best <= aggregate,
    )


def decision_events_from_turns(turns, role: Role) -> List[DecisionEvent]:
    """Extract one controller's fully-realized decisions from a task trace."""
    events: List[DecisionEvent] = []
    for rec in turns:
        if rec.actor is not role or rec.phase_before is None:
            continue
        if rec.values is None or rec.values[1] is None or rec.policy_used is None:
            continue
        events.append(
            DecisionEvent(
                phase=rec.phase_before,
                v_skip=rec.values[0],
                v_speak=rec.values[1],
                p_skip=rec.policy_used[0],
                p_speak=rec.policy_used[1],
            )
        )
    return events
