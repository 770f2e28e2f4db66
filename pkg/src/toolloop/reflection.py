"""Closed-loop controller: attempt, judge, reflect, retry.

A failed attempt yields a failure reason (the solver's own give-up rationale,
or the judge's) which is appended to every retriever agent's dialogue. The
non-finished agents then resume bottom-up (tool agents, category agents,
meta-agent), growing the candidate pool; blamed APIs are pruned from the pool
for good and their call/result pairs cut from the solver history before the
solver re-runs. Rounds repeat until solved, the round limit, the token
budget, or quiescence (pool unchanged and every agent finished).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any

from .catalog import ApiUniverse
from .evaluation import (
    Judge,
    Query,
    RunStats,
    Verdict,
    judge_solution,
    judge_solvability,
)
from .llm import BudgetExhaustedError, BudgetMeter, Message, ROLE_USER
from .prompts import (
    PromptLibrary,
    REFLECT_CATEGORY,
    REFLECT_META,
    REFLECT_TOOL,
    SOLVER,
)
from .retriever import (
    ACTIVE,
    CATEGORY,
    CandidatePool,
    META,
    RetrievalRun,
    RetrieverConfig,
    TOOL,
)
from .solver import (
    GIVE_SOLUTION,
    GIVE_UP,
    SolverConfig,
    SolverResult,
    build_schema_table,
    build_task_description,
    solve,
)
from .tracing import Trace

log = logging.getLogger(__name__)

ORIGIN_SOLVER = "solver_give_up"
ORIGIN_JUDGE = "judge_unsolved"

STATUS_SOLVED = "solved"
STATUS_UNSOLVED = "unsolved"
STATUS_GAVE_UP = "gave_up"
STATUS_BUDGET = "budget_exhausted"

_REFLECT_TEMPLATE = {TOOL: REFLECT_TOOL, CATEGORY: REFLECT_CATEGORY, META: REFLECT_META}


class ContractViolationError(RuntimeError):
    """A reflection step was asked to process a successful attempt."""


@dataclass(frozen=True)
class FailureReport:
    origin: str
    reason: str
    blamed: tuple[str, ...] = ()


@dataclass
class LoopConfig:
    max_rounds: int = 8
    token_budget: int = 200_000

    def __post_init__(self) -> None:
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


@dataclass
class FinalResult:
    query_id: str
    status: str
    solution: str | None
    rounds: int
    stats: RunStats
    pool: CandidatePool
    trace: Trace
    registry: Any = None

    def to_payload(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "status": self.status,
            "solution": self.solution,
            "rounds": self.rounds,
            "stats": self.stats.to_payload(),
        }


def extract_failure(attempt: SolverResult | Verdict) -> FailureReport:
    """Failure reason and blame from a failed attempt; raises on a solved one."""
    if isinstance(attempt, SolverResult):
        if attempt.outcome.kind != GIVE_UP:
            raise ContractViolationError(
                "extract_failure on a solver result that did not give up"
            )
        return FailureReport(
            ORIGIN_SOLVER, attempt.outcome.reason, tuple(attempt.outcome.blamed)
        )
    if isinstance(attempt, Verdict):
        if attempt.solved:
            raise ContractViolationError("extract_failure on a solved verdict")
        return FailureReport(ORIGIN_JUDGE, attempt.rationale)
    raise TypeError(f"cannot extract failure from {type(attempt).__name__}")


def reflect_retriever(report: FailureReport, run: RetrievalRun) -> CandidatePool:
    """Feed the failure reason to every agent, then resume bottom-up.

    The reason lands in every dialogue (finished agents included); only
    non-finished agents resume, tool tier first, then category, then meta.
    A solvable-true or pool-full signal raised mid-phase skips later tiers.
    """
    for agent in run.registry.agents():
        prompt = run.prompts.render(
            _REFLECT_TEMPLATE[agent.kind.tier], {"fail_reason": report.reason}
        )
        agent.dialogue.append(Message(ROLE_USER, prompt))
        run.trace.record(agent.id, agent.kind.tier, "reflect", origin=report.origin)

    resumable = run.registry.agents(status=ACTIVE)
    if not resumable:
        run.trace.record("run", "system", "reflect", note="reflection exhausted")
        return run.pool

    run.reset_stop()
    for tier in (TOOL, CATEGORY, META):
        if run.stop_reason is not None:
            break
        batch = run.registry.agents(tier=tier, status=ACTIVE)
        if not batch:
            continue
        for agent in batch:
            run.trace.record(agent.id, tier, "resume")
        run.drive(batch)
    return run.pool


def reflect_solver(
    report: FailureReport,
    pool: CandidatePool,
    dialogue: list[Message],
    schema_index: dict,
    *,
    universe: ApiUniverse,
    query: Query,
    prompts: PromptLibrary | None = None,
) -> tuple[CandidatePool, list[Message]]:
    """Prune blamed APIs (permanently) and cut their call/result pairs.

    Returns the pruned pool and the cleaned dialogue with a fresh solver
    bootstrap (failure reason plus the updated function list) appended.
    """
    prompts = prompts or PromptLibrary()
    by_lower = {name.lower(): name for name in schema_index}
    blamed_names: set[str] = set()
    for raw in report.blamed:
        hit = by_lower.get(raw.strip().lower())
        if hit is None:
            log.warning("blamed name %r not among offered schemas; ignored", raw)
            continue
        blamed_names.add(hit.lower())
        id = schema_index[hit]
        if id in pool:
            pool.remove(id, ban=True)
        else:
            log.warning("blamed API %s not in pool; ignored", id.dotted())

    cleaned: list[Message] = []
    for message in dialogue:
        if (
            message.call is not None
            and message.call.name.lower() in blamed_names
        ):
            continue
        if (
            message.call_result_for is not None
            and message.call_result_for.lower() in blamed_names
        ):
            continue
        cleaned.append(message)

    schemas, _ = build_schema_table(pool.snapshot(), universe)
    task = build_task_description(query.text, schemas, failure_note=report.reason)
    cleaned.append(
        Message(ROLE_USER, prompts.render(SOLVER, {"task_description": task}))
    )
    return pool, cleaned


def _status_for(failure: FailureReport) -> str:
    return STATUS_GAVE_UP if failure.origin == ORIGIN_SOLVER else STATUS_UNSOLVED


def run_closed_loop(
    query: Query,
    universe: ApiUniverse,
    backend: Any,
    judge: Judge,
    loop_config: LoopConfig | None = None,
    retriever_config: RetrieverConfig | None = None,
    solver_config: SolverConfig | None = None,
    *,
    prompts: PromptLibrary | None = None,
    trace: Trace | None = None,
) -> FinalResult:
    """Round 0: retrieve, solve, judge. Later rounds: reflect, solve, judge."""
    loop_config = loop_config or LoopConfig()
    solver_config = solver_config or SolverConfig()
    prompts = prompts or PromptLibrary()
    trace = trace or Trace()
    meter = BudgetMeter(loop_config.token_budget)
    if judge.meter is None:
        # the global budget covers judge calls too (llm policy only)
        judge = dataclasses.replace(judge, meter=meter)

    def solvability_policy(_text: str, ids: list) -> bool:
        return judge_solvability(query, ids, judge).solvable

    rconfig = dataclasses.replace(
        retriever_config or RetrieverConfig(), solvability=solvability_policy
    )
    run = RetrievalRun(
        query.text, universe, backend, rconfig,
        meter=meter, trace=trace, prompts=prompts,
    )

    trace.record("run", "system", "round", index=0)
    run.drive([run.ensure_meta()])
    retrieval_reason = run.run_stop_reason()
    trace.record("run", "system", "stop", reason=retrieval_reason, phase="retrieval")

    pool_sizes = [len(run.pool)]
    solver_runs = 0
    status: str | None = None
    solution: str | None = None
    rounds_used = 0
    failure: FailureReport | None = None
    seed_dialogue: list[Message] | None = None
    last_result: SolverResult | None = None

    for round_index in range(0, loop_config.max_rounds + 1):
        if round_index > 0:
            if meter.exhausted():
                status = STATUS_BUDGET
                break
            trace.record("run", "system", "round", index=round_index)
            assert failure is not None and last_result is not None
            entries_before = run.pool.snapshot()
            reflect_retriever(failure, run)
            pool_sizes.append(len(run.pool))
            _, seed_dialogue = reflect_solver(
                failure,
                run.pool,
                last_result.dialogue,
                last_result.schema_index,
                universe=universe,
                query=query,
                prompts=prompts,
            )
            # Unchanged by both reflection steps and nobody left to resume:
            # a further attempt would replay the last one verbatim.
            if run.pool.snapshot() == entries_before and run.registry.all_finished():
                trace.record("run", "system", "reflect", note="no progress")
                status = _status_for(failure)
                break
            rounds_used = round_index

        result = solve(
            query.text,
            run.pool.snapshot(),
            universe,
            backend,
            solver_config,
            meter=meter,
            seed_dialogue=seed_dialogue,
            trace=trace,
            prompts=prompts,
        )
        solver_runs += 1
        last_result = result

        if result.outcome.kind == GIVE_SOLUTION:
            try:
                verdict = judge_solution(
                    query, result.outcome.answer, result.api_calls, judge
                )
            except BudgetExhaustedError:
                verdict = Verdict(False, "token budget exhausted before judging")
            trace.record(
                "run", "system", "judge",
                verdict=verdict.label, rationale=verdict.rationale,
            )
            if verdict.solved:
                status = STATUS_SOLVED
                solution = result.outcome.answer
                break
            failure = extract_failure(verdict)
        else:
            failure = extract_failure(result)
        if meter.exhausted():
            status = STATUS_BUDGET
            break
    if status is None:
        assert failure is not None
        status = _status_for(failure)

    run.pool.close()
    events = trace.events
    stats = RunStats(
        tokens=meter.used,
        model_calls=meter.calls,
        reflections_tool=sum(
            1 for e in events if e.event == "resume" and e.kind == TOOL
        ),
        reflections_category=sum(
            1 for e in events if e.event == "resume" and e.kind == CATEGORY
        ),
        reflections_meta=sum(
            1 for e in events if e.event == "resume" and e.kind == META
        ),
        reflections_solver=max(0, solver_runs - 1),
        candidate_count=len(run.pool),
        agents_category=len(run.registry.agents(tier=CATEGORY)),
        agents_tool=len(run.registry.agents(tier=TOOL)),
        rounds=rounds_used,
        pool_size_per_round=pool_sizes,
    )
    trace.record(
        "run", "system", "result",
        status=status, rounds=rounds_used, candidate_count=len(run.pool),
    )
    return FinalResult(
        query_id=query.id,
        status=status,
        solution=solution,
        rounds=rounds_used,
        stats=stats,
        pool=run.pool,
        trace=trace,
        registry=run.registry,
    )
