"""Judging, pass-rate protocols, retrieval baselines, and run statistics.

Two pass-rate protocols coexist. The legacy protocol screens each query's
candidate set for solvability first and counts non-solvable queries as
passed, which inflates the rate when candidates are junk; the revised
protocol judges the delivered solution only. Judging is either LLM-backed
(prompt round-trip) or oracle-backed: a pure function of per-query ground
truth (required API set plus expected answer fragments), which is what the
hermetic test stack uses.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .catalog import ApiCall, ApiIdentifier, ApiUniverse
from .llm import (
    BudgetMeter,
    FunctionSchema,
    Message,
    ROLE_SYSTEM,
    ROLE_USER,
    SchemaParam,
    chat,
    proxy_token_count,
    run_function_loop,
)
from .prompts import JUDGE_SOLVABLE, JUDGE_SOLVED, PromptLibrary

log = logging.getLogger(__name__)

ORACLE = "oracle"
LLM = "llm"

SOLVED = "solved"
UNSOLVED = "unsolved"
SOLVABLE = "solvable"
NON_SOLVABLE = "non_solvable"


class UndefinedRateError(ZeroDivisionError):
    """Pass rate requested over an empty denominator."""


class MissingGroundTruthError(KeyError):
    pass


def pass_rate_toolllm(n_nonsolvable: int, n_solved: int, n_unsolved: int) -> float:
    """Legacy protocol: non-solvable queries count as passed."""
    for n in (n_nonsolvable, n_solved, n_unsolved):
        if n < 0:
            raise ValueError("counts must be nonnegative")
    denominator = n_nonsolvable + n_solved + n_unsolved
    if denominator == 0:
        raise UndefinedRateError("no judged queries")
    return (n_nonsolvable + n_solved) / denominator


def pass_rate_revised(n_solved: int, n_unsolved: int) -> float:
    """Revised protocol: solved fraction over all judged queries."""
    if n_solved < 0 or n_unsolved < 0:
        raise ValueError("counts must be nonnegative")
    denominator = n_solved + n_unsolved
    if denominator == 0:
        raise UndefinedRateError("no judged queries")
    return n_solved / denominator


@dataclass(frozen=True)
class Solvability:
    solvable: bool
    rationale: str = ""

    @property
    def label(self) -> str:
        return SOLVABLE if self.solvable else NON_SOLVABLE


@dataclass(frozen=True)
class Verdict:
    solved: bool
    rationale: str = ""

    @property
    def label(self) -> str:
        return SOLVED if self.solved else UNSOLVED


@dataclass(frozen=True)
class GroundTruth:
    required_apis: tuple[ApiIdentifier, ...] = ()
    answer_fragments: tuple[str, ...] = ()

    def to_payload(self) -> dict[str, Any]:
        return {
            "required_apis": [id.to_payload() for id in self.required_apis],
            "answer_fragments": list(self.answer_fragments),
        }

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "GroundTruth":
        return cls(
            required_apis=tuple(
                ApiIdentifier.from_payload(x) for x in obj.get("required_apis", [])
            ),
            answer_fragments=tuple(
                str(x) for x in obj.get("answer_fragments", [])
            ),
        )


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    ground_truth: GroundTruth | None = None

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"id": self.id, "text": self.text}
        if self.ground_truth is not None:
            payload["ground_truth"] = self.ground_truth.to_payload()
        return payload

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "Query":
        gt = obj.get("ground_truth")
        return cls(
            id=str(obj["id"]),
            text=str(obj["text"]),
            ground_truth=GroundTruth.from_payload(gt) if gt else None,
        )


def load_benchmark(path: str) -> list[Query]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    queries = [Query.from_payload(q) for q in doc.get("queries", [])]
    if not queries:
        raise ValueError("no queries in benchmark file")
    return queries


def save_benchmark(path: str, queries: Sequence[Query]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"queries": [q.to_payload() for q in queries]},
            fh,
            indent=1,
            sort_keys=True,
        )


@dataclass
class Judge:
    """Solvability/solution judge: `oracle` (pure, ground-truth) or `llm`."""

    policy: str = ORACLE
    ground_truth: dict[str, GroundTruth] = field(default_factory=dict)
    backend: Any = None
    meter: BudgetMeter | None = None
    prompts: PromptLibrary = field(default_factory=PromptLibrary)

    def __post_init__(self) -> None:
        if self.policy not in (ORACLE, LLM):
            raise ValueError(f"unknown judge policy {self.policy!r}")
        if self.policy == LLM and self.backend is None:
            raise ValueError("llm judge requires a backend")

    def truth_for(self, query: Query) -> GroundTruth:
        if query.ground_truth is not None:
            return query.ground_truth
        try:
            return self.ground_truth[query.id]
        except KeyError:
            raise MissingGroundTruthError(
                f"oracle judge has no ground truth for query {query.id!r}"
            ) from None


def judge_solvability(
    query: Query, apis: Iterable[ApiIdentifier], judge: Judge
) -> Solvability:
    """Could this candidate set address the query at all?"""
    apis = list(apis)
    if judge.policy == ORACLE:
        truth = judge.truth_for(query)
        missing = [id for id in truth.required_apis if id not in set(apis)]
        if missing:
            return Solvability(
                False,
                "missing required APIs: "
                + ", ".join(id.dotted() for id in missing),
            )
        return Solvability(True, "all required APIs are in the candidate set")
    prompt = judge.prompts.render(
        JUDGE_SOLVABLE,
        {
            "query": query.text,
            "api_list": "\n".join(id.dotted() for id in apis) or "(none)",
        },
    )
    parsed, text = _llm_judge_parse(judge, prompt, NON_SOLVABLE.replace("_", "-"), SOLVABLE)
    if parsed is None:
        log.warning("unparseable solvability reply; defaulting to non-solvable")
        return Solvability(False, f"unparseable judge reply: {text[:200]}")
    return Solvability(parsed == SOLVABLE, text)


def judge_solution(
    query: Query, solution: str | None, calls: Sequence[ApiCall], judge: Judge
) -> Verdict:
    """Did the delivered solution resolve the query? Absent solution = unsolved."""
    if solution is None:
        return Verdict(False, "no solution was delivered")
    if judge.policy == ORACLE:
        truth = judge.truth_for(query)
        succeeded = {c.id for c in calls if not c.error}
        problems = []
        for id in truth.required_apis:
            if id not in succeeded:
                problems.append(
                    f"required API {id.dotted()} was not called successfully"
                )
        for fragment in truth.answer_fragments:
            if fragment not in solution:
                problems.append(f"answer missing expected fragment {fragment!r}")
        if problems:
            return Verdict(False, "; ".join(problems))
        return Verdict(True, "all required APIs called and answer fragments present")
    prompt = judge.prompts.render(
        JUDGE_SOLVED, {"query": query.text, "solution": solution}
    )
    parsed, text = _llm_judge_parse(judge, prompt, UNSOLVED, SOLVED)
    if parsed is None:
        log.warning("unparseable solution reply; defaulting to unsolved")
        return Verdict(False, f"unparseable judge reply: {text[:200]}")
    return Verdict(parsed == SOLVED, text)


def _llm_judge_parse(
    judge: Judge, prompt: str, negative: str, positive: str
) -> tuple[str | None, str]:
    """One judge round trip, retried once when the reply does not parse."""
    meter = judge.meter or BudgetMeter()
    dialogue = [Message(ROLE_USER, prompt)]
    schemas = [FunctionSchema("noop", "unused placeholder")]
    text = ""
    for attempt in (1, 2):
        reply = chat(judge.backend, dialogue, schemas, meter)
        text = reply.text or ""
        parsed = _parse_binary(text, negative, positive) if text else None
        if parsed is not None:
            return parsed, text
        log.warning("unparseable judge reply (attempt %d)", attempt)
    return None, text


def _parse_binary(text: str, negative: str, positive: str) -> str | None:
    """Order matters: the negative label contains the positive as a substring."""
    lowered = text.lower()
    if negative in lowered:
        return negative.replace("-", "_")
    if positive in lowered:
        return positive
    return None


def oracle_solvability_policy(
    judge: Judge, query: Query
) -> Callable[[str, list[ApiIdentifier]], bool]:
    """Adapter for the retriever's check_if_request_solvable hook."""

    def policy(_query_text: str, apis: list[ApiIdentifier]) -> bool:
        return judge_solvability(query, apis, judge).solvable

    return policy


# -- baselines -------------------------------------------------------------


def partition_catalog(
    universe: ApiUniverse, group_size: int = 500
) -> list[list[ApiIdentifier]]:
    """Disjoint cover of the catalog in document order, `group_size` per group."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    ids = list(universe.iter_api_ids())
    return [ids[i : i + group_size] for i in range(0, len(ids), group_size)]


def baseline_plain_agent(
    query: Query,
    universe: ApiUniverse,
    backend: Any,
    group_size: int = 500,
    *,
    judge: Judge | None = None,
    meter: BudgetMeter | None = None,
    pool_cap: int = 64,
    max_iterations_per_group: int = 10,
) -> "CandidatePool":
    """Flat retrieval baseline: API names in fixed-size groups, one group at a time.

    The model only ever sees names. After every addition the harness checks
    solvability; a True verdict stops the sweep before later groups.
    """
    from .retriever import CandidatePool, add_apis_into_api_pool

    meter = meter or BudgetMeter()
    pool = CandidatePool(cap=pool_cap)
    groups = partition_catalog(universe, group_size)
    schemas = [
        FunctionSchema(
            "add_apis_into_api_pool",
            "Add APIs into candidate pool.",
            (SchemaParam("apis", "array", True, "API identifiers to add"),),
        ),
        FunctionSchema("finish_search", "Send out finish signal."),
    ]
    solvable = False

    for group_index, group in enumerate(groups, start=1):
        if solvable:
            break
        listing = "\n".join(id.dotted() for id in group)
        seed = [
            Message(
                ROLE_SYSTEM,
                "Select APIs relevant to the user query from the list below by "
                "calling add_apis_into_api_pool; call finish_search when done "
                "with this group.",
            ),
            Message(
                ROLE_USER,
                f"Query: {query.text}\nGroup {group_index} of {len(groups)}:\n{listing}",
            ),
        ]
        finished = {"done": False}

        def dispatcher(call):
            if call.name == "finish_search":
                finished["done"] = True
                return "search finished"
            report = add_apis_into_api_pool(
                pool, call.arguments.get("apis", []) or [], universe
            )
            nonlocal solvable
            if report["accepted"] and judge is not None:
                solvable = judge_solvability(query, pool.snapshot(), judge).solvable
            return json.dumps(
                {"accepted": report["accepted"], "pool_size": report["pool_size"]}
            )

        def stop(_reply, _dialogue):
            if finished["done"]:
                return "finish_search"
            if solvable:
                return "solvable"
            return None

        try:
            run_function_loop(
                backend,
                seed,
                schemas,
                dispatcher,
                stop=stop,
                meter=meter,
                max_iterations=max_iterations_per_group,
            )
        except Exception as exc:
            log.warning("plain-agent group %d aborted: %s", group_index, exc)
            break
    return pool


def lexical_overlap_embedder(a: str, b: str) -> float:
    """Default similarity for tests: Jaccard overlap of lowercase word sets."""
    wa = set(a.lower().split())
    wb = set(b.lower().split())
    if not wa or not wb:
        return 0.0
    return len(wa & wb) / len(wa | wb)


def flatten_catalog(universe: ApiUniverse) -> str:
    lines = []
    for category in universe.category_names:
        for tool in universe.tools_of(category):
            lines.append(f"category {category} tool {tool.name}: {tool.description}")
            for spec in tool.apis:
                lines.append(f"api {spec.id.dotted()}: {spec.description}")
    return "\n".join(lines)


def segment_text(document: str, segment_tokens: int) -> list[str]:
    """Split on the proxy token measure, never inside a line."""
    if segment_tokens < 1:
        raise ValueError("segment_tokens must be >= 1")
    segments: list[str] = []
    current: list[str] = []
    current_tokens = 0
    for line in document.splitlines():
        line_tokens = proxy_token_count(line)
        if current and current_tokens + line_tokens > segment_tokens:
            segments.append("\n".join(current))
            current = []
            current_tokens = 0
        current.append(line)
        current_tokens += line_tokens
    if current:
        segments.append("\n".join(current))
    return segments


def baseline_rag(
    query: Query,
    universe: ApiUniverse,
    embedder: Callable[[str, str], float] | None = None,
    segment_tokens: int = 1000,
    top_k: int = 3,
    *,
    backend: Any = None,
    meter: BudgetMeter | None = None,
    pool_cap: int = 64,
) -> "CandidatePool":
    """Segment-similarity baseline: embed, rank, extract identifiers by model.

    Ties break toward the lower segment index. Without a backend the matching
    identifiers are extracted mechanically from the selected segments.
    """
    from .retriever import CandidatePool, add_apis_into_api_pool

    embedder = embedder or lexical_overlap_embedder
    pool = CandidatePool(cap=pool_cap)
    segments = segment_text(flatten_catalog(universe), segment_tokens)
    scored = sorted(
        ((embedder(query.text, seg), -i, i) for i, seg in enumerate(segments)),
        reverse=True,
    )
    selected = [segments[i] for _, _, i in scored[: max(0, top_k)]]
    if not selected:
        return pool

    if backend is None:
        for segment in selected:
            for id in universe.iter_api_ids():
                if id.dotted() in segment:
                    pool.add_many([id])
        return pool

    meter = meter or BudgetMeter()
    schemas = [
        FunctionSchema(
            "add_apis_into_api_pool",
            "Add APIs into candidate pool.",
            (SchemaParam("apis", "array", True, "API identifiers to add"),),
        ),
        FunctionSchema("finish_search", "Send out finish signal."),
    ]
    finished = {"done": False}

    def dispatcher(call):
        if call.name == "finish_search":
            finished["done"] = True
            return "search finished"
        report = add_apis_into_api_pool(
            pool, call.arguments.get("apis", []) or [], universe
        )
        return json.dumps(
            {"accepted": report["accepted"], "pool_size": report["pool_size"]}
        )

    seed = [
        Message(
            ROLE_SYSTEM,
            "Extract the API identifiers relevant to the query from the "
            "catalog segments below via add_apis_into_api_pool, then call "
            "finish_search.",
        ),
        Message(
            ROLE_USER,
            f"Query: {query.text}\nSegments:\n" + "\n---\n".join(selected),
        ),
    ]
    run_function_loop(
        backend,
        seed,
        schemas,
        dispatcher,
        stop=lambda _r, _d: "finish_search" if finished["done"] else None,
        meter=meter,
        max_iterations=10,
    )
    return pool


# -- statistics --------------------------------------------------------------


@dataclass
class RunStats:
    """Per-query consumption and shape metrics."""

    tokens: int = 0
    model_calls: int = 0
    reflections_tool: int = 0
    reflections_category: int = 0
    reflections_meta: int = 0
    reflections_solver: int = 0
    candidate_count: int = 0
    agents_category: int = 0
    agents_tool: int = 0
    rounds: int = 0
    pool_size_per_round: list[int] = field(default_factory=list)

    def to_payload(self) -> dict[str, Any]:
        return {
            "tokens": self.tokens,
            "model_calls": self.model_calls,
            "reflections_tool": self.reflections_tool,
            "reflections_category": self.reflections_category,
            "reflections_meta": self.reflections_meta,
            "reflections_solver": self.reflections_solver,
            "candidate_count": self.candidate_count,
            "agents_category": self.agents_category,
            "agents_tool": self.agents_tool,
            "rounds": self.rounds,
            "pool_size_per_round": list(self.pool_size_per_round),
        }

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "RunStats":
        return cls(
            tokens=int(obj["tokens"]),
            model_calls=int(obj["model_calls"]),
            reflections_tool=int(obj["reflections_tool"]),
            reflections_category=int(obj["reflections_category"]),
            reflections_meta=int(obj["reflections_meta"]),
            reflections_solver=int(obj["reflections_solver"]),
            candidate_count=int(obj["candidate_count"]),
            agents_category=int(obj["agents_category"]),
            agents_tool=int(obj["agents_tool"]),
            rounds=int(obj["rounds"]),
            pool_size_per_round=[int(x) for x in obj.get("pool_size_per_round", [])],
        )


_MEAN_FIELDS = (
    "tokens",
    "model_calls",
    "reflections_tool",
    "reflections_category",
    "reflections_meta",
    "reflections_solver",
    "candidate_count",
    "agents_category",
    "agents_tool",
    "rounds",
)


def collect_stats(rows: Sequence[Any]) -> dict[str, Any]:
    """Aggregate per-query stats into arithmetic means; bad rows are skipped."""
    usable: list[RunStats] = []
    for i, row in enumerate(rows):
        try:
            stats = row if isinstance(row, RunStats) else RunStats.from_payload(row)
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("stats row %d skipped: %s", i, exc)
            continue
        usable.append(stats)
    if not usable:
        return {"queries": 0, "means": {}, "per_query": []}
    means = {
        name: math.fsum(getattr(s, name) for s in usable) / len(usable)
        for name in _MEAN_FIELDS
    }
    return {
        "queries": len(usable),
        "means": means,
        "per_query": [s.to_payload() for s in usable],
    }


# -- reports -----------------------------------------------------------------


@dataclass
class QueryOutcome:
    query_id: str
    solvability: Solvability | None
    verdict: Verdict
    status: str = ""
    rounds: int = 0

    def to_payload(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "solvability": self.solvability.label if self.solvability else None,
            "verdict": self.verdict.label,
            "status": self.status,
            "rounds": self.rounds,
        }


@dataclass
class PassRateReport:
    """Both protocols over one query set.

    The legacy rate screens on solvability (solution verdicts only count for
    queries judged solvable); the revised rate judges every query's solution.
    """

    rows: list[QueryOutcome]
    n_non_solvable: int
    n_solved: int
    n_unsolved: int
    rate_eq1: float
    rate_eq2: float

    def to_payload(self) -> dict[str, Any]:
        return {
            "counts": {
                "non_solvable": self.n_non_solvable,
                "solved": self.n_solved,
                "unsolved": self.n_unsolved,
            },
            "rate_toolllm": self.rate_eq1,
            "rate_revised": self.rate_eq2,
            "rows": [r.to_payload() for r in self.rows],
        }

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_payload(), fh, indent=1, sort_keys=True)

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id", "solvability", "verdict", "status", "rounds"])
            for row in self.rows:
                writer.writerow(
                    [
                        row.query_id,
                        row.solvability.label if row.solvability else "",
                        row.verdict.label,
                        row.status,
                        row.rounds,
                    ]
                )


def build_report(rows: Sequence[QueryOutcome]) -> PassRateReport:
    if not rows:
        raise ValueError("no queries")
    n_non_solvable = sum(
        1 for r in rows if r.solvability is not None and not r.solvability.solvable
    )
    solvable_rows = [
        r for r in rows if r.solvability is None or r.solvability.solvable
    ]
    eq1_solved = sum(1 for r in solvable_rows if r.verdict.solved)
    eq1_unsolved = len(solvable_rows) - eq1_solved
    n_solved = sum(1 for r in rows if r.verdict.solved)
    n_unsolved = len(rows) - n_solved
    return PassRateReport(
        rows=list(rows),
        n_non_solvable=n_non_solvable,
        n_solved=n_solved,
        n_unsolved=n_unsolved,
        rate_eq1=pass_rate_toolllm(n_non_solvable, eq1_solved, eq1_unsolved),
        rate_eq2=pass_rate_revised(n_solved, n_unsolved),
    )
