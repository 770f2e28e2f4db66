"""Query solver over the candidate pool: chain-of-thought or DFS decision tree.

The model sees one schema per pool API plus a distinguished ``finish``
function whose outcome is give_solution, try_backtrack, or give_up.
Backtracking (DFSDT only) restores the parent dialogue snapshot and appends a
fixed retry note, so traces stay deterministic. A give_up must name the
functions it blames; names are matched case-insensitively against the offered
schemas and unmatched ones are dropped from the structured list.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from .catalog import ApiCall, ApiIdentifier, ApiUniverse, execute_api
from .llm import (
    BudgetExhaustedError,
    BudgetMeter,
    FunctionSchema,
    Message,
    ROLE_ASSISTANT,
    ROLE_FUNCTION_RESULT,
    ROLE_SYSTEM,
    ROLE_USER,
    SchemaParam,
    TokenUsage,
    chat,
)
from .prompts import SOLVER, PromptLibrary
from .tracing import Trace

log = logging.getLogger(__name__)

COT = "cot"
DFSDT = "dfsdt"

GIVE_SOLUTION = "give_solution"
TRY_BACKTRACK = "try_backtrack"
GIVE_UP = "give_up"

FINISH = "finish"
BACKTRACK_NOTE = "previous attempt failed, trying an alternative"


@dataclass
class SolverConfig:
    max_api_calls: int = 10
    strategy: str = DFSDT
    max_depth: int | None = None  # defaults to max_api_calls
    max_steps: int = 50

    def __post_init__(self) -> None:
        if self.max_api_calls < 1:
            raise ValueError("max_api_calls must be >= 1")
        if self.strategy not in (COT, DFSDT):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def depth_limit(self) -> int:
        return self.max_depth if self.max_depth is not None else self.max_api_calls


@dataclass
class FinishOutcome:
    kind: str
    answer: str = ""
    reason: str = ""
    blamed: tuple[str, ...] = ()

    def to_payload(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "answer": self.answer,
            "reason": self.reason,
            "blamed": list(self.blamed),
        }


@dataclass
class SolverNode:
    """One decision-tree state: a dialogue snapshot plus tree links."""

    id: int
    dialogue: list[Message]
    parent: "SolverNode | None" = None
    depth: int = 0
    children: list["SolverNode"] = field(default_factory=list)
    dead: bool = False


@dataclass
class SolverResult:
    outcome: FinishOutcome  # give_solution or give_up, never try_backtrack
    api_calls: list[ApiCall]
    dialogue: list[Message]
    usage: TokenUsage
    schema_index: dict[str, ApiIdentifier]
    nodes: list[dict[str, Any]] = field(default_factory=list)

    @property
    def solved_text(self) -> str | None:
        return self.outcome.answer if self.outcome.kind == GIVE_SOLUTION else None


def sanitize_schema_name(raw: str) -> str:
    return re.sub(r"[^0-9A-Za-z_.\-]", "_", raw)


def render_pool_schemas(
    pool_ids: Sequence[ApiIdentifier], universe: ApiUniverse
) -> list[FunctionSchema]:
    schemas, _ = build_schema_table(pool_ids, universe)
    return schemas


def build_schema_table(
    pool_ids: Sequence[ApiIdentifier], universe: ApiUniverse
) -> tuple[list[FunctionSchema], dict[str, ApiIdentifier]]:
    """One schema per resolvable pool API; names stay injective via suffixes."""
    schemas: list[FunctionSchema] = []
    index: dict[str, ApiIdentifier] = {}
    for id in pool_ids:
        try:
            spec = universe.resolve(id)
            tool = next(
                t for t in universe.tools_of(id.category) if t.name == id.tool
            )
        except Exception:
            log.warning("pool id %s no longer resolves; skipped", id.dotted())
            continue
        name = sanitize_schema_name(id.dotted())
        if name in index:
            n = 2
            while f"{name}_{n}" in index:
                n += 1
            name = f"{name}_{n}"
        params = tuple(
            SchemaParam(p.name, p.type, True, p.description)
            for p in spec.required_params
        ) + tuple(
            SchemaParam(p.name, p.type, False, p.description)
            for p in spec.optional_params
        )
        description = " ".join(
            part for part in (tool.description, spec.description) if part
        )
        schemas.append(FunctionSchema(name, description, params))
        index[name] = id
    return schemas, index


def finish_schema() -> FunctionSchema:
    return FunctionSchema(
        FINISH,
        "Conclude the attempt: give the final solution, backtrack to try an "
        "alternative path, or give up naming the functions that failed.",
        (
            SchemaParam(
                "outcome",
                "string",
                True,
                "one of give_solution | try_backtrack | give_up",
            ),
            SchemaParam("answer", "string", False, "final answer (give_solution)"),
            SchemaParam("reason", "string", False, "failure reason (give_up)"),
            SchemaParam(
                "blamed", "array", False, "function names that failed (give_up)"
            ),
        ),
    )


def build_task_description(
    query: str, schemas: Sequence[FunctionSchema], failure_note: str | None = None
) -> str:
    lines = []
    if failure_note:
        lines.append(f"Previous attempt failed: {failure_note}")
    lines.append(f"Query: {query}")
    lines.append("Available functions:")
    for schema in schemas:
        lines.append(f"- {schema.name}: {schema.description}")
    lines.append(f"- {FINISH}: conclude with give_solution, try_backtrack or give_up")
    return "\n".join(lines)


def _parse_finish(call_args: dict[str, Any]) -> FinishOutcome | None:
    kind = str(call_args.get("outcome", "")).strip().lower()
    if kind not in (GIVE_SOLUTION, TRY_BACKTRACK, GIVE_UP):
        return None
    blamed_raw = call_args.get("blamed", []) or []
    if isinstance(blamed_raw, str):
        blamed_raw = [blamed_raw]
    return FinishOutcome(
        kind=kind,
        answer=str(call_args.get("answer", "")),
        reason=str(call_args.get("reason", "")),
        blamed=tuple(str(b) for b in blamed_raw),
    )


def _sanitize_blames(
    blamed: Sequence[str], offered: dict[str, ApiIdentifier]
) -> tuple[str, ...]:
    by_lower = {name.lower(): name for name in offered}
    kept = []
    for raw in blamed:
        hit = by_lower.get(raw.strip().lower())
        if hit is not None:
            kept.append(hit)
        else:
            log.warning("blamed name %r not among offered schemas; dropped", raw)
    return tuple(dict.fromkeys(kept))


class _DfsTree:
    """Bookkeeping for the DFSDT strategy; node ids follow visit order."""

    def __init__(self, root_dialogue: list[Message], trace: Trace | None):
        self.trace = trace
        self.root = SolverNode(0, list(root_dialogue))
        self.active = self.root
        self.visited: list[dict[str, Any]] = [
            {"id": 0, "parent": None, "depth": 0, "dead": False}
        ]
        self._next_id = 1

    def expand(self, dialogue: list[Message]) -> SolverNode:
        node = SolverNode(
            self._next_id,
            list(dialogue),
            parent=self.active,
            depth=self.active.depth + 1,
        )
        self._next_id += 1
        self.active.children.append(node)
        self.active = node
        self.visited.append(
            {"id": node.id, "parent": node.parent.id, "depth": node.depth, "dead": False}
        )
        if self.trace is not None:
            self.trace.record(
                "solver", "solver", "node",
                node_id=node.id, parent_id=node.parent.id, depth=node.depth,
            )
        return node

    def backtrack(self) -> list[Message] | None:
        """Mark the active node dead; returns the restored dialogue or None at root."""
        if self.active.parent is None:
            return None
        dead = self.active
        dead.dead = True
        for entry in self.visited:
            if entry["id"] == dead.id:
                entry["dead"] = True
        self.active = dead.parent
        if self.trace is not None:
            self.trace.record(
                "solver", "solver", "node",
                node_id=dead.id, backtracked_to=self.active.id, dead=True,
            )
        restored = list(self.active.dialogue)
        restored.append(Message(ROLE_USER, BACKTRACK_NOTE))
        return restored


def solve(
    query: str,
    pool_ids: Sequence[ApiIdentifier],
    universe: ApiUniverse,
    backend: Any,
    config: SolverConfig | None = None,
    *,
    meter: BudgetMeter | None = None,
    seed_dialogue: Sequence[Message] | None = None,
    trace: Trace | None = None,
    prompts: PromptLibrary | None = None,
) -> SolverResult:
    """Resolve the query against the pool; always ends give_solution or give_up.

    The API-call budget counts pool-API executions only, not finish; hitting
    it synthesizes give_up("call budget exhausted"). Token-budget exhaustion
    synthesizes give_up("token budget").
    """
    config = config or SolverConfig()
    meter = meter or BudgetMeter()
    prompts = prompts or PromptLibrary()

    pool_schemas, index = build_schema_table(pool_ids, universe)
    if not pool_schemas:
        return SolverResult(
            outcome=FinishOutcome(GIVE_UP, reason="no candidate APIs"),
            api_calls=[],
            dialogue=list(seed_dialogue or []),
            usage=TokenUsage(),
            schema_index={},
        )
    schemas = pool_schemas + [finish_schema()]

    if seed_dialogue is not None:
        dialogue = list(seed_dialogue)
    else:
        bootstrap = prompts.render(
            SOLVER, {"task_description": build_task_description(query, pool_schemas)}
        )
        dialogue = [Message(ROLE_SYSTEM, bootstrap), Message(ROLE_USER, query)]

    tree = _DfsTree(dialogue, trace) if config.strategy == DFSDT else None
    api_calls: list[ApiCall] = []
    calls_before = meter.calls
    prompt_tokens = 0
    completion_tokens = 0
    outcome: FinishOutcome | None = None
    steps = 0

    def offered(name: str) -> bool:
        return name in index or name == FINISH

    while outcome is None:
        if steps >= config.max_steps:
            outcome = FinishOutcome(GIVE_UP, reason="iteration guard exceeded")
            break
        steps += 1
        try:
            reply = chat(backend, dialogue, schemas, meter)
        except BudgetExhaustedError:
            outcome = FinishOutcome(GIVE_UP, reason="token budget")
            break
        prompt_tokens += reply.usage.prompt
        completion_tokens += reply.usage.completion
        if trace is not None:
            trace.record(
                "solver", "solver", "model_call",
                reply="call" if reply.call else "text",
                name=reply.call.name if reply.call else None,
            )

        if reply.call is None:
            dialogue.append(Message(ROLE_ASSISTANT, content=reply.text or ""))
            if tree is not None:
                dialogue = _expand_or_backtrack(tree, dialogue, config)
                if dialogue is None:
                    outcome = FinishOutcome(GIVE_UP, reason="no alternatives at root")
            continue

        call = reply.call
        if call.name == FINISH:
            parsed = _parse_finish(call.arguments) if not call.malformed else None
            dialogue.append(Message(ROLE_ASSISTANT, call=call))
            if parsed is None:
                dialogue.append(
                    Message(
                        ROLE_FUNCTION_RESULT,
                        content="invalid finish outcome; use give_solution, "
                        "try_backtrack or give_up",
                        call_result_for=FINISH,
                    )
                )
                continue
            dialogue.append(
                Message(
                    ROLE_FUNCTION_RESULT,
                    content=f"finish acknowledged: {parsed.kind}",
                    call_result_for=FINISH,
                )
            )
            if parsed.kind == GIVE_SOLUTION:
                outcome = parsed
            elif parsed.kind == GIVE_UP:
                outcome = FinishOutcome(
                    GIVE_UP,
                    reason=parsed.reason,
                    blamed=_sanitize_blames(parsed.blamed, index),
                )
            else:  # try_backtrack
                if tree is None:
                    outcome = FinishOutcome(
                        GIVE_UP,
                        reason="tried to backtrack under the chain-of-thought "
                        "strategy; " + (parsed.reason or "no alternative available"),
                    )
                else:
                    restored = tree.backtrack()
                    if restored is None:
                        outcome = FinishOutcome(
                            GIVE_UP, reason="no alternatives at root"
                        )
                    else:
                        dialogue = restored
            continue

        if not offered(call.name):
            dialogue.append(Message(ROLE_ASSISTANT, call=call))
            dialogue.append(
                Message(
                    ROLE_FUNCTION_RESULT,
                    content=f"function {call.name} does not exist",
                    call_result_for=call.name,
                )
            )
        elif call.malformed:
            dialogue.append(Message(ROLE_ASSISTANT, call=call))
            dialogue.append(
                Message(
                    ROLE_FUNCTION_RESULT,
                    content=f"malformed arguments for function {call.name}: "
                    f"{call.raw_arguments}",
                    call_result_for=call.name,
                )
            )
        else:
            if len(api_calls) >= config.max_api_calls:
                outcome = FinishOutcome(GIVE_UP, reason="call budget exhausted")
                break
            id = index[call.name]
            result = execute_api(universe, id, call.arguments)
            api_calls.append(
                ApiCall(id, dict(call.arguments), result.text, result.error)
            )
            dialogue.append(Message(ROLE_ASSISTANT, call=call))
            dialogue.append(
                Message(
                    ROLE_FUNCTION_RESULT,
                    content=result.text,
                    call_result_for=call.name,
                )
            )
            if trace is not None:
                trace.record(
                    "solver", "solver", "function_call",
                    name=call.name, args=call.arguments,
                    error=result.error,
                )
        if tree is not None:
            new_dialogue = _expand_or_backtrack(tree, dialogue, config)
            if new_dialogue is None:
                outcome = FinishOutcome(GIVE_UP, reason="no alternatives at root")
            else:
                dialogue = new_dialogue

    usage = TokenUsage(prompt=prompt_tokens, completion=completion_tokens)
    result = SolverResult(
        outcome=outcome,
        api_calls=api_calls,
        dialogue=dialogue,
        usage=usage,
        schema_index=index,
        nodes=tree.visited if tree is not None else [],
    )
    if trace is not None:
        trace.record(
            "solver", "solver", "result",
            outcome=outcome.kind, reason=outcome.reason,
            blamed=list(outcome.blamed), api_calls=len(api_calls),
            model_calls=meter.calls - calls_before,
        )
    return result


def _expand_or_backtrack(
    tree: _DfsTree, dialogue: list[Message], config: SolverConfig
) -> list[Message] | None:
    """Grow the tree with the new state, or force a backtrack at the depth limit."""
    if tree.active.depth + 1 > config.depth_limit:
        return tree.backtrack()
    tree.expand(dialogue)
    return dialogue


def dfs_step(tree: _DfsTree, dialogue: list[Message], config: SolverConfig):
    """Exposed tree transition used by solve(); see _DfsTree for semantics."""
    return _expand_or_backtrack(tree, dialogue, config)
