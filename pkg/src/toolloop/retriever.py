"""Hierarchical API retriever: meta-agent -> category agents -> tool agents.

The meta-agent assigns categories to category agents; category agents assign
tool subsets (at most K per agent) to tool agents; tool agents push API
identifiers into one shared, capped, deduplicated candidate pool. A run ends
when a tool agent's solvability check returns True, the pool fills, every
agent finishes, or the token budget runs out.

Agents run concurrently by default; deterministic mode steps them round-robin
in creation order, one loop iteration at a time, which makes the event trace
reproducible. The stop signal is cooperative: it is checked between loop
iterations, and a model reply in flight when it fires is discarded.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

from .catalog import (
    ApiIdentifier,
    ApiUniverse,
    UnknownNameError,
    get_api_details,
    get_apis_in_tool,
    get_tool_descriptions,
    get_tools_in_category,
)
from .llm import (
    BudgetMeter,
    FunctionCallRequest,
    FunctionLoop,
    FunctionSchema,
    Message,
    ModelReply,
    ROLE_SYSTEM,
    ROLE_USER,
    SchemaParam,
)
from .prompts import (
    CATEGORY_AGENT,
    META_AGENT,
    PromptLibrary,
    TOOL_AGENT,
)
from .tracing import Trace

log = logging.getLogger(__name__)

META = "meta"
CATEGORY = "category"
TOOL = "tool"

ACTIVE = "active"
FINISHED = "finished"

STOP_SOLVABLE = "solvable"
STOP_POOL_FULL = "pool full"
STOP_ALL_FINISHED = "all agents finished"
STOP_ALL_IDLE = "all agents idle"
STOP_BUDGET = "budget"

SolvabilityPolicy = Callable[[str, "list[ApiIdentifier]"], bool]


class PoolClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentKind:
    tier: str
    category: str | None = None
    tools: tuple[str, ...] = ()

    def scope_key(self) -> tuple:
        return (self.tier, self.category, self.tools)

    def to_payload(self) -> dict[str, Any]:
        return {"tier": self.tier, "category": self.category, "tools": list(self.tools)}

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "AgentKind":
        return cls(obj["tier"], obj.get("category"), tuple(obj.get("tools", ())))


@dataclass
class AgentRuntime:
    """One agent: its scope, dialogue (owned exclusively), and status."""

    id: str
    kind: AgentKind
    dialogue: list[Message]
    status: str = ACTIVE
    parent_id: str | None = None

    def to_payload(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.to_payload(),
            "status": self.status,
            "parent_id": self.parent_id,
            "dialogue": [m.to_payload() for m in self.dialogue],
        }

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "AgentRuntime":
        return cls(
            id=obj["id"],
            kind=AgentKind.from_payload(obj["kind"]),
            dialogue=[Message.from_payload(m) for m in obj["dialogue"]],
            status=obj["status"],
            parent_id=obj.get("parent_id"),
        )


class AgentRegistry:
    """All agents of one query run, in creation order. Inserts are atomic."""

    def __init__(self) -> None:
        self._agents: dict[str, AgentRuntime] = {}
        self._order: list[str] = []
        self._by_scope: dict[tuple, str] = {}
        self._tool_counter = 0
        self._lock = threading.Lock()

    def register(self, kind: AgentKind, dialogue: list[Message], parent_id: str | None) -> tuple[AgentRuntime, bool]:
        """Insert an agent; returns (agent, created). Same scope -> existing agent."""
        with self._lock:
            existing = self._by_scope.get(kind.scope_key())
            if existing is not None:
                return self._agents[existing], False
            if kind.tier == META:
                agent_id = "meta"
            elif kind.tier == CATEGORY:
                agent_id = f"category[{kind.category}]"
            else:
                self._tool_counter += 1
                agent_id = f"tool[{self._tool_counter}]"
            agent = AgentRuntime(agent_id, kind, dialogue, parent_id=parent_id)
            self._agents[agent_id] = agent
            self._order.append(agent_id)
            self._by_scope[kind.scope_key()] = agent_id
            return agent, True

    def get(self, agent_id: str) -> AgentRuntime:
        return self._agents[agent_id]

    def find_by_scope(self, kind: AgentKind) -> AgentRuntime | None:
        agent_id = self._by_scope.get(kind.scope_key())
        return self._agents[agent_id] if agent_id else None

    def agents(self, tier: str | None = None, status: str | None = None) -> list[AgentRuntime]:
        """Agents in creation order, optionally filtered."""
        with self._lock:
            ids = list(self._order)
        out = []
        for agent_id in ids:
            agent = self._agents[agent_id]
            if tier is not None and agent.kind.tier != tier:
                continue
            if status is not None and agent.status != status:
                continue
            out.append(agent)
        return out

    def all_finished(self) -> bool:
        return all(a.status == FINISHED for a in self.agents())

    def __len__(self) -> int:
        return len(self._order)

    def to_payload(self) -> dict[str, Any]:
        return {"agents": [a.to_payload() for a in self.agents()]}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_payload(), fh, sort_keys=True, indent=1)

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "AgentRegistry":
        registry = cls()
        for raw in obj["agents"]:
            agent = AgentRuntime.from_payload(raw)
            registry._agents[agent.id] = agent
            registry._order.append(agent.id)
            registry._by_scope[agent.kind.scope_key()] = agent.id
            if agent.kind.tier == TOOL:
                registry._tool_counter += 1
        return registry

    @classmethod
    def load(cls, path: str) -> "AgentRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_payload(json.load(fh))


class CandidatePool:
    """Global ordered, deduplicated API selection with a hard capacity cap.

    Append plus cap check happens under one lock. Identifiers removed with
    ban=True (reflection pruning) are refused if re-added later in the run.
    """

    def __init__(self, cap: int = 64):
        if cap < 1:
            raise ValueError("pool cap must be positive")
        self.cap = cap
        self.closed = False
        self._entries: list[ApiIdentifier] = []
        self._seen: set[ApiIdentifier] = set()
        self._banned: set[ApiIdentifier] = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, id: ApiIdentifier) -> bool:
        return id in self._seen

    def snapshot(self) -> list[ApiIdentifier]:
        with self._lock:
            return list(self._entries)

    def is_full(self) -> bool:
        return len(self._entries) >= self.cap

    def close(self) -> None:
        self.closed = True

    def add_many(self, ids: Sequence[ApiIdentifier]) -> dict[str, Any]:
        if self.closed:
            raise PoolClosedError("retrieval already terminated")
        results: list[tuple[ApiIdentifier, str]] = []
        accepted = 0
        with self._lock:
            for id in ids:
                if id in self._banned:
                    results.append((id, "removed by reflection"))
                elif id in self._seen:
                    results.append((id, "duplicate"))
                elif len(self._entries) >= self.cap:
                    results.append((id, "pool full"))
                else:
                    self._entries.append(id)
                    self._seen.add(id)
                    accepted += 1
                    results.append((id, "added"))
            return {
                "accepted": accepted,
                "results": results,
                "pool_size": len(self._entries),
                "pool_full": len(self._entries) >= self.cap,
            }

    def remove(self, id: ApiIdentifier, ban: bool = False) -> bool:
        with self._lock:
            if ban:
                self._banned.add(id)
            if id not in self._seen:
                return False
            self._entries.remove(id)
            self._seen.discard(id)
            return True


@dataclass
class RetrieverConfig:
    max_tools_per_agent: int = 5
    pool_cap: int = 64
    deterministic: bool = True
    max_agent_iterations: int = 30
    max_workers: int = 8
    solvability: SolvabilityPolicy | None = None

    def __post_init__(self) -> None:
        if self.max_tools_per_agent < 1:
            raise ValueError("max_tools_per_agent must be >= 1")
        if self.pool_cap < 1:
            raise ValueError("pool_cap must be >= 1")


@dataclass
class RetrievalResult:
    pool: CandidatePool
    registry: AgentRegistry
    trace: Trace
    stop_reason: str


def add_apis_into_api_pool(
    pool: CandidatePool,
    apis: Iterable[Any],
    universe: ApiUniverse | None = None,
) -> dict[str, Any]:
    """Validate and append identifiers; returns the per-id acceptance report.

    Hallucinated identifiers (unparseable or absent from the universe) are
    rejected entry by entry; valid ones append in order until the cap.
    """
    valid: list[ApiIdentifier] = []
    rejected: list[tuple[str, str]] = []
    for raw in apis:
        try:
            id = ApiIdentifier.from_payload(raw)
        except (ValueError, TypeError, KeyError) as exc:
            rejected.append((str(raw), f"invalid identifier: {exc}"))
            continue
        if universe is not None and not universe.contains(id):
            rejected.append((id.dotted(), "unknown API"))
            continue
        valid.append(id)
    report = pool.add_many(valid)
    report["results"] = [
        (id.dotted(), status) for id, status in report["results"]
    ] + rejected
    return report


def check_if_request_solvable(
    query: str, pool: CandidatePool, policy: SolvabilityPolicy | None
) -> bool:
    """Ask the configured solvability judge; failures degrade to False."""
    if len(pool) == 0:
        log.warning("solvability check on an empty pool; reporting False")
        return False
    if policy is None:
        log.warning("no solvability policy configured; reporting False")
        return False
    try:
        return bool(policy(query, pool.snapshot()))
    except Exception as exc:
        log.warning("solvability judge failed (%s); reporting False", exc)
        return False


def finish_search(agent: AgentRuntime) -> None:
    """Mark the agent finished; absorbing, idempotent, local to the agent."""
    agent.status = FINISHED


def meta_schemas() -> list[FunctionSchema]:
    return [
        FunctionSchema(
            "create_agent_category_level",
            "Create a category agent.",
            (SchemaParam("category", "string", True, "Category name"),),
        ),
        _SCHEMA_TOOLS_IN_CATEGORY,
        _SCHEMA_TOOL_DESCRIPTIONS,
        _SCHEMA_FINISH_SEARCH,
    ]


def category_schemas() -> list[FunctionSchema]:
    return [
        FunctionSchema(
            "create_agent_tool_level",
            "Create a tool agent.",
            (SchemaParam("tools", "array", True, "Tool names to assign"),),
        ),
        _SCHEMA_TOOLS_IN_CATEGORY,
        _SCHEMA_TOOL_DESCRIPTIONS,
        _SCHEMA_FINISH_SEARCH,
    ]


def tool_schemas() -> list[FunctionSchema]:
    return [
        FunctionSchema(
            "add_apis_into_api_pool",
            "Add APIs into candidate pool.",
            (SchemaParam("apis", "array", True, "API identifiers to add"),),
        ),
        FunctionSchema(
            "get_apis_in_tool",
            "Get API names under a tool.",
            (SchemaParam("tool", "string", True, "Tool name"),),
        ),
        FunctionSchema(
            "get_api_details",
            "Get detail of each API.",
            (SchemaParam("apis", "array", True, "API names or identifiers"),),
        ),
        FunctionSchema(
            "check_if_request_solvable",
            "Check whether the query is solvable using the current candidate pool.",
        ),
        _SCHEMA_FINISH_SEARCH,
    ]


_SCHEMA_TOOLS_IN_CATEGORY = FunctionSchema(
    "get_tools_in_category",
    "Get tool names under a category.",
    (SchemaParam("category", "string", True, "Category name"),),
)
_SCHEMA_TOOL_DESCRIPTIONS = FunctionSchema(
    "get_tool_descriptions",
    "Get description of each tool.",
    (SchemaParam("tools", "array", True, "Tool names"),),
)
_SCHEMA_FINISH_SEARCH = FunctionSchema("finish_search", "Send out finish signal.")

_TIER_SCHEMAS = {META: meta_schemas, CATEGORY: category_schemas, TOOL: tool_schemas}


class RetrievalRun:
    """Mutable state of one retrieval pass (also reused by reflection resumes)."""

    def __init__(
        self,
        query: str,
        universe: ApiUniverse,
        backend: Any,
        config: RetrieverConfig,
        *,
        meter: BudgetMeter | None = None,
        trace: Trace | None = None,
        registry: AgentRegistry | None = None,
        pool: CandidatePool | None = None,
        prompts: PromptLibrary | None = None,
    ):
        self.query = query
        self.universe = universe
        self.backend = backend
        self.config = config
        self.meter = meter or BudgetMeter()
        self.trace = trace or Trace()
        self.registry = registry or AgentRegistry()
        self.pool = pool or CandidatePool(cap=config.pool_cap)
        self.prompts = prompts or PromptLibrary()
        self._stop_event = threading.Event()
        self._stop_reason: str | None = None
        self._stop_lock = threading.Lock()
        self._spawned: list[AgentRuntime] = []
        self._spawn_lock = threading.Lock()
        self._executor: ThreadPoolExecutor | None = None
        self._futures: list = []
        self._futures_lock = threading.Lock()

    # -- stop signal ------------------------------------------------------

    def signal_stop(self, reason: str) -> None:
        with self._stop_lock:
            if self._stop_reason is None:
                self._stop_reason = reason
        self._stop_event.set()

    @property
    def stop_reason(self) -> str | None:
        return self._stop_reason

    def _cancelled(self) -> str | None:
        return "stopped" if self._stop_event.is_set() else None

    def reset_stop(self) -> None:
        """Arm a fresh stop signal (used between reflection rounds)."""
        self._stop_event.clear()
        with self._stop_lock:
            self._stop_reason = None

    # -- agent creation ---------------------------------------------------

    def ensure_meta(self) -> AgentRuntime:
        bootstrap = self.prompts.render(
            META_AGENT, {"categories": ", ".join(self.universe.category_names)}
        )
        dialogue = [
            Message(ROLE_SYSTEM, bootstrap),
            Message(ROLE_USER, f"Query: {self.query}"),
        ]
        agent, created = self.registry.register(AgentKind(META), dialogue, None)
        if created:
            self.trace.record(agent.id, META, "created")
        return agent

    def create_agent_category_level(self, parent: AgentRuntime, category: str) -> tuple[AgentRuntime | None, str]:
        """Spawn (or return) the category agent; idempotent per category."""
        try:
            self.universe.tools_of(category)
        except UnknownNameError as exc:
            return None, str(exc)
        kind = AgentKind(CATEGORY, category=category)
        bootstrap = self.prompts.render(CATEGORY_AGENT)
        dialogue = [
            Message(ROLE_SYSTEM, bootstrap),
            Message(ROLE_USER, f"Category: {category}\nQuery: {self.query}"),
        ]
        # registry insert decides who actually created it; a lost race must
        # not schedule the winner's agent a second time
        agent, created = self.registry.register(kind, dialogue, parent_id=parent.id)
        if not created:
            return agent, f"category agent already exists: {agent.id}"
        self.trace.record(agent.id, CATEGORY, "created", category=category)
        self._enqueue(agent)
        return agent, f"created category agent {agent.id}"

    def create_agent_tool_level(self, parent: AgentRuntime, tools: Sequence[str]) -> tuple[AgentRuntime | None, str]:
        """Spawn a tool agent over `tools` within the parent's category.

        Requests beyond K tools are truncated to the first K with a warning;
        duplicate scopes return the existing agent.
        """
        if not tools:
            return None, "error: empty tool list"
        category = parent.kind.category or ""
        known = {t.name for t in self.universe.tools_of(category)}
        for name in tools:
            if name not in known:
                return None, f"tool {name!r} not in category {category!r}"
        warning = ""
        k = self.config.max_tools_per_agent
        if len(tools) > k:
            warning = f" (warning: truncated to the first {k} tools)"
            tools = tools[:k]
        kind = AgentKind(TOOL, category=category, tools=tuple(tools))
        bootstrap = self.prompts.render(
            TOOL_AGENT, {"tools": ", ".join(tools), "category": category}
        )
        dialogue = [
            Message(ROLE_SYSTEM, bootstrap),
            Message(ROLE_USER, f"Tools: {', '.join(tools)}\nQuery: {self.query}"),
        ]
        agent, created = self.registry.register(kind, dialogue, parent_id=parent.id)
        if not created:
            return agent, f"tool agent already exists: {agent.id}"
        self.trace.record(agent.id, TOOL, "created", category=category, tools=list(tools))
        self._enqueue(agent)
        return agent, f"created tool agent {agent.id}{warning}"

    def _enqueue(self, agent: AgentRuntime) -> None:
        with self._spawn_lock:
            self._spawned.append(agent)
        if self._executor is not None:
            with self._futures_lock:
                self._futures.append(self._executor.submit(self._run_agent, agent))

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, agent: AgentRuntime, call: FunctionCallRequest) -> str:
        self.trace.record(
            agent.id, agent.kind.tier, "function_call",
            name=call.name, args=call.arguments,
        )
        try:
            return self._dispatch_inner(agent, call)
        except PoolClosedError as exc:
            return str(exc)

    def _dispatch_inner(self, agent: AgentRuntime, call: FunctionCallRequest) -> str:
        name = call.name
        args = call.arguments
        if name == "finish_search":
            finish_search(agent)
            self.trace.record(agent.id, agent.kind.tier, "finish")
            return "search finished"
        if name == "get_tools_in_category":
            try:
                return json.dumps(
                    get_tools_in_category(self.universe, str(args.get("category", "")))
                )
            except UnknownNameError as exc:
                return str(exc)
        if name == "get_tool_descriptions":
            entries = get_tool_descriptions(self.universe, args.get("tools", []) or [])
            return json.dumps(
                [
                    {"name": n, "description": d}
                    if d is not None
                    else {"name": n, "error": "tool not found"}
                    for n, d in entries
                ]
            )
        if name == "get_apis_in_tool":
            try:
                return json.dumps(
                    get_apis_in_tool(self.universe, str(args.get("tool", "")))
                )
            except UnknownNameError as exc:
                return str(exc)
        if name == "get_api_details":
            ids = self._resolve_api_refs(agent, args.get("apis", []) or [])
            details = []
            for raw, id in ids:
                if id is None:
                    details.append({"api": raw, "error": "API not found"})
                else:
                    spec = get_api_details(self.universe, [id])[0]
                    details.append(
                        spec.to_payload()
                        if spec is not None
                        else {"api": raw, "error": "API not found"}
                    )
            return json.dumps(details)
        if name == "create_agent_category_level":
            _, text = self.create_agent_category_level(
                agent, str(args.get("category", ""))
            )
            return text
        if name == "create_agent_tool_level":
            tools = [str(t) for t in args.get("tools", []) or []]
            _, text = self.create_agent_tool_level(agent, tools)
            return text
        if name == "add_apis_into_api_pool":
            report = add_apis_into_api_pool(
                self.pool, args.get("apis", []) or [], self.universe
            )
            self.trace.record(
                agent.id, agent.kind.tier, "pool_add",
                accepted=report["accepted"], pool_size=report["pool_size"],
                results=report["results"],
            )
            if report["pool_full"]:
                self.signal_stop(STOP_POOL_FULL)
            return json.dumps(
                {
                    "accepted": report["accepted"],
                    "pool_size": report["pool_size"],
                    "results": [
                        {"api": api, "status": status}
                        for api, status in report["results"]
                    ],
                }
            )
        if name == "check_if_request_solvable":
            solvable = check_if_request_solvable(
                self.query, self.pool, self.config.solvability
            )
            if solvable:
                self.signal_stop(STOP_SOLVABLE)
            return "True" if solvable else "False"
        return f"function {name} does not exist"

    def _resolve_api_refs(
        self, agent: AgentRuntime, refs: Iterable[Any]
    ) -> list[tuple[str, ApiIdentifier | None]]:
        """Bare API names resolve within the agent's managed tools, first match."""
        out: list[tuple[str, ApiIdentifier | None]] = []
        for raw in refs:
            if isinstance(raw, str) and "/" not in raw:
                found = None
                for tool_name in agent.kind.tools:
                    candidate = ApiIdentifier(agent.kind.category or "", tool_name, raw)
                    if self.universe.contains(candidate):
                        found = candidate
                        break
                out.append((raw, found))
                continue
            try:
                id = ApiIdentifier.from_payload(raw)
            except (ValueError, TypeError, KeyError):
                out.append((str(raw), None))
                continue
            out.append((id.dotted(), id if self.universe.contains(id) else None))
        return out

    # -- driving ----------------------------------------------------------

    def _make_loop(self, agent: AgentRuntime) -> FunctionLoop:
        def stop(_reply: ModelReply, _dialogue: list[Message]) -> str | None:
            return "finish_search" if agent.status == FINISHED else None

        def observer(reply: ModelReply) -> None:
            self.trace.record(
                agent.id, agent.kind.tier, "model_call",
                reply="call" if reply.call else "text",
                name=reply.call.name if reply.call else None,
            )

        return FunctionLoop(
            self.backend,
            agent.dialogue,
            _TIER_SCHEMAS[agent.kind.tier](),
            dispatcher=lambda call: self.dispatch(agent, call),
            stop=stop,
            meter=self.meter,
            max_iterations=self.config.max_agent_iterations,
            cancel=self._cancelled,
            observer=observer,
        )

    def _run_agent(self, agent: AgentRuntime) -> None:
        loop = self._make_loop(agent)
        while True:
            reason = loop.step()
            if reason is None:
                continue
            if reason == "budget":
                self.signal_stop(STOP_BUDGET)
            if reason not in ("finish_search",):
                self.trace.record(
                    agent.id, agent.kind.tier, "stop", reason=reason
                )
            return

    def drive(self, agents: Sequence[AgentRuntime]) -> None:
        """Run the given agents (plus any they spawn) until quiescence or stop."""
        with self._spawn_lock:
            self._spawned = []
        if self.config.deterministic:
            self._drive_sequential(list(agents))
        else:
            self._drive_concurrent(list(agents))

    def _drive_sequential(self, agents: list[AgentRuntime]) -> None:
        order: list[AgentRuntime] = list(agents)
        loops: dict[str, FunctionLoop] = {}
        exited: set[str] = set()
        while not self._stop_event.is_set():
            runnable = [
                a for a in order if a.id not in exited and a.status == ACTIVE
            ]
            if not runnable:
                break
            for agent in runnable:
                if self._stop_event.is_set():
                    break
                if agent.id in exited or agent.status != ACTIVE:
                    continue
                loop = loops.get(agent.id)
                if loop is None:
                    loop = loops[agent.id] = self._make_loop(agent)
                reason = loop.step()
                with self._spawn_lock:
                    fresh, self._spawned = self._spawned, []
                order.extend(fresh)
                if reason is not None:
                    exited.add(agent.id)
                    if reason == "budget":
                        self.signal_stop(STOP_BUDGET)
                    if reason != "finish_search":
                        self.trace.record(
                            agent.id, agent.kind.tier, "stop", reason=reason
                        )

    def _drive_concurrent(self, agents: list[AgentRuntime]) -> None:
        # New tasks only appear from inside running tasks, so once every
        # tracked future is done and no new one has been appended, the run
        # is quiescent and shutdown cannot race a submit.
        with self._futures_lock:
            self._futures = []
        self._executor = ThreadPoolExecutor(max_workers=self.config.max_workers)
        try:
            for agent in agents:
                with self._futures_lock:
                    self._futures.append(
                        self._executor.submit(self._run_agent, agent)
                    )
            while True:
                with self._futures_lock:
                    snapshot = list(self._futures)
                pending = [f for f in snapshot if not f.done()]
                if pending:
                    pending[0].result()
                    continue
                with self._futures_lock:
                    if len(self._futures) == len(snapshot):
                        break
        finally:
            executor, self._executor = self._executor, None
            executor.shutdown(wait=True)
            with self._futures_lock:
                self._futures = []

    def run_stop_reason(self) -> str:
        if self._stop_reason is not None:
            return self._stop_reason
        if self.registry.all_finished():
            return STOP_ALL_FINISHED
        # Every loop exited on its iteration guard without finishing.
        return STOP_ALL_IDLE


def run_retrieval(
    query: str,
    universe: ApiUniverse,
    backend: Any,
    config: RetrieverConfig | None = None,
    registry: AgentRegistry | None = None,
    *,
    pool: CandidatePool | None = None,
    meter: BudgetMeter | None = None,
    trace: Trace | None = None,
    prompts: PromptLibrary | None = None,
) -> RetrievalResult:
    """Run (or resume) one hierarchical retrieval pass for the query.

    A fresh run bootstraps the meta-agent; with an existing registry, every
    non-finished agent resumes in creation order instead.
    """
    config = config or RetrieverConfig()
    run = RetrievalRun(
        query,
        universe,
        backend,
        config,
        meter=meter,
        trace=trace,
        registry=registry,
        pool=pool,
        prompts=prompts,
    )
    if registry is None or len(registry) == 0:
        starters: list[AgentRuntime] = [run.ensure_meta()]
    else:
        starters = run.registry.agents(status=ACTIVE)
    run.drive(starters)
    reason = run.run_stop_reason()
    run.trace.record("run", "system", "stop", reason=reason)
    return RetrievalResult(run.pool, run.registry, run.trace, reason)
