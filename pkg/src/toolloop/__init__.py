"""Closed-loop tool-use orchestration over a large API catalog.

Cooperating retriever agents narrow a three-tier API catalog into a capped
candidate pool, a CoT/DFSDT solver works the query against it, and a
self-reflection controller feeds failure reasons back until the query is
solved or the budget runs out. Chat backends are pluggable: a live
OpenAI-compatible endpoint or a deterministic scripted one for hermetic runs.
"""

from .catalog import (
    ApiCall,
    ApiExecutor,
    ApiIdentifier,
    ApiResult,
    ApiSpec,
    ApiUniverse,
    RemoteEndpoint,
    ToolSpec,
    execute_api,
    get_api_details,
    get_apis_in_tool,
    get_tool_descriptions,
    get_tools_in_category,
    load_universe,
    load_universe_file,
)
from .evaluation import (
    GroundTruth,
    Judge,
    PassRateReport,
    Query,
    RunStats,
    Solvability,
    Verdict,
    baseline_plain_agent,
    baseline_rag,
    build_report,
    collect_stats,
    judge_solution,
    judge_solvability,
    load_benchmark,
    partition_catalog,
    pass_rate_revised,
    pass_rate_toolllm,
    save_benchmark,
)
from .llm import (
    BudgetExhaustedError,
    BudgetMeter,
    FunctionCallRequest,
    FunctionSchema,
    Message,
    ModelReply,
    RemoteBackend,
    ScriptedBackend,
    TokenUsage,
    chat,
    run_function_loop,
)
from .prompts import PromptLibrary, PromptTemplate, render
from .reflection import (
    FailureReport,
    FinalResult,
    LoopConfig,
    extract_failure,
    reflect_retriever,
    reflect_solver,
    run_closed_loop,
)
from .retriever import (
    AgentKind,
    AgentRegistry,
    AgentRuntime,
    CandidatePool,
    RetrievalResult,
    RetrieverConfig,
    add_apis_into_api_pool,
    check_if_request_solvable,
    finish_search,
    run_retrieval,
)
from .solver import (
    FinishOutcome,
    SolverConfig,
    SolverResult,
    render_pool_schemas,
    solve,
)
from .tracing import Trace, TraceEvent

__version__ = "0.1.0"
