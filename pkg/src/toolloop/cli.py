"""Command-line front end: run one query, run a benchmark, generate one, report.

Exit codes: 0 solved/success, 1 unsolved, 2 usage or configuration error.
All outputs land under --out; scripted runs in deterministic mode produce
byte-identical traces and reports across repeats. Remote credentials come
from the environment (TOOLLOOP_API_KEY or OPENAI_API_KEY), never from flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

from .catalog import ApiIdentifier, ApiUniverse, UniverseFormatError, load_universe_file
from .evaluation import (
    GroundTruth,
    Judge,
    LLM,
    ORACLE,
    Query,
    QueryOutcome,
    RunStats,
    Solvability,
    Verdict,
    build_report,
    collect_stats,
    judge_solution,
    judge_solvability,
    load_benchmark,
    save_benchmark,
)
from .llm import (
    BudgetMeter,
    FunctionSchema,
    Message,
    RemoteBackend,
    ROLE_SYSTEM,
    ROLE_USER,
    SchemaParam,
    ScriptedBackend,
    run_function_loop,
)
from .prompts import BENCHMARK_GEN, PromptLibrary
from .reflection import (
    FinalResult,
    LoopConfig,
    STATUS_SOLVED,
    run_closed_loop,
)
from .retriever import CandidatePool, RetrieverConfig, add_apis_into_api_pool
from .solver import SolverConfig
from .catalog import ApiCall, execute_api

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNSOLVED = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    universe_path: str
    scenario_path: str | None = None
    endpoint: str | None = None
    model: str = "gpt-4"
    judge_policy: str = ORACLE
    judge_model: str | None = None
    ground_truth_path: str | None = None
    prompts_path: str | None = None
    out_dir: str = "out"
    deterministic: bool = False
    seed: int = 0
    workers: int = 4
    loop: LoopConfig = field(default_factory=LoopConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def validate(self) -> None:
        if not os.path.isfile(self.universe_path):
            raise ConfigError(f"universe file not found: {self.universe_path}")
        if (self.scenario_path is None) == (self.endpoint is None):
            raise ConfigError("exactly one of --scenario and --endpoint is required")
        if self.scenario_path is not None and not os.path.isfile(self.scenario_path):
            raise ConfigError(f"scenario file not found: {self.scenario_path}")
        if self.endpoint is not None and self.deterministic:
            raise ConfigError("--deterministic requires a scripted backend")
        if self.judge_policy not in (ORACLE, LLM):
            raise ConfigError(f"unknown judge policy: {self.judge_policy}")

    def build_backend(self) -> Any:
        if self.scenario_path is not None:
            return ScriptedBackend.from_file(self.scenario_path)
        return RemoteBackend(endpoint=self.endpoint or "", model=self.model)

    def build_prompts(self) -> PromptLibrary:
        if self.prompts_path:
            return PromptLibrary.from_file(self.prompts_path)
        return PromptLibrary()

    def build_judge(self, backend: Any, meter: BudgetMeter | None = None) -> Judge:
        judge_backend = None
        if self.judge_policy == LLM:
            judge_backend = backend
            if self.endpoint is not None and self.judge_model:
                # judging may use a roomier model than the agents
                judge_backend = RemoteBackend(
                    endpoint=self.endpoint, model=self.judge_model
                )
        return Judge(
            policy=self.judge_policy,
            backend=judge_backend,
            meter=meter,
            prompts=self.build_prompts(),
        )


def _load_ground_truth(path: str) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        return GroundTruth.from_payload(json.load(fh))


def _write_result(
    out_dir: str,
    result: FinalResult,
    solvability: Solvability | None,
) -> str:
    os.makedirs(out_dir, exist_ok=True)
    safe_id = "".join(c if c.isalnum() or c in "-_" else "_" for c in result.query_id)
    trace_path = os.path.join(out_dir, f"trace-{safe_id}.jsonl")
    result.trace.write_jsonl(trace_path)
    if result.registry is not None:
        result.registry.save(os.path.join(out_dir, f"registry-{safe_id}.json"))
    payload = result.to_payload()
    payload["trace_path"] = os.path.basename(trace_path)
    payload["solvability"] = solvability.label if solvability else None
    result_path = os.path.join(out_dir, f"result-{safe_id}.json")
    with open(result_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return result_path


def _final_solvability(
    query: Query, result: FinalResult, judge: Judge
) -> Solvability | None:
    """Legacy-protocol screening of the final candidate set, when judgeable."""
    try:
        return judge_solvability(query, result.pool.snapshot(), judge)
    except Exception as exc:
        log.warning("solvability screening skipped for %s: %s", query.id, exc)
        return None


def cmd_run(config: RunConfig, query_text: str) -> int:
    config.validate()
    ground_truth = None
    if config.ground_truth_path:
        ground_truth = _load_ground_truth(config.ground_truth_path)
    if config.judge_policy == ORACLE and ground_truth is None:
        raise ConfigError("oracle judge requires --ground-truth")
    query = Query(id="adhoc", text=query_text, ground_truth=ground_truth)

    backend = config.build_backend()
    judge = config.build_judge(backend)
    result = run_closed_loop(
        query,
        load_universe_file(config.universe_path),
        backend,
        judge,
        loop_config=config.loop,
        retriever_config=config.retriever,
        solver_config=config.solver,
        prompts=config.build_prompts(),
    )
    solvability = _final_solvability(query, result, judge)
    path = _write_result(config.out_dir, result, solvability)
    print(f"{result.status} (rounds={result.rounds}) -> {path}")
    return EXIT_OK if result.status == STATUS_SOLVED else EXIT_UNSOLVED


def _bench_one(
    config: RunConfig, universe: ApiUniverse, backend: Any, query: Query
) -> tuple[QueryOutcome, RunStats]:
    judge = config.build_judge(backend)
    try:
        result = run_closed_loop(
            query,
            universe,
            backend,
            judge,
            loop_config=config.loop,
            retriever_config=config.retriever,
            solver_config=config.solver,
            prompts=config.build_prompts(),
        )
    except Exception as exc:
        log.warning("query %s failed: %s", query.id, exc)
        outcome = QueryOutcome(
            query_id=query.id,
            solvability=None,
            verdict=Verdict(False, f"run failed: {exc}"),
            status="error",
        )
        return outcome, RunStats()
    solvability = _final_solvability(query, result, judge)
    _write_result(config.out_dir, result, solvability)
    verdict = Verdict(
        result.status == STATUS_SOLVED,
        result.status if result.status != STATUS_SOLVED else "",
    )
    outcome = QueryOutcome(
        query_id=query.id,
        solvability=solvability,
        verdict=verdict,
        status=result.status,
        rounds=result.rounds,
    )
    return outcome, result.stats


def cmd_bench(config: RunConfig, benchmark_path: str) -> int:
    config.validate()
    queries = load_benchmark(benchmark_path)
    universe = load_universe_file(config.universe_path)
    backend = config.build_backend()

    results: list[tuple[QueryOutcome, RunStats]] = []
    if config.deterministic or config.workers <= 1:
        for query in queries:
            results.append(_bench_one(config, universe, backend, query))
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            futures = [
                executor.submit(_bench_one, config, universe, backend, q)
                for q in queries
            ]
            results = [f.result() for f in futures]

    report = build_report([outcome for outcome, _ in results])
    os.makedirs(config.out_dir, exist_ok=True)
    report.write_json(os.path.join(config.out_dir, "report.json"))
    report.write_csv(os.path.join(config.out_dir, "report.csv"))
    aggregate = collect_stats([stats for _, stats in results])
    with open(
        os.path.join(config.out_dir, "stats.json"), "w", encoding="utf-8"
    ) as fh:
        json.dump(aggregate, fh, indent=1, sort_keys=True)
    print(
        f"queries={len(queries)} rate_toolllm={report.rate_eq1:.4f} "
        f"rate_revised={report.rate_eq2:.4f}"
    )
    return EXIT_OK


class _GeneratorAbort(RuntimeError):
    pass


_EXPLORATION_FUNCTIONS = (
    "get_tools_in_category",
    "get_tool_descriptions",
    "get_apis_in_tool",
    "get_api_details",
)

GENERATOR_META_CALL_CAP = 20


def _generator_schemas() -> list[FunctionSchema]:
    id_params = (
        SchemaParam("category", "string", True),
        SchemaParam("tool", "string", True),
        SchemaParam("api", "string", True),
    )
    return [
        FunctionSchema(
            "get_tools_in_category",
            "Get tool names under a category.",
            (SchemaParam("category", "string", True),),
        ),
        FunctionSchema(
            "get_tool_descriptions",
            "Get description of each tool.",
            (SchemaParam("tools", "array", True),),
        ),
        FunctionSchema(
            "get_apis_in_tool",
            "Get API names under a tool.",
            (SchemaParam("tool", "string", True),),
        ),
        FunctionSchema(
            "get_api_details",
            "Get detail of each API.",
            (SchemaParam("apis", "array", True),),
        ),
        FunctionSchema(
            "add_apis_into_api_pool",
            "Add APIs into the working list.",
            (SchemaParam("apis", "array", True),),
        ),
        FunctionSchema(
            "remove_apis_from_api_pool",
            "Remove APIs from the working list.",
            (SchemaParam("apis", "array", True),),
        ),
        FunctionSchema(
            "execute_api",
            "Test one API with concrete arguments.",
            id_params + (SchemaParam("args", "object", False),),
        ),
        FunctionSchema(
            "finish",
            "Submit the formulated query and its reference answer.",
            (
                SchemaParam("query", "string", True),
                SchemaParam("answer", "string", True),
            ),
        ),
    ]


def _generate_instance(
    index: int, universe: ApiUniverse, backend: Any, prompts: PromptLibrary
) -> Query | None:
    """One generator episode; None when aborted or unverifiable."""
    from .catalog import (
        UnknownNameError,
        get_api_details,
        get_apis_in_tool,
        get_tool_descriptions,
        get_tools_in_category,
    )

    pool = CandidatePool(cap=64)
    calls: list[ApiCall] = []
    finished: dict[str, str] = {}
    exploration_calls = 0

    def dispatcher(call):
        nonlocal exploration_calls
        name = call.name
        args = call.arguments
        if name in _EXPLORATION_FUNCTIONS:
            exploration_calls += 1
            if exploration_calls > GENERATOR_META_CALL_CAP:
                raise _GeneratorAbort(
                    f"exploration call cap ({GENERATOR_META_CALL_CAP}) exceeded"
                )
        try:
            if name == "get_tools_in_category":
                return json.dumps(
                    get_tools_in_category(universe, str(args.get("category", "")))
                )
            if name == "get_tool_descriptions":
                return json.dumps(
                    [
                        {"name": n, "description": d or "tool not found"}
                        for n, d in get_tool_descriptions(
                            universe, args.get("tools", []) or []
                        )
                    ]
                )
            if name == "get_apis_in_tool":
                return json.dumps(
                    get_apis_in_tool(universe, str(args.get("tool", "")))
                )
            if name == "get_api_details":
                ids = [
                    ApiIdentifier.from_payload(x)
                    for x in args.get("apis", []) or []
                ]
                return json.dumps(
                    [
                        spec.to_payload() if spec else {"error": "API not found"}
                        for spec in get_api_details(universe, ids)
                    ]
                )
            if name == "add_apis_into_api_pool":
                report = add_apis_into_api_pool(
                    pool, args.get("apis", []) or [], universe
                )
                return json.dumps(
                    {"accepted": report["accepted"], "pool_size": report["pool_size"]}
                )
            if name == "remove_apis_from_api_pool":
                removed = 0
                for raw in args.get("apis", []) or []:
                    try:
                        if pool.remove(ApiIdentifier.from_payload(raw)):
                            removed += 1
                    except (ValueError, TypeError, KeyError):
                        continue
                return json.dumps({"removed": removed, "pool_size": len(pool)})
            if name == "execute_api":
                id = ApiIdentifier(
                    str(args.get("category", "")),
                    str(args.get("tool", "")),
                    str(args.get("api", "")),
                )
                result = execute_api(universe, id, dict(args.get("args", {}) or {}))
                calls.append(ApiCall(id, dict(args.get("args", {}) or {}),
                                     result.text, result.error))
                return result.text
            if name == "finish":
                finished["query"] = str(args.get("query", ""))
                finished["answer"] = str(args.get("answer", ""))
                return "submission received"
        except UnknownNameError as exc:
            return str(exc)
        except (ValueError, TypeError, KeyError) as exc:
            return f"bad arguments: {exc}"
        return f"function {name} does not exist"

    seed = [
        Message(
            ROLE_SYSTEM,
            prompts.render(
                BENCHMARK_GEN,
                {"categories": ", ".join(universe.category_names)},
            ),
        ),
        Message(ROLE_USER, f"Construct benchmark instance {index}."),
    ]
    try:
        run_function_loop(
            backend,
            seed,
            _generator_schemas(),
            dispatcher,
            stop=lambda _r, _d: "finish" if "query" in finished else None,
            max_iterations=60,
        )
    except _GeneratorAbort as exc:
        log.warning("instance %d aborted: %s", index, exc)
        return None
    if "query" not in finished or not finished["query"]:
        log.warning("instance %d produced no query", index)
        return None
    if len(pool) == 0:
        log.warning("instance %d has an empty working set", index)
        return None

    query = Query(
        id=f"gen-{index}",
        text=finished["query"],
        ground_truth=GroundTruth(
            required_apis=tuple(pool.snapshot()),
            answer_fragments=(finished["answer"],),
        ),
    )
    verdict = judge_solution(query, finished["answer"], calls, Judge(policy=ORACLE))
    if not verdict.solved:
        log.warning(
            "instance %d failed verification (%s); discarded", index, verdict.rationale
        )
        return None
    return query


def cmd_generate_bench(config: RunConfig, count: int, retry_cap: int = 3) -> int:
    config.validate()
    if count < 1:
        raise ConfigError("--count must be >= 1")
    universe = load_universe_file(config.universe_path)
    backend = config.build_backend()
    prompts = config.build_prompts()

    queries: list[Query] = []
    index = 0
    for _ in range(count):
        produced = None
        for _attempt in range(retry_cap):
            index += 1
            produced = _generate_instance(index, universe, backend, prompts)
            if produced is not None:
                break
        if produced is None:
            log.warning("retry cap hit; emitting partial benchmark")
            break
        queries.append(produced)

    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "benchmark.json")
    if not queries:
        raise ConfigError("generator produced no verifiable instances")
    save_benchmark(path, queries)
    print(f"generated {len(queries)}/{count} -> {path}")
    return EXIT_OK


def cmd_report(result_dir: str) -> int:
    if not os.path.isdir(result_dir):
        raise ConfigError(f"not a directory: {result_dir}")
    rows: list[QueryOutcome] = []
    stats_rows: list[dict[str, Any]] = []
    skipped = 0
    for name in sorted(os.listdir(result_dir)):
        if not (name.startswith("result-") and name.endswith(".json")):
            continue
        path = os.path.join(result_dir, name)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
            status = payload["status"]
            solvability = payload.get("solvability")
            rows.append(
                QueryOutcome(
                    query_id=payload["query_id"],
                    solvability=(
                        Solvability(solvability == "solvable")
                        if solvability
                        else None
                    ),
                    verdict=Verdict(status == STATUS_SOLVED, status),
                    status=status,
                    rounds=int(payload.get("rounds", 0)),
                )
            )
            stats_rows.append(payload["stats"])
        except (KeyError, ValueError, OSError) as exc:
            skipped += 1
            log.warning("skipping corrupt result file %s: %s", name, exc)
    if not rows:
        raise ConfigError(f"no result files in {result_dir}")

    report = build_report(rows)
    aggregate = collect_stats(stats_rows)
    means = aggregate["means"]
    print(f"queries: {aggregate['queries']}  (skipped files: {skipped})")
    print(f"average token consumption:   {means['tokens']:.1f}")
    print(f"average model call number:   {means['model_calls']:.1f}")
    print(
        "average self-reflections:    "
        f"tool={means['reflections_tool']:.1f} "
        f"category={means['reflections_category']:.1f} "
        f"meta={means['reflections_meta']:.1f} "
        f"solver={means['reflections_solver']:.1f}"
    )
    print(f"average candidate number:    {means['candidate_count']:.1f}")
    print(
        "average agent quantity:      "
        f"category={means['agents_category']:.1f} tool={means['agents_tool']:.1f}"
    )
    print(f"pass rate (legacy protocol):  {report.rate_eq1:.4f}")
    print(f"pass rate (revised protocol): {report.rate_eq2:.4f}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolloop",
        description="Closed-loop hierarchical API retrieval and solving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--universe", required=True, help="universe JSON file")
        p.add_argument("--scenario", help="scripted scenario JSON file")
        p.add_argument("--endpoint", help="OpenAI-compatible endpoint URL")
        p.add_argument("--model", default="gpt-4", help="remote model name")
        p.add_argument("--judge", default=ORACLE, choices=(ORACLE, LLM))
        p.add_argument("--judge-model", help="distinct remote model for judging")
        p.add_argument("--prompts", help="prompt overrides JSON file")
        p.add_argument("--max-rounds", type=int, default=8)
        p.add_argument("--pool-cap", type=int, default=64)
        p.add_argument("--max-tools", type=int, default=5)
        p.add_argument("--max-calls", type=int, default=10)
        p.add_argument("--budget", type=int, default=200_000)
        p.add_argument("--strategy", default="dfsdt", choices=("dfsdt", "cot"))
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=4)
        p.add_argument("--out", default="out", help="output directory")

    run_p = sub.add_parser("run", help="resolve one query")
    add_common(run_p)
    run_p.add_argument("--ground-truth", help="ground-truth JSON for the oracle judge")
    run_p.add_argument("query", help="query text")

    bench_p = sub.add_parser("bench", help="run a benchmark suite")
    add_common(bench_p)
    bench_p.add_argument("--benchmark", required=True, help="benchmark JSON file")

    gen_p = sub.add_parser("generate", help="generate a benchmark")
    add_common(gen_p)
    gen_p.add_argument("--count", type=int, required=True)
    gen_p.add_argument("--retry-cap", type=int, default=3)

    report_p = sub.add_parser("report", help="summarize a result directory")
    report_p.add_argument("directory")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        universe_path=args.universe,
        scenario_path=args.scenario,
        endpoint=args.endpoint,
        model=args.model,
        judge_policy=args.judge,
        judge_model=args.judge_model,
        ground_truth_path=getattr(args, "ground_truth", None),
        prompts_path=args.prompts,
        out_dir=args.out,
        deterministic=args.deterministic,
        seed=args.seed,
        workers=args.workers,
        loop=LoopConfig(max_rounds=args.max_rounds, token_budget=args.budget),
        retriever=RetrieverConfig(
            max_tools_per_agent=args.max_tools,
            pool_cap=args.pool_cap,
            deterministic=args.deterministic,
        ),
        solver=SolverConfig(max_api_calls=args.max_calls, strategy=args.strategy),
    )


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("TOOLLOOP_LOG", "WARNING"))
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.directory)
        config = _config_from_args(args)
        if args.command == "run":
            return cmd_run(config, args.query)
        if args.command == "bench":
            return cmd_bench(config, args.benchmark)
        if args.command == "generate":
            return cmd_generate_bench(config, args.count, args.retry_cap)
    except (ConfigError, UniverseFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
