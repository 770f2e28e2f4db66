"""Three-tier API catalog: categories hold tools, tools hold APIs.

The universe is loaded once from a JSON document and is immutable afterwards,
so concurrent agents may read it without synchronization. Lookups return
plain data that serializes cleanly into agent dialogues; unknown names raise
``UnknownNameError`` (callers that feed agents turn it into a function-result
string, never a crash). Execution runs against either a scripted response
table (hermetic, deterministic) or a remote HTTP endpoint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, BinaryIO, Iterable

log = logging.getLogger(__name__)

SCRIPTED = "scripted"
REMOTE = "remote"
WILDCARD_ARGS = "*"


class UniverseFormatError(ValueError):
    """Universe document is malformed or violates a structural invariant."""


class DuplicateNameError(UniverseFormatError):
    """A category, tool, or API name collides within its scope."""


class UnknownNameError(LookupError):
    """A category/tool/API name does not resolve in the universe."""


@dataclass(frozen=True)
class ApiIdentifier:
    """Fully qualified API address: category / tool / api."""

    category: str
    tool: str
    api: str

    def __post_init__(self) -> None:
        if not (self.category and self.tool and self.api):
            raise ValueError("identifier segments must be nonempty")

    def dotted(self) -> str:
        return f"{self.category}.{self.tool}.{self.api}"

    def to_payload(self) -> dict[str, str]:
        return {"category": self.category, "tool": self.tool, "api": self.api}

    @classmethod
    def from_payload(cls, obj: Any) -> "ApiIdentifier":
        """Accept {category, tool, api} mappings or 'category/tool/api' strings."""
        if isinstance(obj, ApiIdentifier):
            return obj
        if isinstance(obj, dict):
            return cls(str(obj["category"]), str(obj["tool"]), str(obj["api"]))
        if isinstance(obj, str):
            parts = obj.split("/")
            if len(parts) != 3:
                raise ValueError(f"expected category/tool/api, got {obj!r}")
            return cls(*parts)
        raise TypeError(f"cannot build identifier from {type(obj).__name__}")


@dataclass(frozen=True)
class ApiParam:
    name: str
    type: str = "string"
    description: str = ""

    def to_payload(self) -> dict[str, str]:
        return {"name": self.name, "type": self.type, "description": self.description}


@dataclass(frozen=True)
class ApiSpec:
    id: ApiIdentifier
    description: str = ""
    required_params: tuple[ApiParam, ...] = ()
    optional_params: tuple[ApiParam, ...] = ()
    response_description: str = ""

    def __post_init__(self) -> None:
        names = [p.name for p in self.required_params + self.optional_params]
        if len(names) != len(set(names)):
            raise UniverseFormatError(
                f"duplicate parameter name in API {self.id.dotted()!r}"
            )

    def to_payload(self) -> dict[str, Any]:
        return {
            "category": self.id.category,
            "tool": self.id.tool,
            "api": self.id.api,
            "description": self.description,
            "required_params": [p.to_payload() for p in self.required_params],
            "optional_params": [p.to_payload() for p in self.optional_params],
            "response_description": self.response_description,
        }


@dataclass(frozen=True)
class ToolSpec:
    name: str
    category: str
    description: str = ""
    apis: tuple[ApiSpec, ...] = ()


@dataclass(frozen=True)
class ApiResult:
    """Outcome of one API execution, as text handed back to the agent."""

    text: str
    error: bool = False


@dataclass(frozen=True)
class ApiCall:
    """One executed call, kept for traces and solution judging."""

    id: ApiIdentifier
    args: dict[str, Any]
    result: str
    error: bool = False

    def to_payload(self) -> dict[str, Any]:
        return {
            "api": self.id.to_payload(),
            "args": dict(self.args),
            "result": self.result,
            "error": self.error,
        }


def canonicalize_args(args: dict[str, Any]) -> str:
    """Deterministic lookup key: keys sorted lexicographically, values stringified."""
    return json.dumps({str(k): str(v) for k, v in args.items()}, sort_keys=True)


@dataclass
class RemoteEndpoint:
    url: str
    timeout: float = 30.0
    max_retries: int = 3
    transport: Any = None  # injection point for hermetic tests


class ApiExecutor:
    """Executes APIs either from a scripted response table or a remote endpoint.

    Scripted mode is pure: equal identifier + equal canonicalized args always
    yield equal results. Remote mode forwards the call and returns the body
    verbatim; transport failures are retried a bounded number of times and
    then surfaced as error results so the calling loop keeps going.
    """

    def __init__(
        self,
        mode: str = SCRIPTED,
        scripted: dict[tuple[ApiIdentifier, str], ApiResult] | None = None,
        remote: RemoteEndpoint | None = None,
    ) -> None:
        if mode not in (SCRIPTED, REMOTE):
            raise ValueError(f"unknown executor mode {mode!r}")
        if mode == REMOTE and remote is None:
            raise ValueError("remote mode requires an endpoint")
        self.mode = mode
        self.scripted = dict(scripted or {})
        self.remote = remote
        self._client = None
        if self.mode == REMOTE:
            import httpx

            # one shared client; httpx clients are safe for concurrent calls
            self._client = httpx.Client(
                timeout=remote.timeout, transport=remote.transport
            )

    def execute(self, spec: ApiSpec, args: dict[str, Any]) -> ApiResult:
        for param in spec.required_params:
            if param.name not in args:
                return ApiResult(f"missing parameter {param.name!r}", error=True)
        if self.mode == SCRIPTED:
            return self._execute_scripted(spec.id, args)
        return self._execute_remote(spec.id, args)

    def _execute_scripted(self, id: ApiIdentifier, args: dict[str, Any]) -> ApiResult:
        hit = self.scripted.get((id, canonicalize_args(args)))
        if hit is None:
            hit = self.scripted.get((id, WILDCARD_ARGS))
        if hit is None:
            return ApiResult(f"no scripted response for {id.dotted()}", error=True)
        return hit

    def _execute_remote(self, id: ApiIdentifier, args: dict[str, Any]) -> ApiResult:
        import httpx

        assert self.remote is not None and self._client is not None
        payload = {**id.to_payload(), "args": args}
        last_error: Exception | None = None
        for attempt in range(1, self.remote.max_retries + 1):
            try:
                response = self._client.post(self.remote.url, json=payload)
                return ApiResult(response.text, error=response.status_code >= 400)
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("API transport failure (attempt %d): %s", attempt, exc)
        return ApiResult(
            f"transport error after {self.remote.max_retries} attempts: {last_error}",
            error=True,
        )


class ApiUniverse:
    """Immutable, ordered category -> tool -> API registry with an executor."""

    def __init__(
        self,
        categories: Iterable[tuple[str, Iterable[ToolSpec]]],
        executor: ApiExecutor | None = None,
    ) -> None:
        self._categories: list[tuple[str, tuple[ToolSpec, ...]]] = []
        self._by_category: dict[str, tuple[ToolSpec, ...]] = {}
        self._api_index: dict[ApiIdentifier, ApiSpec] = {}
        for name, tools in categories:
            tools = tuple(tools)
            if name in self._by_category:
                raise DuplicateNameError(f"duplicate category {name!r}")
            seen_tools: set[str] = set()
            for tool in tools:
                if tool.name in seen_tools:
                    raise DuplicateNameError(
                        f"duplicate tool {tool.name!r} in category {name!r}"
                    )
                seen_tools.add(tool.name)
                seen_apis: set[str] = set()
                for spec in tool.apis:
                    if spec.id.api in seen_apis:
                        raise DuplicateNameError(
                            f"duplicate API {spec.id.api!r} in tool {tool.name!r}"
                        )
                    seen_apis.add(spec.id.api)
                    if spec.id.category != name or spec.id.tool != tool.name:
                        raise UniverseFormatError(
                            f"API {spec.id.dotted()!r} placed under "
                            f"{name!r}/{tool.name!r}"
                        )
                    self._api_index[spec.id] = spec
            self._categories.append((name, tools))
            self._by_category[name] = tools
        if not self._categories:
            raise UniverseFormatError("universe must contain >=1 category")
        if not self._api_index:
            raise UniverseFormatError("universe must contain >=1 API")
        self.executor = executor or ApiExecutor()

    @property
    def category_names(self) -> list[str]:
        return [name for name, _ in self._categories]

    @property
    def api_count(self) -> int:
        return len(self._api_index)

    def iter_tools(self) -> Iterable[ToolSpec]:
        for _, tools in self._categories:
            yield from tools

    def iter_api_ids(self) -> Iterable[ApiIdentifier]:
        """All API identifiers in catalog (document) order."""
        for tool in self.iter_tools():
            for spec in tool.apis:
                yield spec.id

    def tools_of(self, category: str) -> tuple[ToolSpec, ...]:
        try:
            return self._by_category[category]
        except KeyError:
            raise UnknownNameError(f"category not found: {category}") from None

    def find_tool(self, name: str) -> ToolSpec:
        """First tool with this name, scanning categories in order."""
        for tool in self.iter_tools():
            if tool.name == name:
                return tool
        raise UnknownNameError(f"tool not found: {name}")

    def resolve(self, id: ApiIdentifier) -> ApiSpec:
        try:
            return self._api_index[id]
        except KeyError:
            raise UnknownNameError(f"API not found: {id.dotted()}") from None

    def contains(self, id: ApiIdentifier) -> bool:
        return id in self._api_index


def get_tools_in_category(universe: ApiUniverse, category: str) -> list[str]:
    """Tool names under a category, in document order."""
    return [tool.name for tool in universe.tools_of(category)]


def get_tool_descriptions(
    universe: ApiUniverse, tools: Iterable[str]
) -> list[tuple[str, str | None]]:
    """(name, description) per requested tool; None marks an unknown name."""
    out: list[tuple[str, str | None]] = []
    for name in tools:
        try:
            out.append((name, universe.find_tool(name).description))
        except UnknownNameError:
            out.append((name, None))
    return out


def get_apis_in_tool(universe: ApiUniverse, tool: str) -> list[str]:
    """API names under a tool, in document order."""
    return [spec.id.api for spec in universe.find_tool(tool).apis]


def get_api_details(
    universe: ApiUniverse, apis: Iterable[ApiIdentifier]
) -> list[ApiSpec | None]:
    """ApiSpec per requested identifier; None marks an unknown identifier."""
    out: list[ApiSpec | None] = []
    for id in apis:
        try:
            out.append(universe.resolve(id))
        except UnknownNameError:
            out.append(None)
    return out


def execute_api(
    universe: ApiUniverse, id: ApiIdentifier, args: dict[str, Any]
) -> ApiResult:
    """Run one API through the universe's executor."""
    spec = universe.resolve(id)
    return universe.executor.execute(spec, args)


def _parse_params(raw: Any, where: str) -> tuple[ApiParam, ...]:
    params = []
    for entry in raw or []:
        if not isinstance(entry, dict) or "name" not in entry:
            raise UniverseFormatError(f"bad parameter entry in {where}")
        params.append(
            ApiParam(
                name=str(entry["name"]),
                type=str(entry.get("type", "string")),
                description=str(entry.get("description", "")),
            )
        )
    return tuple(params)


def _parse_scripted(
    raw: Any, index: dict[ApiIdentifier, ApiSpec]
) -> dict[tuple[ApiIdentifier, str], ApiResult]:
    table: dict[tuple[ApiIdentifier, str], ApiResult] = {}
    for entry in raw or []:
        id = ApiIdentifier(
            str(entry["category"]), str(entry["tool"]), str(entry["api"])
        )
        if id not in index:
            raise UniverseFormatError(
                f"scripted response for unknown API {id.dotted()!r}"
            )
        args = entry.get("args", WILDCARD_ARGS)
        key = WILDCARD_ARGS if args == WILDCARD_ARGS else canonicalize_args(args)
        if "error" in entry:
            table[(id, key)] = ApiResult(str(entry["error"]), error=True)
        else:
            table[(id, key)] = ApiResult(str(entry.get("response", "")))
    return table


def load_universe(source: bytes | str | BinaryIO) -> ApiUniverse:
    """Parse a universe JSON document; order-preserving.

    Raises UniverseFormatError with line/column on parse failures and
    DuplicateNameError naming the offending duplicate.
    """
    if hasattr(source, "read"):
        data = source.read()  # type: ignore[union-attr]
    else:
        data = source
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise UniverseFormatError(
            f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or "categories" not in doc:
        raise UniverseFormatError("universe document must have a 'categories' list")

    categories: list[tuple[str, list[ToolSpec]]] = []
    for cat in doc["categories"]:
        cat_name = str(cat["name"])
        tools: list[ToolSpec] = []
        for tool in cat.get("tools", []):
            tool_name = str(tool["name"])
            apis = []
            for api in tool.get("apis", []):
                api_name = str(api["name"])
                where = f"{cat_name}/{tool_name}/{api_name}"
                apis.append(
                    ApiSpec(
                        id=ApiIdentifier(cat_name, tool_name, api_name),
                        description=str(api.get("description", "")),
                        required_params=_parse_params(
                            api.get("required_params"), where
                        ),
                        optional_params=_parse_params(
                            api.get("optional_params"), where
                        ),
                        response_description=str(api.get("response_description", "")),
                    )
                )
            tools.append(
                ToolSpec(
                    name=tool_name,
                    category=cat_name,
                    description=str(tool.get("description", "")),
                    apis=tuple(apis),
                )
            )
        categories.append((cat_name, tools))

    universe = ApiUniverse(categories)
    universe.executor.scripted = _parse_scripted(
        doc.get("scripted_responses"), universe._api_index
    )
    return universe


def load_universe_file(path: str) -> ApiUniverse:
    with open(path, "rb") as fh:
        return load_universe(fh)
