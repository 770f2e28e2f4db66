"""Function-calling chat abstraction with two backends.

``ScriptedBackend`` replays an ordered rule table (first match wins) and is
fully deterministic; ``RemoteBackend`` speaks the OpenAI-compatible
chat-completions protocol with tool calls. Both are driven through ``chat``,
which enforces a shared token budget, and ``run_function_loop``, which
repeats the call/execute/observe cycle until a stop condition fires.

Scripted token accounting uses a proxy (ceil of character count / 4): budgets
here are control flow, not billing. Remote usage comes from the provider.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

log = logging.getLogger(__name__)

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
ROLE_FUNCTION_RESULT = "function_result"
_ROLES = (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT, ROLE_FUNCTION_RESULT)

DEFAULT_TOKEN_BUDGET = 200_000
DEFAULT_MAX_ITERATIONS = 30


class BudgetExhaustedError(RuntimeError):
    """Token budget spent; terminal for the run."""

    def __init__(self, used: int, limit: int):
        self.used = used
        self.limit = limit
        super().__init__(f"token budget exhausted: {used}/{limit}")


class TransportError(RuntimeError):
    """Remote backend unreachable after bounded retries."""


class ProtocolError(RuntimeError):
    """Remote backend replied with something that is not a chat completion."""


@dataclass
class FunctionCallRequest:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    # Arguments the model emitted but that did not parse as a JSON object.
    malformed: bool = False
    raw_arguments: str = ""

    def to_payload(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": dict(self.arguments)}


@dataclass
class Message:
    role: str
    content: str = ""
    call: FunctionCallRequest | None = None
    call_result_for: str | None = None

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.call is not None and self.role != ROLE_ASSISTANT:
            raise ValueError("only assistant messages may carry a call")
        if self.call_result_for is not None and self.role != ROLE_FUNCTION_RESULT:
            raise ValueError("only function results may name a called function")

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.call is not None:
            payload["call"] = self.call.to_payload()
        if self.call_result_for is not None:
            payload["call_result_for"] = self.call_result_for
        return payload

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "Message":
        call = None
        if obj.get("call"):
            call = FunctionCallRequest(
                name=obj["call"]["name"], arguments=dict(obj["call"]["arguments"])
            )
        return cls(
            role=obj["role"],
            content=obj.get("content", ""),
            call=call,
            call_result_for=obj.get("call_result_for"),
        )


@dataclass(frozen=True)
class SchemaParam:
    name: str
    type: str = "string"
    required: bool = True
    description: str = ""


@dataclass
class FunctionSchema:
    name: str
    description: str = ""
    parameters: tuple[SchemaParam, ...] = ()

    def to_openai(self) -> dict[str, Any]:
        properties = {
            p.name: {"type": p.type, "description": p.description}
            for p in self.parameters
        }
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": [p.name for p in self.parameters if p.required],
                },
            },
        }


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    completion: int = 0

    @property
    def total(self) -> int:
        return self.prompt + self.completion


@dataclass
class ModelReply:
    call: FunctionCallRequest | None = None
    text: str | None = None
    usage: TokenUsage = field(default_factory=TokenUsage)

    def __post_init__(self) -> None:
        if (self.call is None) == (self.text is None):
            raise ValueError("reply must carry exactly one of call/text")


class BudgetMeter:
    """Shared, thread-safe token account. The total only grows.

    A call is admitted while the running total is below the limit, so the
    final total can overshoot by at most one reply's usage.
    """

    def __init__(self, limit: int = DEFAULT_TOKEN_BUDGET):
        if limit < 1:
            raise ValueError("budget limit must be positive")
        self.limit = limit
        self._used = 0
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def calls(self) -> int:
        return self._calls

    @property
    def remaining(self) -> int:
        return max(0, self.limit - self._used)

    def exhausted(self) -> bool:
        return self._used >= self.limit

    def check(self) -> None:
        if self.exhausted():
            raise BudgetExhaustedError(self._used, self.limit)

    def add(self, usage: TokenUsage) -> None:
        with self._lock:
            self._used += usage.total
            self._calls += 1


def proxy_token_count(text: str) -> int:
    """Tokenizer-free estimate: ceil(len / 4)."""
    return _proxy_from_chars(len(text))


def _proxy_from_chars(chars: int) -> int:
    return -(-chars // 4)


def _dialogue_chars(dialogue: Iterable[Message]) -> int:
    total = 0
    for m in dialogue:
        total += len(m.content)
        if m.call is not None:
            total += len(m.call.name) + len(json.dumps(m.call.arguments))
    return total


@dataclass
class ScriptRule:
    """One scripted-reply rule; all present `when` conditions must hold."""

    last_message_contains: str | None = None
    schemas_include: tuple[str, ...] = ()
    always: bool = False
    reply_call: FunctionCallRequest | None = None
    reply_text: str | None = None
    usage: TokenUsage | None = None

    def __post_init__(self) -> None:
        if (self.reply_call is None) == (self.reply_text is None):
            raise ValueError("rule must reply with exactly one of call/text")
        if not self.always and self.last_message_contains is None and not self.schemas_include:
            raise ValueError("rule needs a condition or always: true")

    def matches(self, dialogue: Sequence[Message], schema_names: set[str]) -> bool:
        if self.always:
            return True
        if self.last_message_contains is not None:
            if not dialogue or self.last_message_contains not in dialogue[-1].content:
                return False
        if self.schemas_include and not set(self.schemas_include) <= schema_names:
            return False
        return True


class ScriptedBackend:
    """Deterministic chat backend: ordered first-match rules over the dialogue tail.

    A catch-all (``always``) rule is mandatory so every input resolves to
    exactly one reply.
    """

    def __init__(self, rules: Sequence[ScriptRule]):
        if not any(rule.always for rule in rules):
            raise ValueError("scripted backend requires a catch-all rule")
        self.rules = list(rules)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScriptedBackend":
        rules = []
        for raw in doc.get("rules", []):
            when = raw.get("when", {})
            reply = raw.get("reply", {})
            call = None
            if "call" in reply:
                call = FunctionCallRequest(
                    name=reply["call"]["name"],
                    arguments=dict(reply["call"].get("args", {})),
                )
            usage = None
            if "usage" in raw:
                usage = TokenUsage(
                    prompt=int(raw["usage"].get("prompt", 0)),
                    completion=int(raw["usage"].get("completion", 0)),
                )
            schemas = when.get("schemas_include", ())
            if isinstance(schemas, str):
                schemas = (schemas,)
            rules.append(
                ScriptRule(
                    last_message_contains=when.get("last_message_contains"),
                    schemas_include=tuple(schemas),
                    always=bool(when.get("always", False)),
                    reply_call=call,
                    reply_text=reply.get("text"),
                    usage=usage,
                )
            )
        return cls(rules)

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def complete(
        self, dialogue: Sequence[Message], schemas: Sequence[FunctionSchema]
    ) -> ModelReply:
        schema_names = {s.name for s in schemas}
        for rule in self.rules:
            if not rule.matches(dialogue, schema_names):
                continue
            usage = rule.usage
            if usage is None:
                reply_chars = (
                    len(rule.reply_text)
                    if rule.reply_text is not None
                    else len(rule.reply_call.name)  # type: ignore[union-attr]
                    + len(json.dumps(rule.reply_call.arguments))  # type: ignore[union-attr]
                )
                usage = TokenUsage(
                    prompt=_proxy_from_chars(_dialogue_chars(dialogue)),
                    completion=_proxy_from_chars(reply_chars),
                )
            if rule.reply_call is not None:
                # Fresh copy: callers may mutate arguments downstream.
                call = FunctionCallRequest(
                    name=rule.reply_call.name,
                    arguments=dict(rule.reply_call.arguments),
                )
                return ModelReply(call=call, usage=usage)
            return ModelReply(text=rule.reply_text, usage=usage)
        raise AssertionError("unreachable: catch-all rule is mandatory")


class RemoteBackend:
    """OpenAI-compatible chat completions with tool calls over HTTP.

    Endpoint, model, and key come from configuration/environment; transport
    failures are retried with exponential backoff, then raised as
    TransportError. Replies that are not valid completions raise
    ProtocolError. Safe for concurrent use (one httpx client, stateless).
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        max_retries: int = 3,
        timeout: float = 120.0,
        backoff_base: float = 0.5,
        transport: Any = None,
    ):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key or os.environ.get("TOOLLOOP_API_KEY") or os.environ.get(
            "OPENAI_API_KEY"
        )
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(
        self, dialogue: Sequence[Message], schemas: Sequence[FunctionSchema]
    ) -> ModelReply:
        import httpx

        body = {
            "model": self.model,
            "messages": dialogue_to_wire(dialogue),
            "tools": [s.to_openai() for s in schemas],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                response = self._client.post(
                    f"{self.endpoint}/chat/completions", json=body, headers=headers
                )
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("chat transport failure (attempt %d): %s", attempt, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff_base * 2 ** (attempt - 1))
                continue
            if response.status_code >= 500:
                last_error = ProtocolError(f"server error {response.status_code}")
                if attempt < self.max_retries:
                    time.sleep(self.backoff_base * 2 ** (attempt - 1))
                continue
            if response.status_code != 200:
                raise ProtocolError(
                    f"chat endpoint returned {response.status_code}: {response.text[:200]}"
                )
            return self._parse(response.json(), dialogue)
        raise TransportError(
            f"chat endpoint unreachable after {self.max_retries} attempts: {last_error}"
        )

    def _parse(self, doc: Any, dialogue: Sequence[Message]) -> ModelReply:
        try:
            message = doc["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion: {exc}") from exc
        usage_doc = doc.get("usage") or {}
        usage = TokenUsage(
            prompt=int(
                usage_doc.get("prompt_tokens")
                or _proxy_from_chars(_dialogue_chars(dialogue))
            ),
            completion=int(usage_doc.get("completion_tokens") or 1),
        )
        tool_calls = message.get("tool_calls") or []
        if tool_calls:
            fn = tool_calls[0].get("function", {})
            name = fn.get("name")
            if not name:
                raise ProtocolError("tool call without a function name")
            raw = fn.get("arguments", "{}")
            try:
                arguments = json.loads(raw) if raw else {}
                if not isinstance(arguments, dict):
                    raise ValueError("arguments not an object")
                call = FunctionCallRequest(name=name, arguments=arguments)
            except (json.JSONDecodeError, ValueError):
                # Echoed back to the model as an error result; never repaired.
                call = FunctionCallRequest(
                    name=name, malformed=True, raw_arguments=str(raw)
                )
            return ModelReply(call=call, usage=usage)
        content = message.get("content")
        if content is None:
            raise ProtocolError("completion carries neither text nor tool calls")
        return ModelReply(text=str(content), usage=usage)


def dialogue_to_wire(dialogue: Sequence[Message]) -> list[dict[str, Any]]:
    """Map internal messages onto the OpenAI chat wire format.

    Call/result pairing is positional: each assistant call gets a synthetic
    id and the following function result references it.
    """
    wire: list[dict[str, Any]] = []
    pending_call_id: str | None = None
    counter = 0
    for m in dialogue:
        if m.role in (ROLE_SYSTEM, ROLE_USER):
            wire.append({"role": m.role, "content": m.content})
        elif m.role == ROLE_ASSISTANT:
            if m.call is not None:
                counter += 1
                pending_call_id = f"call_{counter}"
                wire.append(
                    {
                        "role": "assistant",
                        "content": m.content or None,
                        "tool_calls": [
                            {
                                "id": pending_call_id,
                                "type": "function",
                                "function": {
                                    "name": m.call.name,
                                    "arguments": json.dumps(m.call.arguments),
                                },
                            }
                        ],
                    }
                )
            else:
                wire.append({"role": "assistant", "content": m.content})
        else:
            wire.append(
                {
                    "role": "tool",
                    "tool_call_id": pending_call_id or "call_0",
                    "content": m.content,
                }
            )
    return wire


def chat(
    backend: Any,
    dialogue: Sequence[Message],
    schemas: Sequence[FunctionSchema],
    meter: BudgetMeter,
) -> ModelReply:
    """One budget-metered model exchange."""
    meter.check()
    reply = backend.complete(dialogue, schemas)
    meter.add(reply.usage)
    return reply


Dispatcher = Callable[[FunctionCallRequest], str]
StopPredicate = Callable[[ModelReply, list[Message]], "str | None"]


class FunctionLoop:
    """Stepwise call/execute/observe cycle over one dialogue.

    `step()` performs one model exchange plus dispatch and returns a stop
    reason, or None to continue. The dialogue list passed in is mutated in
    place so the owner always sees the full trace. `cancel` is a cooperative
    stop check evaluated between iterations; a reply in flight when it fires
    is discarded unprocessed.
    """

    def __init__(
        self,
        backend: Any,
        dialogue: list[Message],
        schemas: Sequence[FunctionSchema],
        dispatcher: Dispatcher,
        stop: StopPredicate | None = None,
        meter: BudgetMeter | None = None,
        max_iterations: int = DEFAULT_MAX_ITERATIONS,
        cancel: Callable[[], "str | None"] | None = None,
        observer: Callable[[ModelReply], None] | None = None,
    ):
        if not schemas:
            raise ValueError("function loop requires at least one schema")
        self.backend = backend
        self.dialogue = dialogue
        self.schemas = list(schemas)
        self._schema_names = {s.name for s in self.schemas}
        self.dispatcher = dispatcher
        self.stop = stop
        self.meter = meter or BudgetMeter()
        self.max_iterations = max_iterations
        self.cancel = cancel
        self.observer = observer
        self.iterations = 0

    def step(self) -> str | None:
        if self.cancel is not None:
            reason = self.cancel()
            if reason:
                return reason
        if self.iterations >= self.max_iterations:
            return "max iterations"
        self.iterations += 1
        try:
            reply = chat(self.backend, self.dialogue, self.schemas, self.meter)
        except BudgetExhaustedError:
            return "budget"
        if self.cancel is not None:
            reason = self.cancel()
            if reason:
                return reason
        if self.observer is not None:
            self.observer(reply)
        if reply.call is not None:
            self.dialogue.append(Message(ROLE_ASSISTANT, call=reply.call))
            result = self._dispatch(reply.call)
            self.dialogue.append(
                Message(
                    ROLE_FUNCTION_RESULT,
                    content=result,
                    call_result_for=reply.call.name,
                )
            )
        else:
            self.dialogue.append(Message(ROLE_ASSISTANT, content=reply.text or ""))
        if self.stop is not None:
            return self.stop(reply, self.dialogue)
        return None

    def _dispatch(self, call: FunctionCallRequest) -> str:
        if call.name not in self._schema_names:
            return f"function {call.name} does not exist"
        if call.malformed:
            return (
                f"malformed arguments for function {call.name}: {call.raw_arguments}"
            )
        return self.dispatcher(call)


def run_function_loop(
    backend: Any,
    seed_dialogue: Sequence[Message],
    schemas: Sequence[FunctionSchema],
    dispatcher: Dispatcher,
    stop: StopPredicate | None = None,
    meter: BudgetMeter | None = None,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> tuple[list[Message], str]:
    """Drive a FunctionLoop to completion; returns (final dialogue, stop reason)."""
    loop = FunctionLoop(
        backend,
        list(seed_dialogue),
        schemas,
        dispatcher,
        stop=stop,
        meter=meter,
        max_iterations=max_iterations,
    )
    while True:
        reason = loop.step()
        if reason is not None:
            return loop.dialogue, reason
