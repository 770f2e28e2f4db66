"""Message model, budget metering, scripted/remote backends, function loop."""

import json
import threading

import httpx
import pytest
from hypothesis import given, strategies as st

from toolloop.llm import (
    BudgetExhaustedError,
    BudgetMeter,
    FunctionCallRequest,
    FunctionSchema,
    Message,
    ModelReply,
    ProtocolError,
    RemoteBackend,
    ROLE_ASSISTANT,
    ROLE_FUNCTION_RESULT,
    ROLE_SYSTEM,
    ROLE_USER,
    SchemaParam,
    ScriptRule,
    ScriptedBackend,
    TokenUsage,
    TransportError,
    chat,
    dialogue_to_wire,
    proxy_token_count,
    run_function_loop,
)

ECHO_SCHEMAS = [FunctionSchema("echo", "echo back", (SchemaParam("text"),))]


def scripted(*rules: ScriptRule) -> ScriptedBackend:
    return ScriptedBackend(list(rules))


def call_rule(contains, name, args=None, usage=(10, 5), schemas=()):
    return ScriptRule(
        last_message_contains=contains,
        schemas_include=tuple(schemas),
        reply_call=FunctionCallRequest(name, dict(args or {})),
        usage=TokenUsage(*usage),
    )


def text_rule(text, usage=(10, 5)):
    return ScriptRule(always=True, reply_text=text, usage=TokenUsage(*usage))


class TestMessageModel:
    def test_call_only_on_assistant(self):
        with pytest.raises(ValueError):
            Message(ROLE_USER, call=FunctionCallRequest("f"))

    def test_result_names_function(self):
        with pytest.raises(ValueError):
            Message(ROLE_ASSISTANT, call_result_for="f")

    def test_reply_exactly_one_branch(self):
        with pytest.raises(ValueError):
            ModelReply()
        with pytest.raises(ValueError):
            ModelReply(call=FunctionCallRequest("f"), text="hi")

    def test_round_trip(self):
        msg = Message(ROLE_ASSISTANT, call=FunctionCallRequest("f", {"a": 1}))
        assert Message.from_payload(msg.to_payload()) == msg


class TestBudgetMeter:
    def test_totals_accumulate(self):
        meter = BudgetMeter(limit=100)
        meter.add(TokenUsage(10, 5))
        meter.add(TokenUsage(20, 5))
        assert meter.used == 40
        assert meter.calls == 2
        assert meter.remaining == 60

    def test_check_raises_at_limit(self):
        meter = BudgetMeter(limit=10)
        meter.add(TokenUsage(10, 0))
        with pytest.raises(BudgetExhaustedError):
            meter.check()

    def test_overshoot_bounded_by_one_reply(self):
        backend = scripted(text_rule("hello", usage=(90, 30)))
        meter = BudgetMeter(limit=100)
        chat(backend, [Message(ROLE_USER, "hi")], ECHO_SCHEMAS, meter)
        assert meter.used == 120  # admitted below the limit, may overshoot once
        with pytest.raises(BudgetExhaustedError):
            chat(backend, [Message(ROLE_USER, "hi")], ECHO_SCHEMAS, meter)

    def test_concurrent_adds(self):
        meter = BudgetMeter(limit=10_000_000)
        threads = [
            threading.Thread(
                target=lambda: [meter.add(TokenUsage(1, 1)) for _ in range(1000)]
            )
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert meter.used == 16_000
        assert meter.calls == 8_000


class TestScriptedBackend:
    def test_first_match_wins(self):
        backend = scripted(
            call_rule("convert", "convert", {"from": "USD"}),
            text_rule("fallback"),
        )
        reply = backend.complete(
            [Message(ROLE_USER, "please convert this")], ECHO_SCHEMAS
        )
        assert reply.call is not None and reply.call.name == "convert"

    def test_catch_all_required(self):
        with pytest.raises(ValueError, match="catch-all"):
            ScriptedBackend([call_rule("x", "f")])

    def test_catch_all_fires(self):
        backend = scripted(call_rule("nope", "f"), text_rule("I give up ..."))
        reply = backend.complete([Message(ROLE_USER, "other")], ECHO_SCHEMAS)
        assert reply.text == "I give up ..."

    def test_schema_condition(self):
        rule = ScriptRule(
            schemas_include=("finish",),
            reply_call=FunctionCallRequest("finish"),
            usage=TokenUsage(1, 1),
        )
        backend = scripted(rule, text_rule("no finish here"))
        with_finish = backend.complete(
            [Message(ROLE_USER, "x")], [FunctionSchema("finish")]
        )
        without = backend.complete([Message(ROLE_USER, "x")], ECHO_SCHEMAS)
        assert with_finish.call is not None
        assert without.text == "no finish here"

    def test_proxy_usage_when_unspecified(self):
        rule = ScriptRule(always=True, reply_text="abcdefgh")  # 8 chars -> 2 tokens
        backend = scripted(rule)
        reply = backend.complete([Message(ROLE_USER, "12345")], ECHO_SCHEMAS)
        assert reply.usage.completion == proxy_token_count("abcdefgh") == 2
        assert reply.usage.prompt == 2  # ceil(5 / 4)

    def test_file_round_trip(self, tmp_path):
        doc = {
            "rules": [
                {
                    "when": {"last_message_contains": "hi"},
                    "reply": {"call": {"name": "wave", "args": {"n": 1}}},
                    "usage": {"prompt": 3, "completion": 4},
                },
                {"when": {"always": True}, "reply": {"text": "bye"}},
            ]
        }
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(doc))
        backend = ScriptedBackend.from_file(str(path))
        reply = backend.complete([Message(ROLE_USER, "hi")], ECHO_SCHEMAS)
        assert reply.call.name == "wave"
        assert reply.usage == TokenUsage(3, 4)


class TestFunctionLoop:
    def test_three_step_finish(self):
        # Replayed by hand: 3 call replies, each appending an assistant
        # message and one function result -> seed + 6 messages.
        backend = scripted(
            call_rule("start", "step_one"),
            call_rule("did step_one", "step_two"),
            call_rule("did step_two", "finish"),
            text_rule("unused"),
        )
        schemas = [
            FunctionSchema("step_one"),
            FunctionSchema("step_two"),
            FunctionSchema("finish"),
        ]
        seed = [Message(ROLE_SYSTEM, "be brief"), Message(ROLE_USER, "start")]

        def dispatcher(call):
            return f"did {call.name}"

        def stop(reply, _dialogue):
            if reply.call is not None and reply.call.name == "finish":
                return "finish"
            return None

        dialogue, reason = run_function_loop(
            backend, seed, schemas, dispatcher, stop=stop
        )
        assert reason == "finish"
        assert len(dialogue) == len(seed) + 6
        assert [m.role for m in dialogue[2:]] == [
            ROLE_ASSISTANT,
            ROLE_FUNCTION_RESULT,
        ] * 3

    def test_guard_stops_looping_script(self):
        backend = scripted(
            ScriptRule(
                always=True,
                reply_call=FunctionCallRequest("spin"),
                usage=TokenUsage(1, 1),
            )
        )
        dialogue, reason = run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            [FunctionSchema("spin")],
            lambda call: "spun",
            max_iterations=30,
        )
        assert reason == "max iterations"
        assert sum(1 for m in dialogue if m.role == ROLE_ASSISTANT) == 30

    def test_unknown_function_keeps_loop_alive(self):
        backend = scripted(
            call_rule("go", "ghost"),
            call_rule("does not exist", "real"),
            call_rule("did real", "finish"),
            text_rule("unused"),
        )
        schemas = [FunctionSchema("real"), FunctionSchema("finish")]
        dialogue, reason = run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            schemas,
            lambda call: f"did {call.name}",
            stop=lambda r, _d: "finish" if r.call and r.call.name == "finish" else None,
        )
        assert reason == "finish"
        results = [m for m in dialogue if m.role == ROLE_FUNCTION_RESULT]
        assert results[0].content == "function ghost does not exist"

    def test_dispatcher_error_text_is_visible(self):
        backend = scripted(
            call_rule("go", "real"),
            call_rule("boom", "finish"),
            text_rule("unused"),
        )
        schemas = [FunctionSchema("real"), FunctionSchema("finish")]
        dialogue, reason = run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            schemas,
            lambda call: "boom" if call.name == "real" else "ok",
            stop=lambda r, _d: "finish" if r.call and r.call.name == "finish" else None,
        )
        assert reason == "finish"  # the error text drove the next rule

    def test_budget_exhaustion_reason(self):
        backend = scripted(text_rule("chatter", usage=(600, 400)))
        meter = BudgetMeter(limit=2000)
        _, reason = run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            ECHO_SCHEMAS,
            lambda call: "ok",
            meter=meter,
        )
        assert reason == "budget"
        assert meter.used == 2000

    def test_call_result_pairing_invariant(self):
        backend = scripted(
            ScriptRule(
                always=True,
                reply_call=FunctionCallRequest("spin"),
                usage=TokenUsage(1, 1),
            )
        )
        dialogue, _ = run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            [FunctionSchema("spin")],
            lambda call: "spun",
            max_iterations=7,
        )
        for i, message in enumerate(dialogue):
            if message.call is not None:
                follower = dialogue[i + 1]
                assert follower.role == ROLE_FUNCTION_RESULT
                assert follower.call_result_for == message.call.name

    def test_replay_determinism(self):
        def once():
            backend = scripted(
                call_rule("go", "step"),
                call_rule("did step", "finish"),
                text_rule("unused"),
            )
            return run_function_loop(
                backend,
                [Message(ROLE_USER, "go")],
                [FunctionSchema("step"), FunctionSchema("finish")],
                lambda call: f"did {call.name}",
                stop=lambda r, _d: "finish"
                if r.call and r.call.name == "finish"
                else None,
            )

        first_dialogue, first_reason = once()
        second_dialogue, second_reason = once()
        assert first_reason == second_reason
        assert [m.to_payload() for m in first_dialogue] == [
            m.to_payload() for m in second_dialogue
        ]

    def test_usage_sum_matches_meter_delta(self):
        usages = [(7, 3), (11, 5), (2, 2)]
        backend = scripted(
            call_rule("go", "a", usage=usages[0]),
            call_rule("did a", "b", usage=usages[1]),
            call_rule("did b", "finish", usage=usages[2]),
            text_rule("unused"),
        )
        meter = BudgetMeter(limit=10_000)
        run_function_loop(
            backend,
            [Message(ROLE_USER, "go")],
            [FunctionSchema("a"), FunctionSchema("b"), FunctionSchema("finish")],
            lambda call: f"did {call.name}",
            stop=lambda r, _d: "finish" if r.call and r.call.name == "finish" else None,
            meter=meter,
        )
        assert meter.used == sum(p + c for p, c in usages)


class TestWireFormat:
    def test_tool_call_pairing(self):
        dialogue = [
            Message(ROLE_USER, "hi"),
            Message(ROLE_ASSISTANT, call=FunctionCallRequest("f", {"a": 1})),
            Message(ROLE_FUNCTION_RESULT, "out", call_result_for="f"),
        ]
        wire = dialogue_to_wire(dialogue)
        assert wire[1]["tool_calls"][0]["id"] == wire[2]["tool_call_id"]
        assert json.loads(wire[1]["tool_calls"][0]["function"]["arguments"]) == {
            "a": 1
        }
        assert wire[2]["role"] == "tool"


def _completion(payload):
    return httpx.Response(200, json=payload)


class TestRemoteBackend:
    def _backend(self, handler, retries=3):
        return RemoteBackend(
            "http://test/v1",
            model="m",
            api_key="k",
            max_retries=retries,
            backoff_base=0.0,
            transport=httpx.MockTransport(handler),
        )

    def test_text_reply(self):
        def handler(request):
            return _completion(
                {
                    "choices": [{"message": {"content": "hello"}}],
                    "usage": {"prompt_tokens": 12, "completion_tokens": 4},
                }
            )

        reply = self._backend(handler).complete(
            [Message(ROLE_USER, "hi")], ECHO_SCHEMAS
        )
        assert reply.text == "hello"
        assert reply.usage == TokenUsage(12, 4)

    def test_tool_call_reply(self):
        def handler(request):
            body = json.loads(request.content)
            assert body["tools"][0]["function"]["name"] == "echo"
            return _completion(
                {
                    "choices": [
                        {
                            "message": {
                                "tool_calls": [
                                    {
                                        "id": "1",
                                        "function": {
                                            "name": "echo",
                                            "arguments": '{"text": "yo"}',
                                        },
                                    }
                                ]
                            }
                        }
                    ],
                    "usage": {"prompt_tokens": 5, "completion_tokens": 5},
                }
            )

        reply = self._backend(handler).complete(
            [Message(ROLE_USER, "hi")], ECHO_SCHEMAS
        )
        assert reply.call.name == "echo"
        assert reply.call.arguments == {"text": "yo"}

    def test_malformed_arguments_flagged_not_repaired(self):
        def handler(request):
            return _completion(
                {
                    "choices": [
                        {
                            "message": {
                                "tool_calls": [
                                    {
                                        "id": "1",
                                        "function": {
                                            "name": "echo",
                                            "arguments": "{broken",
                                        },
                                    }
                                ]
                            }
                        }
                    ]
                }
            )

        reply = self._backend(handler).complete(
            [Message(ROLE_USER, "hi")], ECHO_SCHEMAS
        )
        assert reply.call.malformed
        assert reply.call.raw_arguments == "{broken"

    def test_transport_failure_retries_then_raises(self):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            raise httpx.ConnectError("down")

        with pytest.raises(TransportError, match="after 3 attempts"):
            self._backend(handler).complete([Message(ROLE_USER, "hi")], ECHO_SCHEMAS)
        assert attempts["n"] == 3

    def test_malformed_reply_raises_protocol_error(self):
        def handler(request):
            return _completion({"choices": []})

        with pytest.raises(ProtocolError):
            self._backend(handler).complete([Message(ROLE_USER, "hi")], ECHO_SCHEMAS)

    def test_client_error_not_retried(self):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            return httpx.Response(401, text="no")

        with pytest.raises(ProtocolError, match="401"):
            self._backend(handler).complete([Message(ROLE_USER, "hi")], ECHO_SCHEMAS)
        assert attempts["n"] == 1


@given(st.text(max_size=200))
def test_proxy_token_count_is_ceil_div_four(text):
    count = proxy_token_count(text)
    assert count * 4 >= len(text) > (count - 1) * 4 or (count == 0 and not text)
