"""Backends: envelope round-trips, oracle replay, and the HTTP chat-completion
wire format exercised against a local server."""

from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from estateqa.backends import (
    BackendError,
    HttpBackend,
    OracleBackend,
    RaisingBackend,
    ScriptedBackend,
    build_task_message,
    parse_answer,
    parse_task_header,
    render_answer,
)
from estateqa.db_agent import extract_sql
from estateqa.domain import CanonicalAnswer, answer_equal
from estateqa.map_agent import parse_decisions


# --- envelopes ---------------------------------------------------------------------


def _random_answer(rng: random.Random) -> CanonicalAnswer:
    kind = rng.choice(CanonicalAnswer.KINDS)
    if kind == "entity_set":
        return CanonicalAnswer.entity_set(
            [f"Entity {rng.randint(1, 9)}" for _ in range(rng.randint(1, 4))]
        )
    if kind == "number":
        return CanonicalAnswer.number(rng.randint(0, 9999) / 4, rng.choice(["count", "percent", ""]))
    if kind == "duration":
        return CanonicalAnswer.duration(rng.randint(0, 9999))
    if kind == "distance":
        return CanonicalAnswer.distance(rng.randint(0, 9999))
    if kind == "boolean":
        return CanonicalAnswer.boolean(rng.random() < 0.5)
    return CanonicalAnswer.from_text("some answer text")


def test_answer_envelope_round_trip():
    rng = random.Random(77)
    for _ in range(300):
        answer = _random_answer(rng)
        parsed = parse_answer(render_answer(answer))
        assert parsed is not None
        assert answer_equal(parsed, answer), (answer, parsed)


def test_answer_envelope_ignores_surrounding_prose():
    text = "Let me think...\nreasoning here\n" + render_answer(
        CanonicalAnswer.duration(936)
    ) + "\n"
    assert parse_answer(text) == CanonicalAnswer.duration(936)


def test_parse_answer_garbage_is_none():
    assert parse_answer("I do not know") is None
    assert parse_answer("ANSWER_KIND: entity_set\nANSWER: ") is None
    assert parse_answer("ANSWER_KIND: number\nANSWER: not-a-number") is None
    assert parse_answer("ANSWER_KIND: nonsense\nANSWER: 1") is None


def test_task_header_round_trip():
    content = build_task_message("plan", "What is life?", intents="a, b", extra="x")
    header = parse_task_header([{"role": "user", "content": content}])
    assert header["task"] == "plan"
    assert header["question"] == "What is life?"
    assert header["intents"] == "a, b"
    assert header["extra"] == "x"


def test_task_header_reads_last_user_message():
    messages = [
        {"role": "user", "content": "TASK: old"},
        {"role": "assistant", "content": "ok"},
        {"role": "user", "content": "TASK: new\nQUESTION: q"},
    ]
    assert parse_task_header(messages)["task"] == "new"


# --- scripted/raising ------------------------------------------------------------------


def test_scripted_backend_by_task_and_list():
    backend = ScriptedBackend(responses={"plan": ["first", "second"]}, default="dflt")
    msg = [{"role": "user", "content": build_task_message("plan", "q")}]
    assert backend.complete("", msg) == "first"
    assert backend.complete("", msg) == "second"
    assert backend.complete("", msg) == "dflt"
    other = [{"role": "user", "content": build_task_message("finalize", "q")}]
    assert backend.complete("", other) == "dflt"
    assert len(backend.calls) == 4


def test_raising_backend():
    with pytest.raises(BackendError):
        RaisingBackend().complete("", [])


# --- oracle ------------------------------------------------------------------------------


def test_oracle_rejects_duplicate_questions(desk_instances):
    from dataclasses import replace

    dupe = replace(desk_instances[0], id="other-id")
    with pytest.raises(ValueError, match="duplicate question"):
        OracleBackend([desk_instances[0], dupe], {})


def test_oracle_stage_envelopes_parse(desk_instances, desk_store):
    captions = {c.table_id: c.caption for c in desk_store.list_captions()}
    backend = OracleBackend(desk_instances, captions)
    inst = next(i for i in desk_instances if i.question_type == 3)

    def ask(task, **fields):
        return backend.complete(
            "", [{"role": "user", "content": build_task_message(task, inst.question, **fields)}]
        )

    plan = ask("plan")
    assert [line.split()[1].rstrip(":") for line in plan.splitlines()] == list(inst.agent_route)

    statement = extract_sql(ask("generate_sql"))
    assert statement == inst.sql_trace[0].statement

    summary = ask("caption_summary")
    assert inst.city in summary

    decisions, rule, unable = parse_decisions(ask("decide_tools"))
    assert not unable
    assert [d.function for d in decisions] == [t.function for t in inst.tool_trace]
    assert rule.kind == "passthrough"

    final = parse_answer(ask("finalize"))
    assert final is not None and answer_equal(final, inst.answer)

    assert ask("sufficiency", dispatched="0") == "SUFFICIENT: no"
    assert ask("sufficiency", dispatched=str(len(inst.agent_route))) == "SUFFICIENT: yes"


def test_oracle_unknown_question_raises(desk_instances, desk_store):
    backend = OracleBackend(desk_instances[:5], {})
    with pytest.raises(BackendError):
        backend.complete(
            "", [{"role": "user", "content": build_task_message("plan", "never seen")}]
        )


# --- HTTP backend ---------------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    requests: list[dict] = []
    response_body: bytes = b""
    status: int = 200

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).requests.append(
            {"body": body, "auth": self.headers.get("Authorization")}
        )
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(self.response_body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def http_server():
    _Handler.requests = []
    _Handler.response_body = json.dumps(
        {"choices": [{"message": {"role": "assistant", "content": "pong"}}]}
    ).encode()
    _Handler.status = 200
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions", _Handler
    server.shutdown()


def test_http_backend_wire_format(http_server, monkeypatch):
    endpoint, handler = http_server
    monkeypatch.setenv("TEST_API_KEY", "sk-secret")
    backend = HttpBackend(endpoint, model="demo-model", api_key_env="TEST_API_KEY")
    reply = backend.complete("sys prompt", [{"role": "user", "content": "ping"}])
    assert reply == "pong"
    sent = handler.requests[0]
    assert sent["auth"] == "Bearer sk-secret"
    assert sent["body"]["model"] == "demo-model"
    assert sent["body"]["messages"][0] == {"role": "system", "content": "sys prompt"}
    assert sent["body"]["messages"][1] == {"role": "user", "content": "ping"}
    assert sent["body"]["temperature"] == 0.0


def test_http_backend_no_key_no_header(http_server, monkeypatch):
    endpoint, handler = http_server
    monkeypatch.delenv("ESTATEQA_API_KEY", raising=False)
    backend = HttpBackend(endpoint, model="demo-model")
    backend.complete("s", [])
    assert handler.requests[0]["auth"] is None


def test_http_backend_malformed_response(http_server):
    endpoint, handler = http_server
    handler.response_body = json.dumps({"unexpected": True}).encode()
    backend = HttpBackend(endpoint, model="m")
    with pytest.raises(BackendError, match="malformed"):
        backend.complete("s", [])


def test_http_backend_unreachable():
    backend = HttpBackend("http://127.0.0.1:9/nothing", model="m", timeout_s=0.5)
    with pytest.raises(BackendError):
        backend.complete("s", [])
