"""Chat backends and the structured envelopes agents parse out of them.

Free-form chain-of-thought is allowed anywhere in a completion; parsers only
react to the envelope lines documented here:

    plan/replan     DISPATCH <specialist>: <sub-task description>
    SQL             fenced ```sql ... ``` block with exactly one statement
    tool decisions  TOOL: <function> PARAMS: <json object>
                    SYNTHESIZE: <passthrough|argmin|argmax|count|threshold_filter>
    final answer    ANSWER_KIND: <kind> / ANSWER: <payload> / UNIT: <unit>
    sufficiency     SUFFICIENT: <yes|no>

Backends implement ``complete(system_prompt, messages) -> text``. The oracle
backend replays gold supervision and is the harness's self-test; the HTTP
backend speaks the de-facto chat-completion wire format with the key taken
from an environment variable, never from config values.
"""

from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from typing import Any, Mapping, Protocol, Sequence

from .domain import CanonicalAnswer, QAInstance

Message = Mapping[str, str]


class BackendError(RuntimeError):
    """Backend unreachable or returned an unusable response."""


class ChatBackend(Protocol):
    def complete(self, system_prompt: str, messages: Sequence[Message]) -> str: ...


# --- request headers ------------------------------------------------------------

_HEADER_RE = re.compile(r"^([A-Z_]+):[ \t]*(.*)$")


def build_task_message(task: str, question: str, **fields: str) -> str:
    lines = [f"TASK: {task}", f"QUESTION: {question}"]
    lines.extend(f"{key.upper()}: {value}" for key, value in fields.items())
    return "\n".join(lines)


def parse_task_header(messages: Sequence[Message]) -> dict[str, str]:
    """Read the structured header fields of the last user message."""
    for message in reversed(messages):
        if message.get("role") == "user":
            fields: dict[str, str] = {}
            for line in message.get("content", "").splitlines():
                match = _HEADER_RE.match(line)
                if match:
                    fields.setdefault(match.group(1).casefold(), match.group(2))
            return fields
    return {}


# --- answer envelope ----------------------------------------------------------------


def render_answer(answer: CanonicalAnswer) -> str:
    lines = [f"ANSWER_KIND: {answer.kind}"]
    if answer.kind == "entity_set":
        lines.append("ANSWER: " + " | ".join(answer.entities))
    elif answer.kind == "number":
        lines.append(f"ANSWER: {answer.value!r}")
        if answer.unit:
            lines.append(f"UNIT: {answer.unit}")
    elif answer.kind in ("duration", "distance"):
        lines.append(f"ANSWER: {answer.value!r}")
    elif answer.kind == "boolean":
        lines.append(f"ANSWER: {'true' if answer.flag else 'false'}")
    else:
        lines.append(f"ANSWER: {answer.text}")
    return "\n".join(lines)


def parse_answer(text: str) -> CanonicalAnswer | None:
    """Parse the answer envelope; returns None when no well-formed envelope is
    present (the caller degrades to a raw-text answer)."""
    kind = None
    payload = None
    unit = ""
    for line in text.splitlines():
        match = _HEADER_RE.match(line.strip())
        if not match:
            continue
        key, value = match.group(1), match.group(2).strip()
        if key == "ANSWER_KIND":
            kind = value.strip().casefold()
        elif key == "ANSWER":
            payload = value
        elif key == "UNIT":
            unit = value
    if kind is None or payload is None or kind not in CanonicalAnswer.KINDS:
        return None
    try:
        if kind == "entity_set":
            entities = [e.strip() for e in payload.split("|") if e.strip()]
            if not entities:
                return None
            return CanonicalAnswer.entity_set(entities)
        if kind == "number":
            return CanonicalAnswer.number(float(payload), unit)
        if kind == "duration":
            return CanonicalAnswer(kind="duration", value=float(payload))
        if kind == "distance":
            return CanonicalAnswer(kind="distance", value=float(payload))
        if kind == "boolean":
            if payload.casefold() not in ("true", "false", "yes", "no"):
                return None
            return CanonicalAnswer.boolean(payload.casefold() in ("true", "yes"))
        return CanonicalAnswer.from_text(payload)
    except (ValueError, TypeError):
        return None


# --- concrete backends -----------------------------------------------------------------


class ScriptedBackend:
    """Deterministic canned-response backend for tests and sabotage studies.

    ``responses`` maps a task name to a fixed reply or a list consumed in
    order; ``default`` answers anything unmapped.
    """

    def __init__(
        self,
        responses: dict[str, Any] | None = None,
        default: str = "",
    ) -> None:
        self.responses = dict(responses or {})
        self.default = default
        self.calls: list[dict[str, str]] = []

    def complete(self, system_prompt: str, messages: Sequence[Message]) -> str:
        header = parse_task_header(messages)
        self.calls.append(header)
        task = header.get("task", "")
        reply = self.responses.get(task, self.default)
        if isinstance(reply, list):
            if not reply:
                return self.default
            return reply.pop(0)
        return reply


class RaisingBackend:
    """Backend that always fails; used for termination and degradation tests."""

    def __init__(self, message: str = "backend unavailable") -> None:
        self.message = message

    def complete(self, system_prompt: str, messages: Sequence[Message]) -> str:
        raise BackendError(self.message)


class OracleBackend:
    """Replays gold supervision for whichever stage is being prompted.

    Keyed by question text, which the generator keeps globally unique. Stage
    dispatch reads the TASK header the agents embed in their prompts.
    """

    def __init__(self, instances: Sequence[QAInstance], captions_by_table: Mapping[str, str]):
        self._by_question: dict[str, QAInstance] = {}
        for inst in instances:
            if inst.question in self._by_question:
                raise ValueError(f"duplicate question text: {inst.question!r}")
            self._by_question[inst.question] = inst
        self._captions_by_table = dict(captions_by_table)

    def _gold(self, header: Mapping[str, str]) -> QAInstance:
        question = header.get("question", "")
        try:
            return self._by_question[question]
        except KeyError:
            raise BackendError(f"oracle has no gold for question {question!r}") from None

    def complete(self, system_prompt: str, messages: Sequence[Message]) -> str:
        header = parse_task_header(messages)
        task = header.get("task", "")
        gold = self._gold(header)
        if task in ("plan", "replan"):
            return "\n".join(
                f"DISPATCH {agent}: {'query tables' if agent == 'db_agent' else 'call map tools'}"
                for agent in gold.agent_route
            )
        if task == "sufficiency":
            done = int(header.get("dispatched", "0"))
            return "SUFFICIENT: yes" if done >= len(gold.agent_route) else "SUFFICIENT: no"
        if task == "finalize":
            return render_answer(gold.answer)
        if task == "caption_summary":
            table = _first_table(gold.sql_trace[0].statement)
            return self._captions_by_table.get(table or "", table or "")
        if task == "generate_sql":
            return f"```sql\n{gold.sql_trace[0].statement}\n```"
        if task == "decide_tools":
            lines = []
            for step in gold.tool_trace:
                params = {k: v for k, v in step.params.items() if k != "time_bucket"}
                lines.append(
                    f"TOOL: {step.function} PARAMS: "
                    + json.dumps(params, sort_keys=True)
                    + f' BUCKET: {step.params.get("time_bucket", "")}'
                )
            lines.append("SYNTHESIZE: passthrough")
            return "\n".join(lines)
        if task == "slu":
            return json.dumps(
                {
                    "intents": list(gold.intents),
                    "slots": [{"slot_type": s.slot_type, "value": s.value} for s in gold.slots],
                },
                ensure_ascii=False,
            )
        raise BackendError(f"oracle does not understand task {task!r}")


_FROM_RE = re.compile(r"\bFROM\s+([A-Za-z_][A-Za-z0-9_]*)", re.IGNORECASE)


def _first_table(statement: str) -> str | None:
    match = _FROM_RE.search(statement)
    return match.group(1) if match else None


class HttpBackend:
    """Chat-completion client over HTTP in the standard message-list format.

    The API key is read from the named environment variable at call time and
    sent as a bearer token; requests carry {model, messages, temperature}.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "ESTATEQA_API_KEY",
        temperature: float = 0.0,
        timeout_s: float = 60.0,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout_s = timeout_s

    def complete(self, system_prompt: str, messages: Sequence[Message]) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "system", "content": system_prompt}, *map(dict, messages)],
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers=headers,
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                body = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, json.JSONDecodeError, OSError) as exc:
            raise BackendError(f"chat backend request failed: {exc}") from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {body!r}") from exc
