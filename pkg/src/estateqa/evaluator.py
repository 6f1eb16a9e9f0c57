"""Metric suite and experiment runner.

End-to-end scoring (strict exact-match accuracy, item-level F1), intermediate
trace metrics (executable-ratio, pass@1, API-label accuracy, planning
accuracy), ground-truth injection ablations, and report emission in both a
human table layout and a machine-readable document.

Metric definitions:
- accuracy: strict exact match via :func:`estateqa.domain.answer_equal`; an
  unanswerable verdict scores 0 against any gold.
- item F1: answers decompose to item multisets (entity sets to their elements,
  scalars to a single normalized item); F1 = 2PR/(P+R), computed in exact
  rational arithmetic, 0 when either side is empty.
- ECR: fraction of episodes whose first generated SQL executed without error.
- pass@1: fraction whose first candidate's result rows equal the gold rows
  (order-insensitive multiset comparison).
- API label accuracy: over instances with gold tool calls, the emitted
  (function, normalized params) sequence equals the gold sequence.
- planning accuracy: the dispatched specialist sequence equals the gold route.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Sequence

from .backends import ChatBackend, OracleBackend
from .db_agent import DbAgent
from .domain import CanonicalAnswer, QAInstance, answer_equal
from .map_agent import MapAgent
from .slu import FewShotSlu, Gazetteer, LexiconSlu, SluPrediction, slu_metrics
from .store import GeoStore, extract_coordinates
from .supervisor import AgentResult, AgentTask, EpisodeTranscript, Supervisor
from .tools import ToolCache

# --- per-answer metrics ----------------------------------------------------------


def accuracy(pred: CanonicalAnswer | None, gold: CanonicalAnswer) -> int:
    if pred is None:
        return 0
    return int(answer_equal(pred, gold))


def item_f1(pred: CanonicalAnswer | None, gold: CanonicalAnswer) -> float:
    if pred is None:
        return 0.0
    pred_items = Counter(pred.items())
    gold_items = Counter(gold.items())
    if not pred_items or not gold_items:
        return 0.0
    overlap = sum((pred_items & gold_items).values())
    if overlap == 0:
        return 0.0
    precision = Fraction(overlap, sum(pred_items.values()))
    recall = Fraction(overlap, sum(gold_items.values()))
    return float(2 * precision * recall / (precision + recall))


# --- trace metrics -----------------------------------------------------------------


def _row_multiset(rows: Sequence[Sequence[Any]]) -> Counter:
    return Counter(tuple(r) for r in rows)


def trace_metrics(
    transcripts: Sequence[EpisodeTranscript], golds: Sequence[QAInstance]
) -> dict[str, float]:
    """Intermediate-step agreement between transcripts and gold supervision."""
    if len(transcripts) != len(golds):
        raise ValueError(f"{len(transcripts)} transcripts vs {len(golds)} golds")
    n = len(golds)
    ecr = passed = plan_hits = 0
    api_total = api_hits = 0
    for transcript, gold in zip(transcripts, golds):
        candidates = transcript.sql_candidates
        first = candidates[0] if candidates else None
        if first is not None and first.get("ok"):
            ecr += 1
            gold_rows = _row_multiset(gold.sql_trace[0].expected_rows)
            if _row_multiset(first.get("rows", [])) == gold_rows:
                passed += 1
        if gold.tool_trace:
            api_total += 1
            emitted = [
                (c["function"], dict(c.get("params", {}))) for c in transcript.tool_calls
            ]
            wanted = [(s.function, dict(s.params)) for s in gold.tool_trace]
            if emitted == wanted:
                api_hits += 1
        if transcript.specialist_sequence == gold.agent_route:
            plan_hits += 1
    return {
        "ecr": ecr / n if n else 0.0,
        "pass_at_1": passed / n if n else 0.0,
        "api_label_accuracy": api_hits / api_total if api_total else 1.0,
        "planning_accuracy": plan_hits / n if n else 0.0,
    }


# --- oracle specialists ---------------------------------------------------------------


class OracleDbAgent:
    """Replays the gold SQL trace verbatim; the harness's db-side self-test."""

    def __init__(self, golds: Sequence[QAInstance]) -> None:
        self._by_question = {g.question: g for g in golds}

    def handle(self, task: AgentTask) -> AgentResult:
        gold = self._by_question.get(task.question)
        if gold is None:
            return AgentResult(status="unable", error_report="no gold trace for question")
        evidence: list[dict[str, Any]] = []
        for step in gold.sql_trace:
            evidence.append(
                {
                    "type": "sql",
                    "statement": step.statement,
                    "ok": True,
                    "columns": list(step.expected_columns),
                    "rows": [list(r) for r in step.expected_rows],
                }
            )
            coordinates = extract_coordinates(step.expected_columns, step.expected_rows)
            if coordinates:
                evidence.append(
                    {
                        "type": "coordinates",
                        "entries": {
                            name: [p.latitude, p.longitude]
                            for name, p in coordinates.items()
                        },
                    }
                )
        return AgentResult(status="success", evidence=evidence)


class OracleMapAgent:
    """Replays the gold tool trace verbatim."""

    def __init__(self, golds: Sequence[QAInstance]) -> None:
        self._by_question = {g.question: g for g in golds}

    def handle(self, task: AgentTask) -> AgentResult:
        gold = self._by_question.get(task.question)
        if gold is None or not gold.tool_trace:
            return AgentResult(status="unable", error_report="no gold tool trace for question")
        evidence: list[dict[str, Any]] = [
            {
                "type": "tool_call",
                "function": step.function,
                "params": dict(step.params),
                "ok": True,
                "columns": list(step.expected_columns),
                "rows": [list(r) for r in step.expected_rows],
            }
            for step in gold.tool_trace
        ]
        return AgentResult(status="success", evidence=evidence)


# --- experiment runner ------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    inject_slu: bool = False
    inject_sql: bool = False
    inject_api: bool = False
    step_cap: int = 25
    seed: int = 0
    parallelism: int = 1
    sufficiency: str = "rule"
    slu_strategy: str = "lexicon"  # lexicon | fewshot
    agents: str = "live"  # live | oracle

    def __post_init__(self) -> None:
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")


@dataclass
class EvalReport:
    per_type: dict[int, dict[str, float]]
    overall: dict[str, float]
    trace: dict[str, float]
    slu: dict[str, object] | None
    failures: dict[str, int]
    episodes: int
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_type": {str(k): v for k, v in self.per_type.items()},
            "overall": self.overall,
            "trace": self.trace,
            "slu": self.slu,
            "failures": self.failures,
            "episodes": self.episodes,
            "config": self.config,
        }

    def render_table(self) -> str:
        lines = [f"{'Queries':<10} {'F1':>8} {'Acc':>8} {'Count':>7}"]
        for qtype in (1, 2, 3):
            row = self.per_type.get(qtype)
            if row is None:
                continue
            lines.append(
                f"Type {qtype:<5} {row['f1']:>8.4f} {row['acc']:>8.4f} {int(row['count']):>7}"
            )
        lines.append(
            f"{'Overall':<10} {self.overall['f1']:>8.4f} {self.overall['acc']:>8.4f}"
            f" {int(self.overall['count']):>7}"
        )
        lines.append("")
        lines.append(
            "ECR {ecr:.4f}  pass@1 {pass_at_1:.4f}  API-label {api_label_accuracy:.4f}"
            "  planning {planning_accuracy:.4f}".format(**self.trace)
        )
        return "\n".join(lines)


@dataclass
class EpisodeRecord:
    instance: QAInstance
    transcript: EpisodeTranscript
    slu_prediction: SluPrediction | None


def _build_slu(
    config: RunConfig,
    store: GeoStore,
    backend: ChatBackend,
    fewshot_pool: Sequence[QAInstance] | None,
):
    if config.slu_strategy == "fewshot":
        return FewShotSlu(backend, fewshot_pool or [])
    return LexiconSlu(Gazetteer.from_store(store))


def build_supervisor(
    instances: Sequence[QAInstance],
    store: GeoStore,
    cache: ToolCache,
    backend: ChatBackend,
    config: RunConfig,
) -> Supervisor:
    if config.agents == "oracle":
        specialists = {
            "db_agent": OracleDbAgent(instances),
            "map_agent": OracleMapAgent(instances),
        }
    else:
        specialists = {
            "db_agent": DbAgent(
                store,
                backend,
                inject_gold_sql=(
                    {i.question: i.sql_trace[0].statement for i in instances}
                    if config.inject_sql
                    else None
                ),
            ),
            "map_agent": MapAgent(
                cache,
                backend,
                inject_gold_tools=(
                    {i.question: i.tool_trace for i in instances}
                    if config.inject_api
                    else None
                ),
            ),
        }
    return Supervisor(
        backend, specialists, step_cap=config.step_cap, sufficiency=config.sufficiency
    )


def run_suite(
    instances: Sequence[QAInstance],
    store: GeoStore,
    cache: ToolCache,
    backend: ChatBackend,
    config: RunConfig,
    fewshot_pool: Sequence[QAInstance] | None = None,
) -> tuple[EvalReport, list[EpisodeRecord]]:
    """Run one episode per instance and aggregate the full metric suite.

    Deterministic given a deterministic backend; aggregation is an
    order-independent fold over completed episodes.
    """
    slu = None if config.inject_slu else _build_slu(config, store, backend, fewshot_pool)
    supervisor = build_supervisor(instances, store, cache, backend, config)

    def run_one(instance: QAInstance) -> EpisodeRecord:
        if config.inject_slu or slu is None:
            intents, slots = instance.intents, instance.slots
            prediction = None
        else:
            prediction = slu.predict(instance.question)
            intents, slots = prediction.intents, prediction.slots
        transcript = supervisor.run_episode(
            instance.question, intents, slots, instance_id=instance.id
        )
        return EpisodeRecord(instance, transcript, prediction)

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            records = list(pool.map(run_one, instances))
    else:
        records = [run_one(i) for i in instances]
    records.sort(key=lambda r: r.instance.id)

    return aggregate(records, config), records


def aggregate(records: Sequence[EpisodeRecord], config: RunConfig) -> EvalReport:
    buckets: dict[int, list[tuple[float, float]]] = {1: [], 2: [], 3: []}
    failures: Counter[str] = Counter()
    for record in records:
        pred = record.transcript.final_answer
        gold = record.instance.answer
        buckets[record.instance.question_type].append(
            (float(accuracy(pred, gold)), item_f1(pred, gold))
        )
        if pred is None:
            failures["unanswerable"] += 1
        if record.transcript.failure:
            failures[record.transcript.failure] += 1

    def summarize(pairs: list[tuple[float, float]]) -> dict[str, float]:
        if not pairs:
            return {"acc": 0.0, "f1": 0.0, "count": 0}
        return {
            "acc": sum(p[0] for p in pairs) / len(pairs),
            "f1": sum(p[1] for p in pairs) / len(pairs),
            "count": len(pairs),
        }

    per_type = {t: summarize(pairs) for t, pairs in buckets.items() if pairs}
    all_pairs = [p for pairs in buckets.values() for p in pairs]
    overall = summarize(all_pairs)

    trace = trace_metrics(
        [r.transcript for r in records], [r.instance for r in records]
    )
    slu_report = None
    if records and records[0].slu_prediction is not None:
        slu_report = slu_metrics(
            [r.slu_prediction for r in records], [r.instance for r in records]
        )
    return EvalReport(
        per_type=per_type,
        overall=overall,
        trace=trace,
        slu=slu_report,
        failures=dict(failures),
        episodes=len(records),
        config={
            "inject_slu": config.inject_slu,
            "inject_sql": config.inject_sql,
            "inject_api": config.inject_api,
            "step_cap": config.step_cap,
            "agents": config.agents,
            "slu_strategy": config.slu_strategy,
            "seed": config.seed,
        },
    )


# --- ground-truth injection ladder ----------------------------------------------------


ABLATION_LADDER: tuple[tuple[str, dict[str, bool]], ...] = (
    ("none", {}),
    ("gt_slu", {"inject_slu": True}),
    ("gt_slu_sql", {"inject_slu": True, "inject_sql": True}),
    ("gt_slu_sql_api", {"inject_slu": True, "inject_sql": True, "inject_api": True}),
)


def run_ablation(
    instances: Sequence[QAInstance],
    store: GeoStore,
    cache: ToolCache,
    backend: ChatBackend,
    config: RunConfig,
    fewshot_pool: Sequence[QAInstance] | None = None,
) -> dict[str, EvalReport]:
    """Sweep the four-rung ground-truth injection ladder: none, SLU,
    SLU+SQL, SLU+SQL+API."""
    reports: dict[str, EvalReport] = {}
    for name, flags in ABLATION_LADDER:
        rung = replace(config, **flags)
        report, _ = run_suite(instances, store, cache, backend, rung, fewshot_pool)
        reports[name] = report
    return reports


def make_oracle_backend(instances: Sequence[QAInstance], store: GeoStore) -> OracleBackend:
    captions = {c.table_id: c.caption for c in store.list_captions()}
    return OracleBackend(instances, captions)
