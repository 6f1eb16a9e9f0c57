"""Question template DSL: question pattern + SQL pattern + tool pattern +
answer derivation rule.

A template is a declarative JSON-compatible document. The shipped default set
below is configuration, not contract: it covers the three question types, all
four tool functions, and every answer-rule kind, and can be replaced by a
directory of template files with the same schema (see ``load_template_dir``).

Placeholder notes:
- every template implicitly binds ``{city}`` (display) and ``{city_slug}``
  (table names); ``{X}`` is restricted to 1..3;
- tool param values may reference coordinates produced by the SQL step via
  ``@lat:{placeholder}`` / ``@lon:{placeholder}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .domain import DomainError

PLACEHOLDER_RE = re.compile(r"\{([a-z_A-Z][a-zA-Z0-9_]*)\}")

# placeholder base name -> slot type emitted in gold annotations
SLOT_TYPES = {
    "community_name": "community_name",
    "poi_name": "poi_name",
    "poi_label": "poi_label",
    "city": "city",
    "district": "district",
    "X": "count",
    "radius_km": "radius_km",
    "minutes": "minutes",
    "property_type": "property_type",
}

ANSWER_RULE_KINDS = (
    "sql_cell",
    "sql_list",
    "sql_argmin",
    "sql_argmax",
    "tool_value",
    "tool_list",
    "tool_count",
    "tool_argmin",
    "tool_argmax",
    "tool_threshold",
)

BINDING_KINDS = ("community", "poi", "poi_label", "district", "int_range", "choice")


def slot_type_for(placeholder: str) -> str | None:
    base = re.sub(r"_\d+$", "", placeholder)
    return SLOT_TYPES.get(base)


@dataclass(frozen=True)
class Template:
    template_id: str
    question_type: int
    intents: tuple[str, ...]
    question_pattern: str
    bindings: dict[str, dict[str, Any]]
    sql_patterns: tuple[str, ...]
    tool_patterns: tuple[dict[str, Any], ...]
    answer_rule: dict[str, Any]
    derived: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.question_type not in (1, 2, 3):
            raise DomainError(f"{self.template_id}: question_type must be 1, 2 or 3")
        if self.question_type == 1 and self.tool_patterns:
            raise DomainError(f"{self.template_id}: type 1 templates take no tool steps")
        if self.question_type in (2, 3) and not self.tool_patterns:
            raise DomainError(f"{self.template_id}: type 2/3 templates need tool steps")
        if not self.sql_patterns:
            raise DomainError(f"{self.template_id}: at least one SQL pattern required")
        if self.answer_rule.get("kind") not in ANSWER_RULE_KINDS:
            raise DomainError(
                f"{self.template_id}: unknown answer rule {self.answer_rule.get('kind')!r}"
            )
        for name in PLACEHOLDER_RE.findall(self.question_pattern):
            if name not in self.bindings and name not in ("city",):
                raise DomainError(
                    f"{self.template_id}: question placeholder {{{name}}} is unbound"
                )
        for name, spec in self.bindings.items():
            if spec.get("kind") not in BINDING_KINDS:
                raise DomainError(
                    f"{self.template_id}: binding {name} has unknown kind {spec.get('kind')!r}"
                )
            if name == "X":
                lo, hi = int(spec.get("min", 1)), int(spec.get("max", 3))
                if lo < 1 or hi > 3:
                    raise DomainError(f"{self.template_id}: X must stay within 1..3")

    @property
    def agent_route(self) -> tuple[str, ...]:
        return ("db_agent",) if self.question_type == 1 else ("db_agent", "map_agent")

    def to_dict(self) -> dict[str, Any]:
        return {
            "template_id": self.template_id,
            "question_type": self.question_type,
            "intents": list(self.intents),
            "question_pattern": self.question_pattern,
            "bindings": self.bindings,
            "derived": self.derived,
            "sql_patterns": list(self.sql_patterns),
            "tool_patterns": [dict(t) for t in self.tool_patterns],
            "answer_rule": self.answer_rule,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Template":
        return cls(
            template_id=data["template_id"],
            question_type=int(data["question_type"]),
            intents=tuple(data["intents"]),
            question_pattern=data["question_pattern"],
            bindings=data["bindings"],
            sql_patterns=tuple(data["sql_patterns"]),
            tool_patterns=tuple(data["tool_patterns"]),
            answer_rule=data["answer_rule"],
            derived=data.get("derived", {}),
        )


def load_template_dir(path: str | Path) -> list[Template]:
    """Load every ``*.json`` template document under a directory."""
    templates = []
    for file in sorted(Path(path).glob("*.json")):
        data = json.loads(file.read_text(encoding="utf-8"))
        docs = data if isinstance(data, list) else [data]
        templates.extend(Template.from_dict(d) for d in docs)
    if not templates:
        raise DomainError(f"no template documents found under {path}")
    return templates


def dump_templates(templates: list[Template], path: str | Path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for t in templates:
        (out / f"{t.template_id}.json").write_text(
            json.dumps(t.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )


# --- shipped default set ------------------------------------------------------

def _coords_sql(*selects: str) -> str:
    return " UNION ALL ".join(selects)


def _community_coords(placeholder: str) -> str:
    return (
        "SELECT name, latitude, longitude FROM community_{city_slug}"
        f" WHERE name = '{{{placeholder}}}'"
    )


def _poi_coords(placeholder: str = "poi_name") -> str:
    return (
        "SELECT name, latitude, longitude FROM poi_{city_slug}"
        f" WHERE name = '{{{placeholder}}}'"
    )


def _pair_coords(a: str, b: str) -> str:
    return _coords_sql(_community_coords(a), _poi_coords(b) if b == "poi_name" else _community_coords(b))


def _route_params(origin: str, dest: str, **extra: Any) -> dict[str, Any]:
    params = {
        "origin_lat": f"@lat:{{{origin}}}",
        "origin_lon": f"@lon:{{{origin}}}",
        "dest_lat": f"@lat:{{{dest}}}",
        "dest_lon": f"@lon:{{{dest}}}",
    }
    params.update(extra)
    return params


DEFAULT_TEMPLATE_DICTS: list[dict[str, Any]] = [
    # --- type 1: database lookups ------------------------------------------------
    {
        "template_id": "t1_avg_price",
        "question_type": 1,
        "intents": ["price_lookup"],
        "question_pattern": "What is the average price per square meter of {community_name} in {city}?",
        "bindings": {"community_name": {"kind": "community"}},
        "sql_patterns": [
            "SELECT name, avg_price FROM community_{city_slug} WHERE name = '{community_name}'"
        ],
        "tool_patterns": [],
        "answer_rule": {
            "kind": "sql_cell",
            "step": 0,
            "column": "avg_price",
            "answer": "number",
            "unit": "yuan per square meter",
        },
    },
    {
        "template_id": "t1_greening",
        "question_type": 1,
        "intents": ["greening_lookup"],
        "question_pattern": "What is the greening rate of {community_name} in {city}?",
        "bindings": {"community_name": {"kind": "community"}},
        "sql_patterns": [
            "SELECT name, greening_rate FROM community_{city_slug} WHERE name = '{community_name}'"
        ],
        "tool_patterns": [],
        "answer_rule": {
            "kind": "sql_cell",
            "step": 0,
            "column": "greening_rate",
            "answer": "number",
            "unit": "percent",
        },
    },
    {
        "template_id": "t1_status",
        "question_type": 1,
        "intents": ["sales_status_lookup"],
        "question_pattern": "What is the current sales status of {community_name} in {city}?",
        "bindings": {"community_name": {"kind": "community"}},
        "sql_patterns": [
            "SELECT name, sales_status FROM community_{city_slug} WHERE name = '{community_name}'"
        ],
        "tool_patterns": [],
        "answer_rule": {"kind": "sql_cell", "step": 0, "column": "sales_status", "answer": "text"},
    },
    {
        "template_id": "t1_district_list",
        "question_type": 1,
        "intents": ["community_listing"],
        "question_pattern": "List the {property_type} communities in {district} of {city}.",
        "bindings": {
            "district": {"kind": "district"},
            "property_type": {
                "kind": "choice",
                "values": ["second-hand property", "new home", "villa", "apartment"],
            },
        },
        "sql_patterns": [
            "SELECT name FROM community_{city_slug} WHERE district = '{district}'"
            " AND property_type = '{property_type}' ORDER BY name"
        ],
        "tool_patterns": [],
        "answer_rule": {"kind": "sql_list", "step": 0, "column": "name"},
    },
    {
        "template_id": "t1_poi_count",
        "question_type": 1,
        "intents": ["poi_count"],
        "question_pattern": "How many {poi_label} POIs are recorded in {city}?",
        "bindings": {"poi_label": {"kind": "poi_label"}},
        "sql_patterns": [
            "SELECT COUNT(*) AS n FROM poi_{city_slug} WHERE label = '{poi_label}'"
        ],
        "tool_patterns": [],
        "answer_rule": {"kind": "sql_cell", "step": 0, "column": "n", "answer": "number", "unit": "count"},
    },
    {
        "template_id": "t1_compare_price",
        "question_type": 1,
        "intents": ["price_comparison"],
        "question_pattern": "Which has the higher average price per square meter in {city}: {community_name} or {community_name_2}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
        },
        "sql_patterns": [
            "SELECT name, avg_price FROM community_{city_slug}"
            " WHERE name IN ('{community_name}', '{community_name_2}') ORDER BY name"
        ],
        "tool_patterns": [],
        "answer_rule": {
            "kind": "sql_argmax",
            "step": 0,
            "name_column": "name",
            "value_column": "avg_price",
        },
    },
    {
        "template_id": "t1_cheapest_neighbor",
        "question_type": 1,
        "intents": ["neighbor_price_comparison"],
        "question_pattern": "Among the communities within one kilometer of {community_name} in {city}, which one has the lowest average price?",
        "bindings": {"community_name": {"kind": "community"}},
        "sql_patterns": [
            "SELECT c.name, c.avg_price FROM community_community_{city_slug} p"
            " JOIN community_{city_slug} c ON c.id = p.neighbor_id"
            " WHERE p.subject_name = '{community_name}' ORDER BY c.name"
        ],
        "tool_patterns": [],
        "answer_rule": {
            "kind": "sql_argmin",
            "step": 0,
            "name_column": "name",
            "value_column": "avg_price",
        },
    },
    # --- type 2: database + one direct tool call ----------------------------------
    {
        "template_id": "t2_walk_time",
        "question_type": 2,
        "intents": ["walk_time"],
        "question_pattern": "How long does it take to walk from {community_name} to {poi_name} in {city}?",
        "bindings": {"community_name": {"kind": "community"}, "poi_name": {"kind": "poi"}},
        "sql_patterns": [_pair_coords("community_name", "poi_name")],
        "tool_patterns": [
            {
                "function": "time_query",
                "params": _route_params("community_name", "poi_name", mode="walking"),
            }
        ],
        "answer_rule": {"kind": "tool_value", "step": 0, "answer": "duration"},
    },
    {
        "template_id": "t2_cycle_time",
        "question_type": 2,
        "intents": ["cycle_time"],
        "question_pattern": "How long does it take to cycle from {community_name} to {community_name_2} in {city}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
        },
        "sql_patterns": [_pair_coords("community_name", "community_name_2")],
        "tool_patterns": [
            {
                "function": "time_query",
                "params": _route_params("community_name", "community_name_2", mode="cycling"),
            }
        ],
        "answer_rule": {"kind": "tool_value", "step": 0, "answer": "duration"},
    },
    {
        "template_id": "t2_drive_distance",
        "question_type": 2,
        "intents": ["drive_distance"],
        "question_pattern": "What is the driving distance from {community_name} to {community_name_2} in {city}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
        },
        "sql_patterns": [_pair_coords("community_name", "community_name_2")],
        "tool_patterns": [
            {
                "function": "distance_query",
                "params": _route_params("community_name", "community_name_2", kind="driving"),
            }
        ],
        "answer_rule": {"kind": "tool_value", "step": 0, "answer": "distance"},
    },
    {
        "template_id": "t2_straight_distance",
        "question_type": 2,
        "intents": ["straight_distance"],
        "question_pattern": "What is the straight-line distance between {community_name} and {poi_name} in {city}?",
        "bindings": {"community_name": {"kind": "community"}, "poi_name": {"kind": "poi"}},
        "sql_patterns": [_pair_coords("community_name", "poi_name")],
        "tool_patterns": [
            {
                "function": "distance_query",
                "params": _route_params("community_name", "poi_name", kind="straight"),
            }
        ],
        "answer_rule": {"kind": "tool_value", "step": 0, "answer": "distance"},
    },
    {
        "template_id": "t2_rush_drive",
        "question_type": 2,
        "intents": ["rush_hour_time"],
        "question_pattern": "How long does it take to drive from {community_name} to {poi_name} in {city} during the morning rush hour?",
        "bindings": {"community_name": {"kind": "community"}, "poi_name": {"kind": "poi"}},
        "sql_patterns": [_pair_coords("community_name", "poi_name")],
        "tool_patterns": [
            {
                "function": "rush_hour_query",
                "params": _route_params("community_name", "poi_name", mode="driving"),
            }
        ],
        "answer_rule": {"kind": "tool_value", "step": 0, "answer": "duration"},
    },
    {
        "template_id": "t2_nearby_pois",
        "question_type": 2,
        "intents": ["nearby_poi_listing"],
        "question_pattern": "Which {poi_label} POIs are within {radius_km} km of {community_name} in {city}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "poi_label": {"kind": "poi_label"},
            "radius_km": {"kind": "choice", "values": [1, 2, 3]},
        },
        "derived": {"radius_m": {"from": "radius_km", "op": "mul", "factor": 1000}},
        "sql_patterns": [_community_coords("community_name")],
        "tool_patterns": [
            {
                "function": "surrounding_pois_query",
                "params": {
                    "center_lat": "@lat:{community_name}",
                    "center_lon": "@lon:{community_name}",
                    "radius_m": "{radius_m}",
                    "label": "{poi_label}",
                },
            }
        ],
        "answer_rule": {"kind": "tool_list", "step": 0, "column": "name"},
    },
    {
        "template_id": "t2_nearest_x",
        "question_type": 2,
        "intents": ["nearest_poi_listing"],
        "question_pattern": "What are the nearest {X} {poi_label} POIs within {radius_km} km of {community_name} in {city}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "poi_label": {"kind": "poi_label"},
            "radius_km": {"kind": "choice", "values": [2, 3]},
            "X": {"kind": "int_range", "min": 1, "max": 3},
        },
        "derived": {"radius_m": {"from": "radius_km", "op": "mul", "factor": 1000}},
        "sql_patterns": [_community_coords("community_name")],
        "tool_patterns": [
            {
                "function": "surrounding_pois_query",
                "params": {
                    "center_lat": "@lat:{community_name}",
                    "center_lon": "@lon:{community_name}",
                    "radius_m": "{radius_m}",
                    "label": "{poi_label}",
                },
            }
        ],
        "answer_rule": {"kind": "tool_list", "step": 0, "column": "name", "limit": "{X}"},
    },
    # --- type 3: tools plus post-tool reasoning -----------------------------------
    {
        "template_id": "t3_least_drive",
        "question_type": 3,
        "intents": ["least_travel_time"],
        "question_pattern": "Which place takes the least time to drive to {poi_name} in {city}: {community_name}, {community_name_2}, or {community_name_3}?",
        "bindings": {
            "poi_name": {"kind": "poi"},
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
            "community_name_3": {"kind": "community"},
        },
        "sql_patterns": [
            _coords_sql(
                _community_coords("community_name"),
                _community_coords("community_name_2"),
                _community_coords("community_name_3"),
                _poi_coords(),
            )
        ],
        "tool_patterns": [
            {"function": "time_query", "params": _route_params("community_name", "poi_name", mode="driving")},
            {"function": "time_query", "params": _route_params("community_name_2", "poi_name", mode="driving")},
            {"function": "time_query", "params": _route_params("community_name_3", "poi_name", mode="driving")},
        ],
        "answer_rule": {
            "kind": "tool_argmin",
            "steps": [0, 1, 2],
            "labels": ["{community_name}", "{community_name_2}", "{community_name_3}"],
        },
    },
    {
        "template_id": "t3_closest_walk",
        "question_type": 3,
        "intents": ["closest_on_foot"],
        "question_pattern": "Which community is closer on foot to {poi_name} in {city}: {community_name} or {community_name_2}?",
        "bindings": {
            "poi_name": {"kind": "poi"},
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
        },
        "sql_patterns": [
            _coords_sql(
                _community_coords("community_name"),
                _community_coords("community_name_2"),
                _poi_coords(),
            )
        ],
        "tool_patterns": [
            {"function": "time_query", "params": _route_params("community_name", "poi_name", mode="walking")},
            {"function": "time_query", "params": _route_params("community_name_2", "poi_name", mode="walking")},
        ],
        "answer_rule": {
            "kind": "tool_argmin",
            "steps": [0, 1],
            "labels": ["{community_name}", "{community_name_2}"],
        },
    },
    {
        "template_id": "t3_reach_within",
        "question_type": 3,
        "intents": ["reachability_filter"],
        "question_pattern": "Which of {community_name}, {community_name_2} and {community_name_3} can reach {poi_name} in {city} within {minutes} minutes by public transit?",
        "bindings": {
            "poi_name": {"kind": "poi"},
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
            "community_name_3": {"kind": "community"},
            "minutes": {"kind": "choice", "values": [10, 15, 20, 30]},
        },
        "derived": {"seconds": {"from": "minutes", "op": "mul", "factor": 60}},
        "sql_patterns": [
            _coords_sql(
                _community_coords("community_name"),
                _community_coords("community_name_2"),
                _community_coords("community_name_3"),
                _poi_coords(),
            )
        ],
        "tool_patterns": [
            {"function": "time_query", "params": _route_params("community_name", "poi_name", mode="transit")},
            {"function": "time_query", "params": _route_params("community_name_2", "poi_name", mode="transit")},
            {"function": "time_query", "params": _route_params("community_name_3", "poi_name", mode="transit")},
        ],
        "answer_rule": {
            "kind": "tool_threshold",
            "steps": [0, 1, 2],
            "labels": ["{community_name}", "{community_name_2}", "{community_name_3}"],
            "op": "<=",
            "value": "{seconds}",
        },
    },
    {
        "template_id": "t3_nearby_count",
        "question_type": 3,
        "intents": ["nearby_poi_count"],
        "question_pattern": "How many {poi_label} POIs are within {radius_km} km of {community_name} in {city}?",
        "bindings": {
            "community_name": {"kind": "community"},
            "poi_label": {"kind": "poi_label"},
            "radius_km": {"kind": "choice", "values": [1, 2, 3]},
        },
        "derived": {"radius_m": {"from": "radius_km", "op": "mul", "factor": 1000}},
        "sql_patterns": [_community_coords("community_name")],
        "tool_patterns": [
            {
                "function": "surrounding_pois_query",
                "params": {
                    "center_lat": "@lat:{community_name}",
                    "center_lon": "@lon:{community_name}",
                    "radius_m": "{radius_m}",
                    "label": "{poi_label}",
                },
            }
        ],
        "answer_rule": {"kind": "tool_count", "step": 0},
    },
    {
        "template_id": "t3_walk_or_transit",
        "question_type": 3,
        "intents": ["mode_comparison"],
        "question_pattern": "To get from {community_name} to {poi_name} in {city}, which is faster: walking or public transit?",
        "bindings": {"community_name": {"kind": "community"}, "poi_name": {"kind": "poi"}},
        "sql_patterns": [_pair_coords("community_name", "poi_name")],
        "tool_patterns": [
            {"function": "time_query", "params": _route_params("community_name", "poi_name", mode="walking")},
            {"function": "time_query", "params": _route_params("community_name", "poi_name", mode="transit")},
        ],
        "answer_rule": {
            "kind": "tool_argmin",
            "steps": [0, 1],
            "labels": ["walking", "public transit"],
        },
    },
    {
        "template_id": "t3_rush_threshold",
        "question_type": 3,
        "intents": ["rush_reachability_filter"],
        "question_pattern": "During the morning rush hour, which of {community_name}, {community_name_2} and {community_name_3} can reach {poi_name} in {city} within {minutes} minutes by car?",
        "bindings": {
            "poi_name": {"kind": "poi"},
            "community_name": {"kind": "community"},
            "community_name_2": {"kind": "community"},
            "community_name_3": {"kind": "community"},
            "minutes": {"kind": "choice", "values": [10, 15, 20, 30]},
        },
        "derived": {"seconds": {"from": "minutes", "op": "mul", "factor": 60}},
        "sql_patterns": [
            _coords_sql(
                _community_coords("community_name"),
                _community_coords("community_name_2"),
                _community_coords("community_name_3"),
                _poi_coords(),
            )
        ],
        "tool_patterns": [
            {"function": "rush_hour_query", "params": _route_params("community_name", "poi_name", mode="driving")},
            {"function": "rush_hour_query", "params": _route_params("community_name_2", "poi_name", mode="driving")},
            {"function": "rush_hour_query", "params": _route_params("community_name_3", "poi_name", mode="driving")},
        ],
        "answer_rule": {
            "kind": "tool_threshold",
            "steps": [0, 1, 2],
            "labels": ["{community_name}", "{community_name_2}", "{community_name_3}"],
            "op": "<=",
            "value": "{seconds}",
        },
    },
]


def default_templates() -> list[Template]:
    return [Template.from_dict(d) for d in DEFAULT_TEMPLATE_DICTS]
