"""Embedded relational store for the four per-city table families.

Backed by SQLite. Mutation is confined to fixture ingestion and proximity-pair
building; every query path is read-only and guarded by a statement check plus
an authorizer, because agent-generated SQL is untrusted.

Fixture format: one UTF-8 CSV per table family per city with a header row,
named ``communities_<city_slug>.csv`` and ``pois_<city_slug>.csv``. The two
pair families are derived, never ingested.
"""

from __future__ import annotations

import csv
import json
import re
import sqlite3
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .domain import Community, DomainError, GeoPoint, Poi, haversine

FAMILIES = ("community", "poi", "poi_community", "community_community")

DEFAULT_POI_TAXONOMY: dict[str, tuple[str, ...]] = {
    "school": ("primary school", "secondary school", "kindergarten"),
    "hospital": ("general hospital", "clinic"),
    "supermarket": ("supermarket",),
    "shopping_mall": ("shopping mall",),
    "park": ("park",),
    "transit_station": ("subway station", "bus station"),
}

_COMMUNITY_COLUMNS = (
    "id",
    "city",
    "name",
    "district",
    "address",
    "latitude",
    "longitude",
    "greening_rate",
    "avg_price",
    "property_type",
    "sales_status",
)
_POI_COLUMNS = ("id", "city", "name", "category", "label", "latitude", "longitude")

_SELECT_RE = re.compile(r"^\s*(select|with)\b", re.IGNORECASE)


class IngestError(ValueError):
    """A fixture record violated the schema; the message names the record."""


class SqlExecutionError(RuntimeError):
    """Structured SQL failure; the message carries the engine report."""


@dataclass(frozen=True)
class StoreConfig:
    cities: tuple[str, ...]
    poi_pairing_radius: float = 3000.0
    community_pairing_radius: float = 1000.0
    fixture_seed: int = 0
    poi_taxonomy: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_POI_TAXONOMY)
    )

    def __post_init__(self) -> None:
        if self.poi_pairing_radius <= 0 or self.community_pairing_radius <= 0:
            raise DomainError("pairing radii must be positive")

    def label_category(self, label: str) -> str | None:
        for category, labels in self.poi_taxonomy.items():
            if label in labels:
                return category
        return None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for labels in self.poi_taxonomy.values() for l in labels)


@dataclass(frozen=True)
class TableCaption:
    table_id: str
    caption: str
    city: str
    family: str
    columns: tuple[str, ...]


def city_slug(city: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", city.casefold()).strip("_")


def _caption_text(family: str, city: str) -> str:
    return {
        "community": f"Table for Communities in {city}",
        "poi": f"Table for POIs in {city}",
        "poi_community": f"Table for Communities around POIs in {city}",
        "community_community": f"Table for Communities around Communities in {city}",
    }[family]


_FAMILY_SCHEMAS = {
    "community": _COMMUNITY_COLUMNS,
    "poi": _POI_COLUMNS,
    "poi_community": (
        "poi_id",
        "poi_name",
        "poi_label",
        "community_id",
        "community_name",
        "straight_distance",
    ),
    "community_community": (
        "subject_id",
        "subject_name",
        "neighbor_id",
        "neighbor_name",
        "straight_distance",
    ),
}

_CREATE_SQL = {
    "community": (
        "CREATE TABLE {t} (id TEXT PRIMARY KEY, city TEXT, name TEXT, district TEXT,"
        " address TEXT, latitude REAL, longitude REAL, greening_rate REAL,"
        " avg_price REAL, property_type TEXT, sales_status TEXT)"
    ),
    "poi": (
        "CREATE TABLE {t} (id TEXT PRIMARY KEY, city TEXT, name TEXT, category TEXT,"
        " label TEXT, latitude REAL, longitude REAL)"
    ),
    "poi_community": (
        "CREATE TABLE {t} (poi_id TEXT, poi_name TEXT, poi_label TEXT,"
        " community_id TEXT, community_name TEXT, straight_distance REAL)"
    ),
    "community_community": (
        "CREATE TABLE {t} (subject_id TEXT, subject_name TEXT, neighbor_id TEXT,"
        " neighbor_name TEXT, straight_distance REAL)"
    ),
}


class GeoStore:
    """Four table families per city plus a caption catalog.

    After ingestion the store is read-only for callers; concurrent readers
    share one connection serialized by an internal lock.
    """

    def __init__(
        self, config: StoreConfig, path: str | Path | None = None, _existing: bool = False
    ) -> None:
        self.config = config
        self.path = str(path) if path is not None else ":memory:"
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._lock = threading.RLock()
        if not _existing:
            self._create_tables()

    @classmethod
    def open(cls, path: str | Path) -> "GeoStore":
        """Reopen a store file created earlier; the config rides in the file."""
        conn = sqlite3.connect(str(path))
        try:
            row = conn.execute("SELECT value FROM _meta WHERE key = 'config'").fetchone()
        except sqlite3.Error as exc:
            raise IngestError(f"{path} is not a store file: {exc}") from exc
        finally:
            conn.close()
        if row is None:
            raise IngestError(f"{path} carries no store config")
        raw = json.loads(row[0])
        config = StoreConfig(
            cities=tuple(raw["cities"]),
            poi_pairing_radius=raw["poi_pairing_radius"],
            community_pairing_radius=raw["community_pairing_radius"],
            fixture_seed=raw["fixture_seed"],
            poi_taxonomy={k: tuple(v) for k, v in raw["poi_taxonomy"].items()},
        )
        return cls(config, path, _existing=True)

    def close(self) -> None:
        self._conn.close()

    # --- schema and ingestion ------------------------------------------------

    def _create_tables(self) -> None:
        with self._lock:
            for city in self.config.cities:
                slug = city_slug(city)
                for family in FAMILIES:
                    table = f"{family}_{slug}"
                    self._conn.execute(_CREATE_SQL[family].format(t=table))
            self._conn.execute("CREATE TABLE _meta (key TEXT PRIMARY KEY, value TEXT)")
            self._conn.execute(
                "INSERT INTO _meta VALUES ('config', ?)",
                (
                    json.dumps(
                        {
                            "cities": list(self.config.cities),
                            "poi_pairing_radius": self.config.poi_pairing_radius,
                            "community_pairing_radius": self.config.community_pairing_radius,
                            "fixture_seed": self.config.fixture_seed,
                            "poi_taxonomy": {
                                k: list(v) for k, v in self.config.poi_taxonomy.items()
                            },
                        },
                        sort_keys=True,
                    ),
                ),
            )
            self._conn.commit()

    def table_id(self, family: str, city: str) -> str:
        return f"{family}_{city_slug(city)}"

    def ingest_fixture(self, fixture_dir: str | Path) -> dict[str, int]:
        """Load community and POI CSVs for every configured city.

        Returns per-family row counts. A record violating the domain schema
        aborts ingestion with an :class:`IngestError` naming the record.
        """
        fixture_dir = Path(fixture_dir)
        counts = {"community": 0, "poi": 0}
        for city in self.config.cities:
            slug = city_slug(city)
            counts["community"] += self._ingest_communities(
                fixture_dir / f"communities_{slug}.csv", city
            )
            counts["poi"] += self._ingest_pois(fixture_dir / f"pois_{slug}.csv", city)
        return counts

    def _read_csv(self, path: Path, expected: Sequence[str]) -> list[dict[str, str]]:
        if not path.exists():
            raise IngestError(f"missing fixture file: {path}")
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != tuple(expected):
                raise IngestError(
                    f"{path.name}: header must be {','.join(expected)},"
                    f" got {reader.fieldnames}"
                )
            return list(reader)

    def _ingest_communities(self, path: Path, city: str) -> int:
        rows = self._read_csv(path, _COMMUNITY_COLUMNS)
        records = []
        seen_ids: set[str] = set()
        for raw in rows:
            try:
                community = Community(
                    id=raw["id"],
                    city=raw["city"],
                    name=raw["name"],
                    district=raw["district"],
                    address=raw["address"],
                    location=GeoPoint(float(raw["latitude"]), float(raw["longitude"])),
                    greening_rate=float(raw["greening_rate"]),
                    avg_price=float(raw["avg_price"]),
                    property_type=raw["property_type"],
                    sales_status=raw["sales_status"],
                )
            except (DomainError, ValueError) as exc:
                raise IngestError(f"{path.name}: record id={raw.get('id')}: {exc}") from exc
            if community.city != city:
                raise IngestError(f"{path.name}: record id={community.id}: city mismatch")
            if community.id in seen_ids:
                raise IngestError(f"{path.name}: duplicate id {community.id}")
            seen_ids.add(community.id)
            records.append(community)
        table = self.table_id("community", city)
        with self._lock:
            self._conn.executemany(
                f"INSERT INTO {table} VALUES (?,?,?,?,?,?,?,?,?,?,?)",
                [
                    (
                        c.id,
                        c.city,
                        c.name,
                        c.district,
                        c.address,
                        c.location.latitude,
                        c.location.longitude,
                        c.greening_rate,
                        c.avg_price,
                        c.property_type,
                        c.sales_status,
                    )
                    for c in records
                ],
            )
            self._conn.commit()
        return len(records)

    def _ingest_pois(self, path: Path, city: str) -> int:
        rows = self._read_csv(path, _POI_COLUMNS)
        records = []
        seen_ids: set[str] = set()
        for raw in rows:
            try:
                poi = Poi(
                    id=raw["id"],
                    city=raw["city"],
                    name=raw["name"],
                    category=raw["category"],
                    label=raw["label"],
                    location=GeoPoint(float(raw["latitude"]), float(raw["longitude"])),
                )
            except (DomainError, ValueError) as exc:
                raise IngestError(f"{path.name}: record id={raw.get('id')}: {exc}") from exc
            if self.config.label_category(poi.label) != poi.category:
                raise IngestError(
                    f"{path.name}: record id={poi.id}: label {poi.label!r} is not"
                    f" a {poi.category!r} label in the configured taxonomy"
                )
            if poi.id in seen_ids:
                raise IngestError(f"{path.name}: duplicate id {poi.id}")
            seen_ids.add(poi.id)
            records.append(poi)
        table = self.table_id("poi", city)
        with self._lock:
            self._conn.executemany(
                f"INSERT INTO {table} VALUES (?,?,?,?,?,?,?)",
                [
                    (
                        p.id,
                        p.city,
                        p.name,
                        p.category,
                        p.label,
                        p.location.latitude,
                        p.location.longitude,
                    )
                    for p in records
                ],
            )
            self._conn.commit()
        return len(records)

    # --- proximity pairs -------------------------------------------------------

    def build_proximity_pairs(self) -> dict[str, int]:
        """Populate the two pair families from scratch.

        poi_community holds each (POI, community) pair within the POI pairing
        radius; community_community holds community pairs within the community
        radius, stored in both directions.
        """
        counts = {"poi_community": 0, "community_community": 0}
        for city in self.config.cities:
            communities = self.communities(city)
            pois = self.pois(city)
            pc_table = self.table_id("poi_community", city)
            cc_table = self.table_id("community_community", city)
            pc_rows = []
            for poi in pois:
                for com in communities:
                    d = haversine(poi.location, com.location)
                    if d <= self.config.poi_pairing_radius:
                        pc_rows.append(
                            (poi.id, poi.name, poi.label, com.id, com.name, round(d, 1))
                        )
            cc_rows = []
            for i, a in enumerate(communities):
                for b in communities[i + 1 :]:
                    d = haversine(a.location, b.location)
                    if d <= self.config.community_pairing_radius:
                        rd = round(d, 1)
                        cc_rows.append((a.id, a.name, b.id, b.name, rd))
                        cc_rows.append((b.id, b.name, a.id, a.name, rd))
            with self._lock:
                self._conn.execute(f"DELETE FROM {pc_table}")
                self._conn.execute(f"DELETE FROM {cc_table}")
                self._conn.executemany(
                    f"INSERT INTO {pc_table} VALUES (?,?,?,?,?,?)", pc_rows
                )
                self._conn.executemany(
                    f"INSERT INTO {cc_table} VALUES (?,?,?,?,?)", cc_rows
                )
                self._conn.commit()
            counts["poi_community"] += len(pc_rows)
            counts["community_community"] += len(cc_rows)
        return counts

    # --- queries ----------------------------------------------------------------

    @staticmethod
    def _deny_writes(action: int, *_args: Any) -> int:
        allowed = (
            sqlite3.SQLITE_SELECT,
            sqlite3.SQLITE_READ,
            sqlite3.SQLITE_FUNCTION,
            31,  # SQLITE_SAVEPOINT, emitted for some read plans
        )
        return sqlite3.SQLITE_OK if action in allowed else sqlite3.SQLITE_DENY

    @staticmethod
    def _allow_all(_action: int, *_args: Any) -> int:
        # set_authorizer(None) only clears on Python >= 3.11; this is the
        # portable way to stand down after an untrusted statement
        return sqlite3.SQLITE_OK

    def execute_sql(self, statement: str) -> tuple[tuple[str, ...], list[tuple[Any, ...]]]:
        """Run one read-only statement; returns (column names, rows).

        Non-SELECT statements and engine failures raise
        :class:`SqlExecutionError` with the engine message, which downstream
        agents fold into their error reports.
        """
        if not _SELECT_RE.match(statement or ""):
            raise SqlExecutionError("only SELECT statements are allowed")
        with self._lock:
            self._conn.set_authorizer(self._deny_writes)
            try:
                cursor = self._conn.execute(statement)
                rows = [tuple(r) for r in cursor.fetchall()]
                columns = tuple(d[0] for d in cursor.description or ())
            except (sqlite3.Error, sqlite3.Warning) as exc:
                # Warning covers multi-statement input, which is not an Error
                raise SqlExecutionError(str(exc)) from exc
            finally:
                self._conn.set_authorizer(self._allow_all)
        return columns, rows

    def list_captions(self) -> list[TableCaption]:
        """Caption catalog in deterministic (city, family) order."""
        catalog = []
        for city in sorted(self.config.cities):
            for family in FAMILIES:
                catalog.append(
                    TableCaption(
                        table_id=self.table_id(family, city),
                        caption=_caption_text(family, city),
                        city=city,
                        family=family,
                        columns=_FAMILY_SCHEMAS[family],
                    )
                )
        return catalog

    def caption_for_table(self, table_id: str) -> TableCaption | None:
        for caption in self.list_captions():
            if caption.table_id == table_id:
                return caption
        return None

    # --- typed accessors (generator and provider plumbing) -----------------------

    def communities(self, city: str) -> list[Community]:
        table = self.table_id("community", city)
        _, rows = self.execute_sql(f"SELECT * FROM {table} ORDER BY id")
        return [
            Community(
                id=r[0],
                city=r[1],
                name=r[2],
                district=r[3],
                address=r[4],
                location=GeoPoint(r[5], r[6]),
                greening_rate=r[7],
                avg_price=r[8],
                property_type=r[9],
                sales_status=r[10],
            )
            for r in rows
        ]

    def pois(self, city: str) -> list[Poi]:
        table = self.table_id("poi", city)
        _, rows = self.execute_sql(f"SELECT * FROM {table} ORDER BY id")
        return [
            Poi(
                id=r[0],
                city=r[1],
                name=r[2],
                category=r[3],
                label=r[4],
                location=GeoPoint(r[5], r[6]),
            )
            for r in rows
        ]

    def all_pois(self) -> list[Poi]:
        out: list[Poi] = []
        for city in sorted(self.config.cities):
            out.extend(self.pois(city))
        return out

    def districts(self, city: str) -> list[str]:
        table = self.table_id("community", city)
        _, rows = self.execute_sql(
            f"SELECT DISTINCT district FROM {table} ORDER BY district"
        )
        return [r[0] for r in rows]


# Column-name conventions for pulling (entity name, coordinates) out of SQL
# results; detection is by name, never by type sniffing.
NAME_COLUMNS = ("name", "community_name", "poi_name", "subject_name", "neighbor_name")
LATITUDE_COLUMNS = ("latitude", "lat")
LONGITUDE_COLUMNS = ("longitude", "lon", "lng")


def extract_coordinates(
    columns: Sequence[str], rows: Sequence[Sequence[Any]]
) -> dict[str, GeoPoint]:
    """Map entity names to coordinates for rows carrying name/lat/lon columns."""
    lowered = [c.casefold() for c in columns]
    name_idx = next((lowered.index(c) for c in NAME_COLUMNS if c in lowered), None)
    lat_idx = next((lowered.index(c) for c in LATITUDE_COLUMNS if c in lowered), None)
    lon_idx = next((lowered.index(c) for c in LONGITUDE_COLUMNS if c in lowered), None)
    if name_idx is None or lat_idx is None or lon_idx is None:
        return {}
    out: dict[str, GeoPoint] = {}
    for row in rows:
        name, lat, lon = row[name_idx], row[lat_idx], row[lon_idx]
        if name is None or lat is None or lon is None:
            continue
        try:
            out[str(name)] = GeoPoint(float(lat), float(lon))
        except (DomainError, ValueError):
            continue
    return out
