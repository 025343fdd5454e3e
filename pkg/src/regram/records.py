"""Raw transaction records and their CSV wire format.

Column layout (UTF-8, comma separated, header row required)::

    id, city, latitude, longitude, trade_date (YYYY-MM-DD),
    completion_date (YYYY-MM), building_type, main_purpose,
    small_house_flag, shop_flag, first_floor_flag (0/1), land_usage,
    house_age, unit_price,
    obj_<name>...      numeric object fields (house area, rooms, floor, ...)
    poi_n_<name>...    PoI counts within a fixed radius
    poi_d_<name>...    minimum distance in meters to a PoI category

The three prefixed groups are open-ended; :meth:`Schema.from_header` discovers
them from the header.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from datetime import date
from typing import BinaryIO, Iterable, Mapping

from .errors import ParseError, SchemaError

CORE_COLUMNS = (
    "id",
    "city",
    "latitude",
    "longitude",
    "trade_date",
    "completion_date",
    "building_type",
    "main_purpose",
    "small_house_flag",
    "shop_flag",
    "first_floor_flag",
    "land_usage",
    "house_age",
    "unit_price",
)
OBJ_PREFIX = "obj_"
POI_COUNT_PREFIX = "poi_n_"
POI_DIST_PREFIX = "poi_d_"


@dataclass(frozen=True)
class TransactionRecord:
    id: str
    city: str
    latitude: float
    longitude: float
    trade_date: date
    completion_date: date  # always the first day of the completion month
    building_type: str
    main_purpose: str
    small_house_flag: bool
    shop_flag: bool
    first_floor_flag: bool
    land_usage: str
    house_age: float
    unit_price: float
    object_fields: Mapping[str, float] = field(default_factory=dict)
    poi_counts: Mapping[str, float] = field(default_factory=dict)
    poi_min_dist: Mapping[str, float] = field(default_factory=dict)

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.small_house_flag, self.shop_flag, self.first_floor_flag)

    @property
    def trade_month(self) -> tuple[int, int]:
        return (self.trade_date.year, self.trade_date.month)

    @property
    def completion_month(self) -> tuple[int, int]:
        return (self.completion_date.year, self.completion_date.month)

    def validate(self) -> None:
        """Raise ValueError naming the first violated invariant."""
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError("latitude out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError("longitude out of range")
        if not self.unit_price > 0:
            raise ValueError("unit_price must be > 0")
        if not self.house_age >= 0:
            raise ValueError("house_age must be >= 0")
        for k, v in self.poi_min_dist.items():
            if not v >= 0:
                raise ValueError(f"poi_d_{k} must be >= 0")
        if self.completion_month > self.trade_month:
            raise ValueError("completion_date after trade_date")


@dataclass(frozen=True)
class Schema:
    """Names of the open-ended column groups, without their prefixes."""

    object_fields: tuple[str, ...] = ()
    poi_count_fields: tuple[str, ...] = ()
    poi_dist_fields: tuple[str, ...] = ()

    @classmethod
    def from_header(cls, header: Iterable[str]) -> "Schema":
        obj, cnt, dist = [], [], []
        for col in header:
            if col.startswith(OBJ_PREFIX):
                obj.append(col[len(OBJ_PREFIX):])
            elif col.startswith(POI_COUNT_PREFIX):
                cnt.append(col[len(POI_COUNT_PREFIX):])
            elif col.startswith(POI_DIST_PREFIX):
                dist.append(col[len(POI_DIST_PREFIX):])
        return cls(tuple(obj), tuple(cnt), tuple(dist))

    def columns(self) -> list[str]:
        return (
            list(CORE_COLUMNS)
            + [OBJ_PREFIX + n for n in self.object_fields]
            + [POI_COUNT_PREFIX + n for n in self.poi_count_fields]
            + [POI_DIST_PREFIX + n for n in self.poi_dist_fields]
        )


def _parse_float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {s!r}")
    return v


def _parse_bool(s: str) -> bool:
    if s == "1":
        return True
    if s == "0":
        return False
    raise ValueError(f"expected 0 or 1, got {s!r}")


def _parse_month(s: str) -> date:
    year, month = s.split("-")
    if len(year) != 4 or len(month) != 2:
        raise ValueError(f"expected YYYY-MM, got {s!r}")
    return date(int(year), int(month), 1)


def _row_to_record(row: dict[str, str], schema: Schema, line: int) -> TransactionRecord:
    def get(col, conv):
        try:
            return conv(row[col].strip())
        except (ValueError, TypeError) as exc:
            raise ParseError(f"line {line}: field {col!r}: {exc}", line=line, field=col) from None

    rec = TransactionRecord(
        id=get("id", _nonempty),
        city=get("city", _nonempty),
        latitude=get("latitude", _parse_float),
        longitude=get("longitude", _parse_float),
        trade_date=get("trade_date", date.fromisoformat),
        completion_date=get("completion_date", _parse_month),
        building_type=get("building_type", _nonempty),
        main_purpose=get("main_purpose", _nonempty),
        small_house_flag=get("small_house_flag", _parse_bool),
        shop_flag=get("shop_flag", _parse_bool),
        first_floor_flag=get("first_floor_flag", _parse_bool),
        land_usage=get("land_usage", _nonempty),
        house_age=get("house_age", _parse_float),
        unit_price=get("unit_price", _parse_float),
        object_fields={n: get(OBJ_PREFIX + n, _parse_float) for n in schema.object_fields},
        poi_counts={n: get(POI_COUNT_PREFIX + n, _parse_float) for n in schema.poi_count_fields},
        poi_min_dist={n: get(POI_DIST_PREFIX + n, _parse_float) for n in schema.poi_dist_fields},
    )
    try:
        rec.validate()
    except ValueError as exc:
        msg = str(exc)
        col = msg.split()[0]  # validate() messages lead with the column name
        raise ParseError(f"line {line}: field {col!r}: {msg}", line=line, field=col) from None
    return rec


def _nonempty(s: str) -> str:
    if not s:
        raise ValueError("empty value")
    return s


def parse_transactions(source: bytes | str | BinaryIO, schema: Schema | None = None) -> list[TransactionRecord]:
    """Parse CSV bytes (or a binary stream) into records.

    When ``schema`` is omitted it is inferred from the header. Any row that
    fails to parse or violates a record invariant raises :class:`ParseError`
    carrying the 1-based file line number and the offending column.
    """
    if isinstance(source, str):
        raise TypeError("pass bytes or a binary stream; use read_transactions() for paths")
    raw = source if isinstance(source, bytes) else source.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not UTF-8: {exc}", line=0) from None
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("missing header row") from None
    except csv.Error as exc:
        raise ParseError(f"line 1: {exc}", line=1) from None
    header = [h.strip() for h in header]
    if schema is None:
        schema = Schema.from_header(header)
    missing = [c for c in schema.columns() if c not in header]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")

    records = []
    seen: set[str] = set()
    while True:
        try:
            cells = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            raise ParseError(f"line {reader.line_num}: {exc}", line=reader.line_num) from None
        line = reader.line_num
        if not cells:
            continue
        if len(cells) != len(header):
            raise ParseError(
                f"line {line}: expected {len(header)} fields, got {len(cells)}", line=line
            )
        rec = _row_to_record(dict(zip(header, cells)), schema, line)
        if rec.id in seen:
            raise ParseError(f"line {line}: field 'id': duplicate id {rec.id!r}", line=line, field="id")
        seen.add(rec.id)
        records.append(rec)
    return records


def read_transactions(path: str | os.PathLike, schema: Schema | None = None) -> list[TransactionRecord]:
    with open(path, "rb") as fh:
        return parse_transactions(fh, schema)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_transactions(records: Iterable[TransactionRecord], fh, schema: Schema | None = None) -> None:
    """Write records to a text stream in the wire format (``\\n`` line endings)."""
    records = list(records)
    if schema is None:
        if not records:
            schema = Schema()
        else:
            r0 = records[0]
            schema = Schema(tuple(r0.object_fields), tuple(r0.poi_counts), tuple(r0.poi_min_dist))
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(schema.columns())
    for r in records:
        w.writerow(
            [
                r.id,
                r.city,
                _fmt(r.latitude),
                _fmt(r.longitude),
                r.trade_date.isoformat(),
                f"{r.completion_date.year:04d}-{r.completion_date.month:02d}",
                r.building_type,
                r.main_purpose,
                int(r.small_house_flag),
                int(r.shop_flag),
                int(r.first_floor_flag),
                r.land_usage,
                _fmt(r.house_age),
                _fmt(r.unit_price),
            ]
            + [_fmt(r.object_fields[n]) for n in schema.object_fields]
            + [_fmt(r.poi_counts[n]) for n in schema.poi_count_fields]
            + [_fmt(r.poi_min_dist[n]) for n in schema.poi_dist_fields]
        )
