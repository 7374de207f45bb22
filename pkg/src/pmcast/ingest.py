"""Station CSV parsing, hourly alignment, gap imputation, and quality filtering."""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import (
    AllStationsExcluded,
    BadTimestamp,
    EmptyFile,
    EmptyRange,
    MissingColumn,
    NoStations,
)

log = logging.getLogger(__name__)

MET_FIELDS = ("ws", "wd", "temp")

DEFAULT_SCHEMA = {"timestamp": "timestamp", "pm25": "pm25", "ws": "ws", "wd": "wd", "temp": "temp"}


@dataclass
class StationMeta:
    id: str
    name: str = ""
    missing_fraction: float = 0.0
    included: bool = True


@dataclass
class StationSeries:
    """Raw per-station records: parallel arrays indexed by row."""

    ts: np.ndarray          # int64 epoch hours
    pm25: np.ndarray        # float64, NaN = missing
    met: np.ndarray         # float64 [n x 3] (ws, wd, temp), NaN = missing


@dataclass
class ParseReport:
    rows: int = 0
    bad_numeric_cells: int = 0
    negative_pm25: int = 0


@dataclass
class HourlyPanel:
    """All stations on one strictly hourly index, plus the shared met series."""

    stations: list            # list[StationMeta], row order of pm25
    index: np.ndarray         # int64 epoch hours, stride exactly 1
    pm25: np.ndarray          # float64 [n_stations x n_hours]
    met: np.ndarray           # float64 [n_hours x 3]
    excluded: list = field(default_factory=list)

    @property
    def n_hours(self):
        return len(self.index)

    def station_ids(self):
        return [s.id for s in self.stations]

    def station_row(self, station_id):
        for i, s in enumerate(self.stations):
            if s.id == station_id:
                return i
        raise KeyError(station_id)


def _parse_ts(value, row_idx):
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise BadTimestamp(row_idx, value) from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() // 3600)


def parse_station_csv(data: bytes, schema=None) -> tuple[StationSeries, ParseReport]:
    """Parse one station's CSV into per-row records.

    Required columns (after schema remapping): timestamp (ISO 8601) and
    pm25; ws/wd/temp are optional. Unparseable numeric cells become NaN and
    are counted; negative pm25 readings are treated as sensor errors and
    dropped to NaN.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    text = data.decode("utf-8-sig")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyFile("no header row") from None
    header = [h.strip() for h in header]
    col = {}
    for canon in ("timestamp", "pm25") + MET_FIELDS:
        name = schema[canon]
        if name in header:
            col[canon] = header.index(name)
    for required in ("timestamp", "pm25"):
        if required not in col:
            raise MissingColumn(schema[required])

    report = ParseReport()
    ts_list, pm_list, met_list = [], [], []
    for row_idx, row in enumerate(reader):
        if not row or all(not c.strip() for c in row):
            continue
        ts = _parse_ts(row[col["timestamp"]], row_idx)

        def cell(canon):
            if canon not in col or col[canon] >= len(row):
                return np.nan
            raw = row[col[canon]].strip()
            if raw == "":
                return np.nan
            try:
                return float(raw)
            except ValueError:
                report.bad_numeric_cells += 1
                return np.nan

        pm = cell("pm25")
        if pm < 0:  # NaN compares False, so this only hits real negatives
            report.negative_pm25 += 1
            pm = np.nan
        met = [cell(f) for f in MET_FIELDS]
        if np.isfinite(met[1]):
            met[1] = met[1] % 360.0
        ts_list.append(ts)
        pm_list.append(pm)
        met_list.append(met)
        report.rows += 1

    if report.negative_pm25:
        log.warning("dropped %d negative pm25 readings", report.negative_pm25)
    return (
        StationSeries(
            ts=np.asarray(ts_list, dtype=np.int64),
            pm25=np.asarray(pm_list, dtype=np.float64),
            met=np.asarray(met_list, dtype=np.float64).reshape(report.rows, 3),
        ),
        report,
    )


def align_panel(per_station: dict, t_range: tuple) -> HourlyPanel:
    """Reindex every station onto the common hourly grid [t_start, t_end].

    Hours without a record become missing. Duplicate timestamps within a
    station keep the last record (logged). Met is panel-wide: later
    stations' non-missing met values override earlier ones per hour.
    """
    if not per_station:
        raise NoStations("align_panel needs at least one station")
    t_start, t_end = int(t_range[0]), int(t_range[1])
    if t_start >= t_end:
        raise EmptyRange(f"invalid hour range [{t_start}, {t_end}]")

    index = np.arange(t_start, t_end + 1, dtype=np.int64)
    n_hours = len(index)
    pm25 = np.full((len(per_station), n_hours), np.nan)
    met = np.full((n_hours, 3), np.nan)
    metas = []

    for row, (sid, series) in enumerate(per_station.items()):
        n_dup = len(series.ts) - len(np.unique(series.ts))
        if n_dup > 0:
            log.warning("station %s: %d duplicate timestamps, keeping last record", sid, n_dup)
        in_range = (series.ts >= t_start) & (series.ts <= t_end)
        pos = (series.ts[in_range] - t_start).astype(np.intp)
        pm25[row, pos] = series.pm25[in_range]  # assignment order = file order, last wins
        station_met = series.met[in_range]
        for k in range(3):
            finite = np.isfinite(station_met[:, k])
            met[pos[finite], k] = station_met[finite, k]
        frac = float(np.isnan(pm25[row]).mean())
        metas.append(StationMeta(id=sid, name=sid, missing_fraction=frac))

    return HourlyPanel(stations=metas, index=index, pm25=pm25, met=met)


@dataclass
class ImputationReport:
    stations: dict = field(default_factory=dict)
    met: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"stations": self.stations, "met": self.met}, indent=2, sort_keys=True)


def _impute_series(values, max_gap):
    """Fill missing runs of length <= max_gap; longer runs stay missing.

    Runs with a preceding value are forward-filled from it; a leading run
    (no left donor) is backward-filled from the following value.
    """
    out = values.copy()
    isna = np.isnan(values)
    n = len(values)
    filled_forward = filled_backward = 0
    i = 0
    while i < n:
        if not isna[i]:
            i += 1
            continue
        j = i
        while j < n and isna[j]:
            j += 1
        run = j - i
        if run <= max_gap:
            if i > 0:
                out[i:j] = values[i - 1]
                filled_forward += run
            elif j < n:
                out[i:j] = values[j]
                filled_backward += run
        i = j
    left_missing = int(np.isnan(out).sum())
    return out, {
        "filled_forward": filled_forward,
        "filled_backward": filled_backward,
        "left_missing": left_missing,
    }


def impute_gaps(panel: HourlyPanel, max_gap: int) -> tuple[HourlyPanel, ImputationReport]:
    """Two-tier imputation on every pm25 row and met column, independently."""
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    report = ImputationReport()
    pm25 = panel.pm25.copy()
    for row, meta in enumerate(panel.stations):
        pm25[row], report.stations[meta.id] = _impute_series(panel.pm25[row], max_gap)
    met = panel.met.copy()
    for k, name in enumerate(MET_FIELDS):
        met[:, k], report.met[name] = _impute_series(panel.met[:, k], max_gap)
    imputed = HourlyPanel(
        stations=[StationMeta(**vars(s)) for s in panel.stations],
        index=panel.index,
        pm25=pm25,
        met=met,
        excluded=list(panel.excluded),
    )
    return imputed, report


def filter_stations(panel: HourlyPanel, max_missing_frac: float) -> HourlyPanel:
    """Drop stations whose pre-imputation missing fraction exceeds the threshold."""
    if not 0.0 <= max_missing_frac <= 1.0:
        raise ValueError("max_missing_frac must be in [0, 1]")
    keep, excluded = [], list(panel.excluded)
    for row, meta in enumerate(panel.stations):
        included = meta.missing_fraction <= max_missing_frac
        updated = StationMeta(meta.id, meta.name, meta.missing_fraction, included)
        if included:
            keep.append((row, updated))
        else:
            log.warning(
                "excluding station %s: %.1f%% missing > %.1f%% threshold",
                meta.id, 100 * meta.missing_fraction, 100 * max_missing_frac,
            )
            excluded.append(updated)
    if not keep:
        raise AllStationsExcluded(f"no station has missing fraction <= {max_missing_frac}")
    rows = [r for r, _ in keep]
    return HourlyPanel(
        stations=[m for _, m in keep],
        index=panel.index,
        pm25=panel.pm25[rows],
        met=panel.met,
        excluded=excluded,
    )


# -- panel file round-trip ------------------------------------------------------

def hour_to_iso(hour: int) -> str:
    return datetime.fromtimestamp(int(hour) * 3600, tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


def _fmt(x):
    return "" if not np.isfinite(x) else repr(float(x))


def save_panel(panel: HourlyPanel, csv_path, meta_path):
    """Wide CSV (one pm25__<id> column per station + shared met) plus JSON metadata."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["timestamp"] + [f"pm25__{s.id}" for s in panel.stations] + list(MET_FIELDS)
        )
        for t in range(panel.n_hours):
            row = [hour_to_iso(panel.index[t])]
            row += [_fmt(panel.pm25[s, t]) for s in range(len(panel.stations))]
            row += [_fmt(panel.met[t, k]) for k in range(3)]
            writer.writerow(row)
    meta = {
        "stations": [vars(s) for s in panel.stations],
        "excluded": [vars(s) for s in panel.excluded],
        "t_start": int(panel.index[0]),
        "t_end": int(panel.index[-1]),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_panel(csv_path, meta_path) -> HourlyPanel:
    with open(meta_path) as fh:
        meta = json.load(fh)
    stations = [StationMeta(**s) for s in meta["stations"]]
    excluded = [StationMeta(**s) for s in meta["excluded"]]
    index = np.arange(meta["t_start"], meta["t_end"] + 1, dtype=np.int64)
    n_hours = len(index)
    pm25 = np.full((len(stations), n_hours), np.nan)
    met = np.full((n_hours, 3), np.nan)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for t, row in enumerate(reader):
            for s in range(len(stations)):
                if row[1 + s] != "":
                    pm25[s, t] = float(row[1 + s])
            for k in range(3):
                cell = row[1 + len(stations) + k]
                if cell != "":
                    met[t, k] = float(cell)
    return HourlyPanel(stations=stations, index=index, pm25=pm25, met=met, excluded=excluded)
