"""DTW distances between station series, peer selection, and analog retrieval."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyRange,
    EmptySequence,
    GapInWindow,
    KTooLarge,
    MissingValue,
    UnknownTarget,
)


def dtw_distance(a, b) -> float:
    """Minimum summed |a_u - b_v| over monotone alignment paths.

    Standard O(|a|*|b|) dynamic program with moves down, right, and
    diagonal, evaluated one anti-diagonal at a time so each wavefront is a
    single vectorized update.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySequence("dtw_distance requires non-empty sequences")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MissingValue("dtw_distance input contains missing values")
    n, m = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i_lo = max(1, k - m)
        i_hi = min(n, k - 1)
        if i_lo > i_hi:
            continue
        i = np.arange(i_lo, i_hi + 1)
        j = k - i
        best = np.minimum(np.minimum(acc[i - 1, j], acc[i, j - 1]), acc[i - 1, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    return float(acc[n, m])


@dataclass
class SimilarityMatrix:
    station_ids: list
    d: np.ndarray  # [n x n], symmetric, zero diagonal

    def row(self, station_id):
        try:
            return self.d[self.station_ids.index(station_id)]
        except ValueError:
            raise UnknownTarget(station_id) from None


def _normalize_window(v):
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def pairwise_matrix(panel, window, normalize: bool = True) -> SimilarityMatrix:
    """DTW distance between every station pair over one shared hour window.

    `window` is (start, length) in panel hour positions. Every station must
    be gap-free across the window. Each series is min-max normalized within
    the window unless `normalize` is off; a constant window maps to zeros.
    """
    start, length = int(window[0]), int(window[1])
    if length < 1 or start < 0 or start + length > panel.n_hours:
        raise EmptyRange(
            f"window [{start}, {start + length}) outside panel of {panel.n_hours} hours"
        )
    n = len(panel.stations)
    series = []
    for row, meta in enumerate(panel.stations):
        v = panel.pm25[row, start : start + length]
        gaps = np.flatnonzero(np.isnan(v))
        if gaps.size:
            raise GapInWindow(meta.id, start + int(gaps[0]))
        series.append(_normalize_window(v) if normalize else v)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dtw_distance(series[i], series[j])
    return SimilarityMatrix(station_ids=[s.id for s in panel.stations], d=d)


@dataclass
class PeerSet:
    target: str
    members: list  # target first, then ascending DTW distance


def select_peers(sim: SimilarityMatrix, target: str, k: int) -> PeerSet:
    """Target plus its k-1 nearest stations; ties broken by id, ascending."""
    if target not in sim.station_ids:
        raise UnknownTarget(target)
    n = len(sim.station_ids)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} outside [1, {n}]")
    t = sim.station_ids.index(target)
    others = sorted(
        (sid for sid in sim.station_ids if sid != target),
        key=lambda sid: (sim.d[t, sim.station_ids.index(sid)], sid),
    )
    return PeerSet(target=target, members=[target] + others[: k - 1])


@dataclass
class AnalogSet:
    query_origin: int
    analogs: list = field(default_factory=list)  # (origin, distance), ascending distance
    truncated: bool = False  # fewer candidates existed than were requested


def find_analogs(series, query_origin: int, window: int, m: int = 4,
                 exclusion: int = 0) -> AnalogSet:
    """The m past windows of a series most DTW-similar to the query window.

    The query window is series[query_origin - window + 1 .. query_origin].
    Candidate windows end at or before query_origin - window - exclusion,
    so no candidate overlaps the query window or the exclusion buffer
    before it. Candidates containing missing values are skipped. When
    fewer than m gap-free candidates exist the result is marked truncated.
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    if window < 1:
        raise EmptyRange(f"window must be >= 1, got {window}")
    q_start = query_origin - window + 1
    if q_start < 0 or query_origin >= len(series):
        raise EmptyRange(
            f"query window [{q_start}, {query_origin}] outside series of {len(series)}"
        )
    query = series[q_start : query_origin + 1]
    gaps = np.flatnonzero(np.isnan(query))
    if gaps.size:
        raise GapInWindow("query", q_start + int(gaps[0]))

    result = AnalogSet(query_origin=query_origin)
    if m == 0:
        return result
    last_end = query_origin - window - exclusion
    scored = []
    for end in range(window - 1, last_end + 1):
        candidate = series[end - window + 1 : end + 1]
        if np.isnan(candidate).any():
            continue
        scored.append((dtw_distance(query, candidate), end))
    scored.sort()
    result.analogs = [(end, dist) for dist, end in scored[:m]]
    result.truncated = len(result.analogs) < m
    return result


def common_gap_free_window(panel, max_len: int, end: int) -> tuple:
    """Latest window before hour position `end` where every station is gap-free.

    Scans backward for the most recent hour valid across all stations, then
    extends the run leftward up to max_len hours. Returns (start, length).
    """
    valid = np.isfinite(panel.pm25[:, :end]).all(axis=0)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise EmptyRange(f"no hour before position {end} is gap-free at every station")
    stop = int(idx[-1])
    start = stop
    while start > 0 and valid[start - 1] and stop - start + 1 < max_len:
        start -= 1
    return start, stop - start + 1


# -- serialization --------------------------------------------------------------

def matrix_to_csv(sim: SimilarityMatrix) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["id"] + sim.station_ids)
    for i, sid in enumerate(sim.station_ids):
        writer.writerow([sid] + [repr(float(x)) for x in sim.d[i]])
    return out.getvalue()


def matrix_from_csv(text: str) -> SimilarityMatrix:
    reader = csv.reader(io.StringIO(text))
    ids = next(reader)[1:]
    d = np.zeros((len(ids), len(ids)))
    for i, row in enumerate(reader):
        d[i] = [float(x) for x in row[1:]]
    return SimilarityMatrix(station_ids=ids, d=d)


def matrix_to_json(sim: SimilarityMatrix) -> str:
    return json.dumps(
        {"station_ids": sim.station_ids, "d": [[float(x) for x in row] for row in sim.d]},
        indent=2,
    )


def matrix_from_json(text: str) -> SimilarityMatrix:
    obj = json.loads(text)
    return SimilarityMatrix(
        station_ids=list(obj["station_ids"]), d=np.asarray(obj["d"], dtype=np.float64)
    )
