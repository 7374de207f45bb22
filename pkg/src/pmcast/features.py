"""Leakage-safe scaling, chronological splits, and sliding-window sample tensors."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AllMissing, BadFractions, ConfigError
from .similarity import find_analogs

SPLIT_NAMES = ("train", "val", "test")
MET_BASE = ("ws", "wd", "temp")
MET_SINCOS = ("ws", "wd_sin", "wd_cos", "temp")

CACHE_MAGIC = b"PMSB"
CACHE_VERSION = 1


@dataclass
class ScalerParams:
    min: float
    max: float


def fit_scaler(values) -> ScalerParams:
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise AllMissing("cannot fit a scaler on an all-missing series")
    return ScalerParams(min=float(finite.min()), max=float(finite.max()))


def transform(p: ScalerParams, x):
    """(x - min) / (max - min); a degenerate fit (max = min) maps to 0."""
    if p.max == p.min:
        return np.asarray(x, dtype=np.float64) * 0.0  # keeps NaN cells NaN
    return (np.asarray(x, dtype=np.float64) - p.min) / (p.max - p.min)


def inverse(p: ScalerParams, z):
    return np.asarray(z, dtype=np.float64) * (p.max - p.min) + p.min


@dataclass
class Scalers:
    pm: dict                  # station id -> ScalerParams
    met: list                 # ScalerParams per aux column
    met_fields: tuple = MET_BASE

    def to_dict(self):
        return {
            "pm": {sid: [p.min, p.max] for sid, p in self.pm.items()},
            "met": [[p.min, p.max] for p in self.met],
            "met_fields": list(self.met_fields),
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            pm={sid: ScalerParams(*pair) for sid, pair in obj["pm"].items()},
            met=[ScalerParams(*pair) for pair in obj["met"]],
            met_fields=tuple(obj["met_fields"]),
        )


@dataclass
class SplitSpec:
    fractions: tuple
    n_hours: int
    positions: tuple        # hour positions where val and test begin
    boundaries: tuple       # the same two points as epoch-hour timestamps

    def region(self, name):
        n1, n2 = self.positions
        return {"train": (0, n1), "val": (n1, n2), "test": (n2, self.n_hours)}[name]

    def of_position(self, pos):
        n1, n2 = self.positions
        if pos < 0 or pos >= self.n_hours:
            return None
        if pos < n1:
            return "train"
        return "val" if pos < n2 else "test"


def chronological_split(panel, fractions) -> SplitSpec:
    """Contiguous train/val/test hour regions with floor rounding, remainder to test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise BadFractions(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions sum to {sum(fractions)}, not 1")
    n = panel.n_hours
    n1 = int(np.floor(n * fractions[0]))
    n2 = n1 + int(np.floor(n * fractions[1]))
    t0 = int(panel.index[0])
    return SplitSpec(
        fractions=fractions,
        n_hours=n,
        positions=(n1, n2),
        boundaries=(t0 + n1, t0 + n2),
    )


@dataclass
class Sample:
    target_station: str
    origin: int               # epoch-hour timestamp of the last input hour
    x: np.ndarray             # [M x tau] scaled pm, target row first then peers
    aux: np.ndarray           # [tau x d_aux] scaled met
    y: np.ndarray             # [Q] scaled targets at the configured leads
    analogs: list = field(default_factory=list)  # extra [M x tau] tensors

    def stacked_input(self):
        """All input rows for the model: the live tensor plus analog tensors."""
        if not self.analogs:
            return self.x
        return np.concatenate([self.x] + list(self.analogs), axis=0)


@dataclass
class BuildReport:
    emitted: dict = field(default_factory=dict)
    skipped_gap: int = 0
    skipped_split: int = 0
    skipped_analog: int = 0


def aux_matrix(panel, wd_sincos: bool = False):
    """Raw panel-wide aux columns; optionally encode wind direction as sin/cos."""
    if not wd_sincos:
        return panel.met.copy(), MET_BASE
    wd = np.deg2rad(panel.met[:, 1])
    cols = [panel.met[:, 0], np.sin(wd), np.cos(wd), panel.met[:, 2]]
    return np.stack(cols, axis=1), MET_SINCOS


def fit_panel_scalers(panel, split: SplitSpec, wd_sincos: bool = False) -> Scalers:
    """Min and max taken from training-region hours only."""
    n1 = split.positions[0]
    if n1 < 1:
        raise AllMissing("training region is empty; cannot fit scalers")
    pm = {s.id: fit_scaler(panel.pm25[row, :n1]) for row, s in enumerate(panel.stations)}
    aux, fields = aux_matrix(panel, wd_sincos)
    met = [fit_scaler(aux[:n1, k]) for k in range(aux.shape[1])]
    return Scalers(pm=pm, met=met, met_fields=fields)


def make_analog_source(panel, window: int, m: int, exclusion: int):
    """Analog retrieval over each target station's own panel series."""
    def source(target_row: int, origin_pos: int):
        return find_analogs(
            panel.pm25[target_row], origin_pos, window=window, m=m, exclusion=exclusion
        )
    return source


def build_samples(panel, peer_sets: dict, scalers: Scalers, tau: int, leads,
                  stride: int = 1, split: SplitSpec = None, analog_source=None,
                  wd_sincos: bool = False):
    """Sliding-window samples per target station, grouped by split.

    A sample at origin t covers input hours [t - tau + 1, t] for the target
    and its peers, the aux window, and targets at t + lead. It is emitted
    only when every one of those cells is present and every hour from the
    first input to the last target lies inside the split that contains the
    last target hour. With analogs enabled, the requested number of analog
    tensors must exist and be gap-free, otherwise the sample is skipped.
    """
    leads = [int(v) for v in leads]
    if tau < 1 or stride < 1 or not leads:
        raise ConfigError("need tau >= 1, stride >= 1, and at least one lead")
    if any(v < 1 for v in leads) or any(b <= a for a, b in zip(leads, leads[1:])):
        raise ConfigError(f"leads must be strictly increasing positive integers: {leads}")
    max_lead = leads[-1]
    n = panel.n_hours
    row_of = {s.id: r for r, s in enumerate(panel.stations)}

    pm_scaled = np.empty_like(panel.pm25)
    for sid, r in row_of.items():
        pm_scaled[r] = transform(scalers.pm[sid], panel.pm25[r])
    aux_raw, fields = aux_matrix(panel, wd_sincos)
    if fields != scalers.met_fields:
        raise ConfigError(
            f"scalers were fitted for aux columns {scalers.met_fields}, not {fields}"
        )
    aux_scaled = np.stack(
        [transform(scalers.met[k], aux_raw[:, k]) for k in range(aux_raw.shape[1])], axis=1
    )
    aux_ok = np.isfinite(aux_raw).all(axis=1)

    by_split = {name: [] for name in (SPLIT_NAMES if split else ("all",))}
    report = BuildReport(emitted={name: 0 for name in by_split})

    for target_id, peers in peer_sets.items():
        rows = [row_of[sid] for sid in peers.members]
        target_row = rows[0]
        hour_ok = np.isfinite(panel.pm25[rows]).all(axis=0) & aux_ok
        ok_cum = np.concatenate([[0], np.cumsum(hour_ok)])
        target_fin = np.isfinite(panel.pm25[target_row])

        for t in range(tau - 1, n - max_lead, stride):
            lo, last = t - tau + 1, t + max_lead
            if split is None:
                name = "all"
                region = (0, n)
            else:
                name = split.of_position(last)
                region = split.region(name)
                if lo < region[0] or last >= region[1]:
                    report.skipped_split += 1
                    continue
            window_ok = (ok_cum[t + 1] - ok_cum[lo]) == tau
            targets_ok = all(target_fin[t + v] for v in leads)
            if not (window_ok and targets_ok):
                report.skipped_gap += 1
                continue
            analogs = []
            if analog_source is not None:
                found = analog_source(target_row, t)
                tensors = [
                    pm_scaled[rows, end - tau + 1 : end + 1] for end, _ in found.analogs
                ]
                if found.truncated or any(np.isnan(a).any() for a in tensors):
                    report.skipped_analog += 1
                    continue
                analogs = [a.copy() for a in tensors]
            by_split[name].append(
                Sample(
                    target_station=target_id,
                    origin=int(panel.index[t]),
                    x=pm_scaled[rows, lo : t + 1].copy(),
                    aux=aux_scaled[lo : t + 1].copy(),
                    y=pm_scaled[target_row, [t + v for v in leads]].copy(),
                    analogs=analogs,
                )
            )
            report.emitted[name] += 1
    return by_split, report


# -- sample cache ----------------------------------------------------------------

def _dims(by_split):
    for samples in by_split.values():
        for s in samples:
            return s.x.shape[0], s.x.shape[1], len(s.y), len(s.analogs), s.aux.shape[1]
    raise ValueError("cannot write a cache with no samples")


def save_samples(by_split: dict, leads, path):
    """Binary cache: little-endian, magic + version header, fixed-size records."""
    m, tau, q, a, d_aux = _dims(by_split)
    station_ids = sorted({s.target_station for ss in by_split.values() for s in ss})
    sid_idx = {sid: i for i, sid in enumerate(station_ids)}
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<6I", CACHE_VERSION, m, tau, q, a, d_aux))
        fh.write(struct.pack("<I", len(leads)))
        fh.write(struct.pack(f"<{len(leads)}q", *leads))
        fh.write(struct.pack("<I", len(station_ids)))
        for sid in station_ids:
            raw = sid.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(by_split)))
        for name, samples in by_split.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", len(samples)))
        for samples in by_split.values():
            for s in samples:
                if s.x.shape != (m, tau) or len(s.analogs) != a:
                    raise ValueError("all cached samples must share one tensor shape")
                fh.write(struct.pack("<Iq", sid_idx[s.target_station], s.origin))
                fh.write(s.x.astype("<f8").tobytes())
                fh.write(s.aux.astype("<f8").tobytes())
                for tensor in s.analogs:
                    fh.write(tensor.astype("<f8").tobytes())
                fh.write(s.y.astype("<f8").tobytes())


def load_samples(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError("not a sample cache file")
    off = 4
    version, m, tau, q, a, d_aux = struct.unpack_from("<6I", data, off)
    off += 24
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    (n_leads,) = struct.unpack_from("<I", data, off)
    off += 4
    leads = list(struct.unpack_from(f"<{n_leads}q", data, off))
    off += 8 * n_leads
    (n_ids,) = struct.unpack_from("<I", data, off)
    off += 4
    station_ids = []
    for _ in range(n_ids):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        station_ids.append(data[off : off + ln].decode())
        off += ln
    (n_splits,) = struct.unpack_from("<I", data, off)
    off += 4
    counts = []
    for _ in range(n_splits):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode()
        off += ln
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        counts.append((name, count))

    def read_block(rows, cols):
        nonlocal off
        size = rows * cols * 8
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
        off += size
        return arr.reshape(rows, cols).copy()

    by_split = {}
    for name, count in counts:
        samples = []
        for _ in range(count):
            idx, origin = struct.unpack_from("<Iq", data, off)
            off += 12
            x = read_block(m, tau)
            aux = read_block(tau, d_aux)
            analogs = [read_block(m, tau) for _ in range(a)]
            y = read_block(1, q).ravel()
            samples.append(
                Sample(station_ids[idx], origin, x=x, aux=aux, y=y, analogs=analogs)
            )
        by_split[name] = samples
    return by_split, leads


def samples_to_json(by_split: dict, leads) -> str:
    """Readable dump of a sample set, for inspection rather than round-trips."""
    out = {"leads": list(leads), "splits": {}}
    for name, samples in by_split.items():
        out["splits"][name] = [
            {
                "target_station": s.target_station,
                "origin": s.origin,
                "x": s.x.tolist(),
                "aux": s.aux.tolist(),
                "analogs": [a.tolist() for a in s.analogs],
                "y": s.y.tolist(),
            }
            for s in samples
        ]
    return json.dumps(out, indent=2)
