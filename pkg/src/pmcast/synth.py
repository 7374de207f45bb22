"""Deterministic multi-station panel generator with known structure.

Each station's series is base + diurnal sinusoid + a coupled AR(1) regional
component + station noise, clamped at zero. Gaps are injected afterwards, so
the pre-gap series survives as ground truth for recovery checks. Meteorology
follows the usual field shapes: near-normal temperature with a diurnal swing,
right-skewed (log-normal) wind speed, and bimodal wind direction.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .ingest import HourlyPanel, StationMeta, hour_to_iso
from .rng import generator

CSV_HEADER = ("timestamp", "pm25", "ws", "wd", "temp")


def _per_station(value, n, name):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)).copy()
    if not np.isfinite(arr).all():
        raise ConfigError(f"{name} must be finite")
    return arr


@dataclass
class SynthSpec:
    n_stations: int = 6
    n_hours: int = 2000
    seed: int = 0
    base: float = 28.0              # scalar or one value per station
    amplitude: float = 8.0          # diurnal amplitude, scalar or per station
    phase: float = 0.0              # diurnal phase in radians, scalar or per station
    period: float = 24.0
    ar_coef: float = 0.9
    ar_noise: float = 3.0
    coupling: list = None           # row-stochastic [n x n]; None = all-shared
    station_noise: float = 1.0      # scalar or per station
    gap_rate: float = 0.0           # per-hour chance of starting an injected gap
    gap_max: int = 3
    start_hour: int = 400000
    temp_mean: float = 12.0
    temp_amp: float = 6.0
    temp_noise: float = 1.5
    ws_log_mean: float = 0.7        # log-normal parameters for wind speed
    ws_log_sigma: float = 0.5
    wd_modes: tuple = (90.0, 270.0)
    wd_spread: float = 25.0

    def validate(self):
        if self.n_stations < 1 or self.n_hours < 2:
            raise ConfigError("need n_stations >= 1 and n_hours >= 2")
        if not -1.0 < self.ar_coef < 1.0:
            raise ConfigError(f"ar_coef must lie in (-1, 1), got {self.ar_coef}")
        if self.ar_noise < 0 or self.temp_noise < 0 or self.wd_spread < 0:
            raise ConfigError("noise scales must be >= 0")
        if np.any(_per_station(self.station_noise, self.n_stations, "station_noise") < 0):
            raise ConfigError("station_noise must be >= 0")
        if not 0.0 <= self.gap_rate < 1.0:
            raise ConfigError(f"gap_rate must lie in [0, 1), got {self.gap_rate}")
        if self.gap_max < 1:
            raise ConfigError("gap_max must be >= 1")
        if self.period <= 0:
            raise ConfigError("period must be positive")
        if len(self.wd_modes) != 2:
            raise ConfigError("wd_modes needs exactly two directions")
        c = self.coupling_matrix()
        if c.shape != (self.n_stations, self.n_stations):
            raise ConfigError(
                f"coupling must be {self.n_stations}x{self.n_stations}, got {c.shape}"
            )
        if np.any(c < 0) or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("coupling rows must be nonnegative and sum to 1")
        return self

    def coupling_matrix(self):
        if self.coupling is None:
            return np.full((self.n_stations, self.n_stations), 1.0 / self.n_stations)
        return np.asarray(self.coupling, dtype=np.float64)

    def to_dict(self):
        out = dict(vars(self))
        out["wd_modes"] = list(self.wd_modes)
        if out["coupling"] is not None:
            out["coupling"] = np.asarray(out["coupling"], dtype=np.float64).tolist()
        for key in ("base", "amplitude", "phase", "station_noise"):
            if isinstance(out[key], np.ndarray):
                out[key] = out[key].tolist()
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "wd_modes" in obj:
            obj["wd_modes"] = tuple(obj["wd_modes"])
        return cls(**obj).validate()


@dataclass
class SynthTruth:
    """Everything the generator knew that the emitted panel hides."""

    pm25: np.ndarray            # [n_st x n_hours] clamped series before gaps
    latents: np.ndarray         # [n_st x n_hours] AR(1) processes before mixing
    gaps: list = field(default_factory=list)   # (station_id, start_pos, length)
    clamp_count: int = 0


def _inject_gaps(pm, spec: SynthSpec, station_ids):
    """Blank non-adjacent runs so each injected gap stays one maximal run."""
    gaps = []
    for i, sid in enumerate(station_ids):
        g = generator(spec.seed, "synth", "gaps", i)
        starts = g.random(spec.n_hours)
        lengths = g.integers(1, spec.gap_max + 1, size=spec.n_hours)
        t = 0
        while t < spec.n_hours:
            if starts[t] < spec.gap_rate:
                run = int(min(lengths[t], spec.n_hours - t))
                pm[i, t : t + run] = np.nan
                gaps.append((sid, t, run))
                t += run + 1     # leave a clean hour so runs never merge
            else:
                t += 1
    return gaps


def generate(spec: SynthSpec):
    """Build one panel plus its ground truth; fully deterministic given seed."""
    spec.validate()
    n, h = spec.n_stations, spec.n_hours
    base = _per_station(spec.base, n, "base")
    amp = _per_station(spec.amplitude, n, "amplitude")
    phase = _per_station(spec.phase, n, "phase")
    noise_scale = _per_station(spec.station_noise, n, "station_noise")

    t = np.arange(h, dtype=np.float64)
    diurnal = amp[:, None] * np.sin(2 * np.pi * t[None, :] / spec.period + phase[:, None])

    regional = generator(spec.seed, "synth", "regional")
    latents = np.zeros((n, h))
    if spec.ar_coef != 0.0 or spec.ar_noise != 0.0:
        stationary = spec.ar_noise / np.sqrt(1.0 - spec.ar_coef**2)
        latents[:, 0] = regional.normal(0.0, 1.0, size=n) * stationary
        eps = regional.normal(0.0, spec.ar_noise, size=(n, h))
        for k in range(1, h):
            latents[:, k] = spec.ar_coef * latents[:, k - 1] + eps[:, k]
    mixed = spec.coupling_matrix() @ latents

    station = generator(spec.seed, "synth", "station")
    noise = station.normal(0.0, 1.0, size=(n, h)) * noise_scale[:, None]

    pm = base[:, None] + diurnal + mixed + noise
    below = pm < 0.0
    clamp_count = int(below.sum())
    pm[below] = 0.0
    truth_pm = pm.copy()

    station_ids = [f"s{i:02d}" for i in range(n)]
    gaps = _inject_gaps(pm, spec, station_ids) if spec.gap_rate > 0 else []

    met_rng = generator(spec.seed, "synth", "met")
    temp = (
        spec.temp_mean
        + spec.temp_amp * np.sin(2 * np.pi * t / spec.period)
        + met_rng.normal(0.0, spec.temp_noise, size=h)
    )
    ws = met_rng.lognormal(spec.ws_log_mean, spec.ws_log_sigma, size=h)
    pick = met_rng.random(h) < 0.5
    modes = np.where(pick, spec.wd_modes[0], spec.wd_modes[1])
    wd = np.mod(modes + met_rng.normal(0.0, spec.wd_spread, size=h), 360.0)

    panel = HourlyPanel(
        stations=[StationMeta(id=sid) for sid in station_ids],
        index=np.arange(spec.start_hour, spec.start_hour + h, dtype=np.int64),
        pm25=pm,
        met=np.stack([ws, wd, temp], axis=1),
    )
    return panel, SynthTruth(
        pm25=truth_pm, latents=latents, gaps=gaps, clamp_count=clamp_count
    )


def _fmt(x) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_station_csvs(panel: HourlyPanel, out_dir) -> list:
    """One CSV per station in the format the ingest parser consumes."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for row, meta in enumerate(panel.stations):
        path = os.path.join(out_dir, f"{meta.id}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for k in range(panel.n_hours):
                writer.writerow(
                    [
                        hour_to_iso(panel.index[k]),
                        _fmt(panel.pm25[row, k]),
                        _fmt(panel.met[k, 0]),
                        _fmt(panel.met[k, 1]),
                        _fmt(panel.met[k, 2]),
                    ]
                )
        paths.append(path)
    return paths


def write_truth(spec: SynthSpec, truth: SynthTruth, path):
    """Sidecar JSON: spec, clamp count, and every injected gap with true values."""
    station_rows = {f"s{i:02d}": i for i in range(truth.pm25.shape[0])}
    gaps = [
        {
            "station": sid,
            "start": start,
            "length": length,
            "values": truth.pm25[station_rows[sid], start : start + length].tolist(),
        }
        for sid, start, length in truth.gaps
    ]
    with open(path, "w") as fh:
        json.dump(
            {
                "spec": spec.to_dict(),
                "clamp_count": truth.clamp_count,
                "gaps": gaps,
            },
            fh,
            indent=2,
        )
