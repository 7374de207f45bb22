"""Forecast scoring: error metrics, stratified reports, persistence baseline."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    InsufficientData,
    LengthMismatch,
    MissingOrigin,
    TooFewForR2,
    UnknownTarget,
)
from .features import build_samples, inverse, make_analog_source
from .model import Forecast, forward_batch
from .rng import derived_seed
from .training import train

ALL = "all"
STRATA = ("low", "medium", "high")
TERCILES = (1.0 / 3.0, 2.0 / 3.0)
CSV_HEADER = "station,lead,mae,rmse,r2,n,stratum"


def metrics(pred, obs):
    """MAE, RMSE, and R2 over paired prediction and observation vectors.

    R2 is 1 - SS_res / SS_tot with SS_tot taken around the observed mean.
    Constant observations leave the denominator at zero, so R2 comes back
    as None rather than a number.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.size != obs.size:
        raise LengthMismatch(f"pred has {pred.size} values, obs has {obs.size}")
    if obs.size < 2:
        raise TooFewForR2(f"need at least 2 pairs for R2, got {obs.size}")
    err = pred - obs
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(err**2)) / ss_tot
    return mae, rmse, r2


def stratify(obs, quantiles: tuple = TERCILES):
    """Label each observation low, medium, or high by empirical quantiles.

    Returns (labels, (t_low, t_high)); values at or below a cut point fall
    into the lower band. Degenerate distributions can leave bands empty.
    """
    lo_q, hi_q = quantiles
    if not 0.0 < lo_q < hi_q < 1.0:
        raise ConfigError(f"quantiles must satisfy 0 < low < high < 1: {quantiles}")
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if obs.size == 0:
        raise LengthMismatch("cannot stratify an empty vector")
    t_low = float(np.quantile(obs, lo_q))
    t_high = float(np.quantile(obs, hi_q))
    labels = np.where(obs <= t_low, "low", np.where(obs <= t_high, "medium", "high"))
    return labels, (t_low, t_high)


def _stats(pred, obs):
    """Per-cell stats; unlike metrics() this tolerates single-pair cells."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    err = pred - obs
    out = {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "r2": None,
        "n": int(obs.size),
    }
    if obs.size >= 2:
        ss_tot = float(np.sum((obs - obs.mean()) ** 2))
        if ss_tot > 0.0:
            out["r2"] = 1.0 - float(np.sum(err**2)) / ss_tot
    return out


def _cell(station, lead, stratum, pred, obs):
    row = {"station": station, "lead": lead, "stratum": stratum}
    row.update(_stats(pred, obs))
    return row


@dataclass
class MetricsReport:
    """Flat list of metric cells plus stratum bookkeeping.

    Aggregate cells use the literal station or lead value "all". Strata that
    end up with no members are recorded in empty_strata instead of raising.
    """

    cells: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    empty_strata: list = field(default_factory=list)

    def cell(self, station=ALL, lead=ALL, stratum=ALL):
        for c in self.cells:
            if c["station"] == station and c["lead"] == lead and c["stratum"] == stratum:
                return c
        raise KeyError((station, lead, stratum))

    def leads(self):
        return sorted({c["lead"] for c in self.cells if c["lead"] != ALL})

    def stations(self):
        return sorted({c["station"] for c in self.cells if c["station"] != ALL})

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for c in self.cells:
            r2 = "" if c["r2"] is None else repr(c["r2"])
            lines.append(
                f"{c['station']},{c['lead']},{c['mae']!r},{c['rmse']!r},"
                f"{r2},{c['n']},{c['stratum']}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "cells": self.cells,
                "thresholds": self.thresholds,
                "empty_strata": self.empty_strata,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(
            cells=obj["cells"],
            thresholds=obj["thresholds"],
            empty_strata=obj["empty_strata"],
        )


def append_lead_cells(report: MetricsReport, lead: int, pairs: dict,
                      quantiles: tuple = TERCILES):
    """Add one lead's per-station, pooled, and stratified cells to a report.

    pairs maps station id to (pred, obs) vectors in physical units. Stratum
    cut points come from the pooled observations so every station is judged
    against the same concentration bands.
    """
    sids = sorted(pairs)
    if not sids:
        raise LengthMismatch(f"no pairs supplied for lead {lead}")
    preds = {sid: np.asarray(pairs[sid][0], dtype=np.float64).reshape(-1) for sid in sids}
    obses = {sid: np.asarray(pairs[sid][1], dtype=np.float64).reshape(-1) for sid in sids}
    for sid in sids:
        if preds[sid].size != obses[sid].size:
            raise LengthMismatch(f"pred/obs length differ for station {sid}")
        if preds[sid].size == 0:
            raise LengthMismatch(f"no pairs supplied for station {sid}")
        report.cells.append(_cell(sid, lead, ALL, preds[sid], obses[sid]))
    pooled_pred = np.concatenate([preds[sid] for sid in sids])
    pooled_obs = np.concatenate([obses[sid] for sid in sids])
    report.cells.append(_cell(ALL, lead, ALL, pooled_pred, pooled_obs))

    labels, (t_low, t_high) = stratify(pooled_obs, quantiles)
    report.thresholds.append({"lead": lead, "low": t_low, "high": t_high})
    offsets = np.cumsum([0] + [preds[sid].size for sid in sids])
    for stratum in STRATA:
        mask = labels == stratum
        if not mask.any():
            report.empty_strata.append({"station": ALL, "lead": lead, "stratum": stratum})
            continue
        report.cells.append(
            _cell(ALL, lead, stratum, pooled_pred[mask], pooled_obs[mask])
        )
        for k, sid in enumerate(sids):
            sub = mask[offsets[k] : offsets[k + 1]]
            if sub.any():
                report.cells.append(
                    _cell(sid, lead, stratum, preds[sid][sub], obses[sid][sub])
                )


def append_lead_aggregates(report: MetricsReport, pooled: dict):
    """Add over-lead aggregate cells (lead column "all") to a report."""
    sids = sorted(pooled)
    for sid in sids:
        pred = np.concatenate(pooled[sid][0])
        obs = np.concatenate(pooled[sid][1])
        report.cells.append(_cell(sid, ALL, ALL, pred, obs))
    pred = np.concatenate([np.concatenate(pooled[sid][0]) for sid in sids])
    obs = np.concatenate([np.concatenate(pooled[sid][1]) for sid in sids])
    report.cells.append(_cell(ALL, ALL, ALL, pred, obs))


def persistence_forecast(panel, station: str, origin: int, leads) -> Forecast:
    """Flat-line baseline: every lead repeats the observation at the origin."""
    try:
        row = panel.station_row(station)
    except KeyError:
        raise UnknownTarget(station) from None
    pos = int(origin) - int(panel.index[0])
    if pos < 0 or pos >= panel.n_hours:
        raise MissingOrigin(f"origin {origin} lies outside the panel")
    value = panel.pm25[row, pos]
    if np.isnan(value):
        raise MissingOrigin(f"pm2.5 missing at origin {origin} for station {station}")
    leads = tuple(int(l) for l in leads)
    return Forecast(station, origin, leads, [float(value)] * len(leads))


def _test_pairs(samples, params, cfg, scalers, batch_size: int):
    """Model and persistence (pred, obs) pairs per station, physical units."""
    model_pairs: dict = {}
    pers_pairs: dict = {}
    for i in range(0, len(samples), batch_size):
        batch = samples[i : i + batch_size]
        pred = forward_batch(batch, params, cfg, mode="eval").data
        for s, row in zip(batch, pred):
            sc = scalers.pm[s.target_station]
            obs_val = float(inverse(sc, s.y[0]))
            model_val = float(inverse(sc, row[0]))
            pers_val = float(inverse(sc, s.x[0, -1]))
            model_pairs.setdefault(s.target_station, ([], []))
            pers_pairs.setdefault(s.target_station, ([], []))
            model_pairs[s.target_station][0].append(model_val)
            model_pairs[s.target_station][1].append(obs_val)
            pers_pairs[s.target_station][0].append(pers_val)
            pers_pairs[s.target_station][1].append(obs_val)
    return model_pairs, pers_pairs


def evaluate_horizons(panel, split, peer_sets: dict, scalers, model_cfg,
                      train_cfg, leads, quantiles: tuple = TERCILES,
                      stride: int = 1, log_dir=None):
    """Retrain one single-output model per lead and score it on the test split.

    Each lead gets its own sample build, its own seed derived from the base
    seed and the lead, and a fresh training run; predictions are inverse
    scaled before scoring so every cell is in physical units. The persistence
    baseline is scored on exactly the same test pairs. Returns
    (model_report, persistence_report, per-lead training info).
    """
    model_report, pers_report = MetricsReport(), MetricsReport()
    info: dict = {}
    pooled_model: dict = {}
    pooled_pers: dict = {}
    wd_sincos = len(scalers.met_fields) == 4
    for lead in leads:
        lead = int(lead)
        cfg_l = replace(model_cfg, leads=(lead,)).validate()
        analog_source = None
        if cfg_l.analog_rows > 0:
            analog_source = make_analog_source(
                panel, window=cfg_l.tau, m=cfg_l.analog_rows, exclusion=lead
            )
        by_split, _ = build_samples(
            panel, peer_sets, scalers, cfg_l.tau, [lead], stride=stride,
            split=split, analog_source=analog_source, wd_sincos=wd_sincos,
        )
        counts = {name: len(by_split.get(name) or []) for name in ("train", "val", "test")}
        if min(counts.values()) == 0:
            raise InsufficientData(lead, f"empty split for lead {lead}: {counts}")
        tcfg = replace(train_cfg, seed=derived_seed(train_cfg.seed, "lead", lead))
        log_path = os.path.join(log_dir, f"train_lead{lead}.jsonl") if log_dir else None
        params, state = train(by_split, cfg_l, tcfg, scalers=scalers, log_path=log_path)

        pairs_m, pairs_p = _test_pairs(
            by_split["test"], params, cfg_l, scalers, tcfg.batch_size
        )
        append_lead_cells(model_report, lead, pairs_m, quantiles)
        append_lead_cells(pers_report, lead, pairs_p, quantiles)
        for sid in pairs_m:
            pooled_model.setdefault(sid, ([], []))
            pooled_model[sid][0].append(np.asarray(pairs_m[sid][0], dtype=np.float64))
            pooled_model[sid][1].append(np.asarray(pairs_m[sid][1], dtype=np.float64))
            pooled_pers.setdefault(sid, ([], []))
            pooled_pers[sid][0].append(np.asarray(pairs_p[sid][0], dtype=np.float64))
            pooled_pers[sid][1].append(np.asarray(pairs_p[sid][1], dtype=np.float64))
        info[lead] = {
            "epochs": state.epoch,
            "best_val_loss": state.best_val_loss,
            "stopped_early": state.stopped_early,
            "samples": counts,
        }
    append_lead_aggregates(model_report, pooled_model)
    append_lead_aggregates(pers_report, pooled_pers)
    return model_report, pers_report, info
