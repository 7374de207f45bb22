"""Batch command-line pipeline over the forecasting toolkit.

Commands: synth, ingest, similarity, prepare, train, evaluate, forecast.
Every command reads one JSON config (flags override keys), writes its
artifacts plus the fully expanded config into the output directory, prints a
one-line summary, and exits 0. Failures exit nonzero with one JSON object on
stderr: 2 for config errors, 3 for data errors, 4 for diverged training.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from datetime import datetime, timezone

import numpy as np

from .config import RunConfig, load_config, save_expanded
from .errors import (
    BadTimestamp,
    ConfigError,
    DataError,
    DivergedLoss,
    NoStations,
    UnknownTarget,
)
from .evaluation import evaluate_horizons
from .features import (
    Scalers,
    build_samples,
    chronological_split,
    fit_panel_scalers,
    load_samples,
    make_analog_source,
    save_samples,
)
from .ingest import (
    align_panel,
    filter_stations,
    impute_gaps,
    load_panel,
    parse_station_csv,
    save_panel,
)
from .model import load_checkpoint, predict, save_checkpoint
from .similarity import (
    PeerSet,
    common_gap_free_window,
    matrix_to_csv,
    pairwise_matrix,
    select_peers,
)
from .synth import generate, write_station_csvs, write_truth
from .training import train

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _art(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _write_out(cfg: RunConfig):
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_expanded(cfg, _art(cfg, "config.json"))


def _parse_origin(text: str) -> int:
    """Epoch hour, given either an integer or an ISO 8601 timestamp."""
    try:
        return int(text)
    except ValueError:
        pass
    iso = text.strip()
    if iso.endswith("Z"):
        iso = iso[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError:
        raise BadTimestamp("--origin", text) from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() // 3600)


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = cfg.synth_spec()
    panel, truth = generate(spec)
    paths = write_station_csvs(panel, cfg.input_dir)
    _write_out(cfg)
    write_truth(spec, truth, _art(cfg, "truth.json"))
    print(
        f"synth: {len(paths)} stations x {spec.n_hours} hours -> {cfg.input_dir} "
        f"({len(truth.gaps)} gaps injected, {truth.clamp_count} values clamped)"
    )
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    files = sorted(glob.glob(os.path.join(cfg.input_dir, "*.csv")))
    if not files:
        raise NoStations(f"no station csvs under {cfg.input_dir}")
    per_station, parse_reports = {}, {}
    for path in files:
        sid = os.path.splitext(os.path.basename(path))[0]
        with open(path, "rb") as fh:
            series, report = parse_station_csv(fh.read(), schema=cfg.columns or None)
        per_station[sid] = series
        parse_reports[sid] = vars(report)
    t_lo = min(int(s.ts.min()) for s in per_station.values())
    t_hi = max(int(s.ts.max()) for s in per_station.values())
    panel = align_panel(per_station, (t_lo, t_hi))
    panel = filter_stations(panel, cfg.max_missing_frac)
    panel, imputation = impute_gaps(panel, cfg.max_gap)
    _write_out(cfg)
    save_panel(panel, _art(cfg, "panel.csv"), _art(cfg, "panel_meta.json"))
    with open(_art(cfg, "ingest_report.json"), "w") as fh:
        json.dump(
            {
                "parse": parse_reports,
                "imputation": json.loads(imputation.to_json()),
                "excluded": [s.id for s in panel.excluded],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    print(
        f"ingest: {len(panel.stations)} stations x {panel.n_hours} hours -> "
        f"{_art(cfg, 'panel.csv')} ({len(panel.excluded)} excluded)"
    )
    return 0


def _load_ingested(cfg: RunConfig):
    return load_panel(_art(cfg, "panel.csv"), _art(cfg, "panel_meta.json"))


def cmd_similarity(cfg: RunConfig, args) -> int:
    panel = _load_ingested(cfg)
    if cfg.window_start is None:
        split = chronological_split(panel, cfg.fractions)
        window = common_gap_free_window(panel, cfg.window_len, end=split.positions[0])
    else:
        window = (cfg.window_start, cfg.window_len)
    sim = pairwise_matrix(panel, window, normalize=cfg.normalize)
    peers = {sid: select_peers(sim, sid, cfg.k).members for sid in sim.station_ids}
    _write_out(cfg)
    with open(_art(cfg, "similarity.csv"), "w") as fh:
        fh.write(matrix_to_csv(sim))
    with open(_art(cfg, "peers.json"), "w") as fh:
        json.dump(
            {"window": [int(window[0]), int(window[1])], "k": cfg.k, "peers": peers},
            fh,
            indent=2,
            sort_keys=True,
        )
    print(
        f"similarity: {cfg.k} peers per station over window "
        f"[{window[0]}, {window[0] + window[1]}) -> {_art(cfg, 'peers.json')}"
    )
    return 0


def _load_peers(cfg: RunConfig) -> dict:
    with open(_art(cfg, "peers.json")) as fh:
        doc = json.load(fh)
    return {t: PeerSet(target=t, members=list(m)) for t, m in doc["peers"].items()}


def cmd_prepare(cfg: RunConfig, args) -> int:
    panel = _load_ingested(cfg)
    peer_sets = _load_peers(cfg)
    mcfg = cfg.model_config()
    for target, ps in peer_sets.items():
        if len(ps.members) != mcfg.m:
            raise ConfigError(
                f"peer set for {target} has {len(ps.members)} members but the "
                f"model expects m={mcfg.m}; rerun similarity with k={mcfg.m}"
            )
    split = chronological_split(panel, cfg.fractions)
    scalers = fit_panel_scalers(panel, split, wd_sincos=cfg.wd_sincos)
    analog_source = None
    if mcfg.analog_rows > 0:
        analog_source = make_analog_source(
            panel, window=mcfg.tau, m=mcfg.analog_rows, exclusion=max(mcfg.leads)
        )
    by_split, report = build_samples(
        panel, peer_sets, scalers, mcfg.tau, mcfg.leads, stride=cfg.stride,
        split=split, analog_source=analog_source, wd_sincos=cfg.wd_sincos,
    )
    _write_out(cfg)
    save_samples(by_split, mcfg.leads, _art(cfg, "samples.bin"))
    with open(_art(cfg, "scalers.json"), "w") as fh:
        json.dump(scalers.to_dict(), fh, indent=2, sort_keys=True)
    with open(_art(cfg, "split.json"), "w") as fh:
        json.dump(
            {
                "fractions": list(split.fractions),
                "positions": list(split.positions),
                "boundaries": list(split.boundaries),
                "n_hours": split.n_hours,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    with open(_art(cfg, "build_report.json"), "w") as fh:
        json.dump(vars(report), fh, indent=2, sort_keys=True)
    counts = {name: len(samples) for name, samples in by_split.items()}
    print(f"prepare: samples {counts} -> {_art(cfg, 'samples.bin')}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    by_split, _ = load_samples(_art(cfg, "samples.bin"))
    with open(_art(cfg, "scalers.json")) as fh:
        scalers = Scalers.from_dict(json.load(fh))
    peer_sets = _load_peers(cfg)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    _write_out(cfg)
    params, state = train(
        by_split, mcfg, tcfg, scalers=scalers,
        log_path=_art(cfg, "training_log.jsonl"),
    )
    save_checkpoint(
        _art(cfg, "checkpoint.json"), params, mcfg, scalers, peer_sets,
        metadata={
            "best_val_loss": state.best_val_loss,
            "epochs": state.epoch,
            "stopped_early": state.stopped_early,
            "train_config": tcfg.to_dict(),
        },
    )
    print(
        f"train: best val loss {state.best_val_loss:.6f} after {state.epoch} "
        f"epochs (early stop: {state.stopped_early}) -> {_art(cfg, 'checkpoint.json')}"
    )
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    panel = _load_ingested(cfg)
    peer_sets = _load_peers(cfg)
    split = chronological_split(panel, cfg.fractions)
    scalers = fit_panel_scalers(panel, split, wd_sincos=cfg.wd_sincos)
    _write_out(cfg)
    model_rep, pers_rep, info = evaluate_horizons(
        panel, split, peer_sets, scalers, cfg.model_config(), cfg.train_config(),
        cfg.eval_leads, quantiles=cfg.quantiles, stride=cfg.stride,
        log_dir=cfg.output_dir,
    )
    for name, report in (("metrics", model_rep), ("persistence", pers_rep)):
        with open(_art(cfg, f"{name}.csv"), "w") as fh:
            fh.write(report.to_csv())
        with open(_art(cfg, f"{name}.json"), "w") as fh:
            fh.write(report.to_json())
    with open(_art(cfg, "eval_info.json"), "w") as fh:
        json.dump({str(k): v for k, v in info.items()}, fh, indent=2, sort_keys=True)
    grand = model_rep.cell()
    base = pers_rep.cell()
    print(
        f"evaluate: leads {list(cfg.eval_leads)} -> {_art(cfg, 'metrics.csv')} "
        f"(model rmse {grand['rmse']:.3f} vs persistence {base['rmse']:.3f})"
    )
    return 0


def cmd_forecast(cfg: RunConfig, args) -> int:
    params, mcfg, scalers, peer_sets, _ = load_checkpoint(_art(cfg, "checkpoint.json"))
    panel = _load_ingested(cfg)
    if args.station not in peer_sets:
        raise UnknownTarget(args.station)
    origin = _parse_origin(args.origin)
    fc = predict(
        panel, args.station, origin, params, mcfg, scalers, peer_sets[args.station]
    )
    with open(_art(cfg, "forecast.json"), "w") as fh:
        json.dump(
            {
                "station": fc.target_station,
                "origin": fc.origin,
                "leads": list(fc.leads),
                "pm25_ug_m3": list(fc.values),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    print(f"forecast: station {fc.target_station} origin {fc.origin} (ug/m3)")
    for lead, value in zip(fc.leads, fc.values):
        print(f"  +{lead}h: {value:.2f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "similarity": cmd_similarity,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
}


def _build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps unset subcommand flags out of the namespace, so they can
    # never clobber the same flag given before the subcommand.
    common = argparse.ArgumentParser(
        add_help=False, argument_default=argparse.SUPPRESS
    )
    common.add_argument("--config", help="path to a JSON run config")
    common.add_argument("--input-dir", dest="input_dir", help="override input_dir")
    common.add_argument("--output-dir", dest="output_dir", help="override output_dir")
    common.add_argument("--seed", type=int, help="override seed")
    common.add_argument(
        "--print-config", action="store_true",
        help="print the fully expanded config and exit",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="pmcast",
        parents=[common],
        description="Multi-station pm2.5 forecasting pipeline.",
    )
    sub = parser.add_subparsers(dest="command")

    p_synth = sub.add_parser("synth", parents=[common])
    p_synth.add_argument("--stations", type=int, help="override synth n_stations")
    p_synth.add_argument("--hours", type=int, help="override synth n_hours")
    sub.add_parser("ingest", parents=[common])
    p_sim = sub.add_parser("similarity", parents=[common])
    p_sim.add_argument("--k", type=int, help="peers per station")
    p_sim.add_argument("--window-start", dest="window_start", type=int)
    p_sim.add_argument("--window-len", dest="window_len", type=int)
    p_sim.add_argument(
        "--no-normalize", dest="no_normalize", action="store_true",
        help="compare raw series instead of window-normalized ones",
    )
    p_prep = sub.add_parser("prepare", parents=[common])
    p_prep.add_argument("--stride", type=int)
    p_train = sub.add_parser("train", parents=[common])
    p_train.add_argument("--model-preset", dest="model_preset")
    p_train.add_argument("--train-preset", dest="train_preset")
    p_eval = sub.add_parser("evaluate", parents=[common])
    p_eval.add_argument("--leads", help="comma-separated lead hours, e.g. 1,24")
    p_fc = sub.add_parser("forecast", parents=[common])
    p_fc.add_argument("--station", required=True)
    p_fc.add_argument("--origin", required=True, help="epoch hour or ISO timestamp")
    return parser


def _resolve(args) -> RunConfig:
    config_path = getattr(args, "config", None)
    cfg = load_config(config_path) if config_path else RunConfig()
    for attr in ("input_dir", "output_dir", "seed", "k", "window_start",
                 "window_len", "stride", "model_preset", "train_preset"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "no_normalize", False):
        cfg.normalize = False
    synth_over = {}
    if getattr(args, "stations", None) is not None:
        synth_over["n_stations"] = args.stations
    if getattr(args, "hours", None) is not None:
        synth_over["n_hours"] = args.hours
    if synth_over:
        cfg.synth = {**cfg.synth, **synth_over}
    if getattr(args, "leads", None):
        cfg.eval_leads = tuple(int(x) for x in args.leads.split(","))
    return cfg.validate()


def _fail(exc, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for key, value in vars(exc).items():
        if not key.startswith("_") and isinstance(value, (str, int, float, bool)):
            doc[key] = value
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve(args)
        if getattr(args, "print_config", False):
            print(json.dumps(cfg.expanded(), indent=2, sort_keys=True))
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except DivergedLoss as exc:
        return _fail(exc, EXIT_DIVERGED)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except FileNotFoundError as exc:
        missing = exc.filename or str(exc)
        print(
            json.dumps(
                {
                    "error": "MissingArtifact",
                    "message": f"required file not found: {missing}; "
                    "run the earlier pipeline stages first",
                    "exit_code": EXIT_DATA,
                },
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
