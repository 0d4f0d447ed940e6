"""``freewaytt`` command line: one binary, one subcommand per pipeline stage.

Every output file ``X`` is accompanied by ``X.manifest.json`` recording the
command, the resolved configuration, SHA-256 digests of inputs and outputs,
the seed, the tool version and the wall time.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import FreewayTTError, ValidationError
from .estimation import DEFAULT_DAY_WINDOW, DEFAULT_V_FLOOR_MPS, estimate, read_matrix_csv, write_matrix_csv
from .features import FeatureSpec, build_supervised, read_dataset_csv, read_neighbors, screen_features, \
    write_dataset_csv
from .geodata import DEFAULT_MAX_DIST_M, DEFAULT_MAX_HEADING_DELTA_DEG, load_segments, write_segments
from .learners import DEFAULT_PARAMS, KINDS, feature_importance, fit_model, load_model, predict, save_model
from .synth import DEFAULT_START, CongestionProfile, demo_segments, generate_matrix, generate_trajectories, \
    period_statistics
from .tuning import DEFAULT_PEAKS, evaluate_horizons, grid_search, parse_grid_config, write_tune_csv

logger = logging.getLogger("freewaytt")


class UsageError(FreewayTTError):
    category = "usage"


class IOFailure(FreewayTTError):
    category = "io"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = __version__
    started_utc: str = ""
    elapsed_s: float = 0.0


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(output: str | Path) -> Path:
    return Path(str(output) + ".manifest.json")


# ---- flag parsing helpers ----

def parse_hour_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END hours, got {text!r}") from None
    if not 0 <= a < b <= 24:
        raise argparse.ArgumentTypeError(f"bad hour range {text!r}")
    return a, b


def parse_peaks(text: str) -> list[tuple[float, float]]:
    if text.strip() in ("", "none"):
        return []
    out = []
    for part in text.split(","):
        try:
            a, b = (float(p) for p in part.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected START:END[,START:END...], got {text!r}") from None
        if not 0 <= a < b <= 24:
            raise argparse.ArgumentTypeError(f"bad peak window {part!r}")
        out.append((a, b))
    return out


def parse_peak_multipliers(text: str) -> tuple:
    out = []
    for part in text.split(","):
        try:
            a, b, mult = (float(p) for p in part.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected START:END:MULT[,...], got {text!r}") from None
        out.append((a, b, mult))
    return tuple(out)


def parse_int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        try:
            if ".." in part:
                a, b = (int(p) for p in part.split(".."))
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected integers or A..B ranges, got {text!r}") from None
    return out


def parse_param(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, val = (s.strip() for s in text.split("=", 1))
    if val.lower() == "none":
        return key, None
    for cast in (int, float):
        try:
            return key, cast(val)
        except ValueError:
            pass
    raise argparse.ArgumentTypeError(f"non-numeric parameter value {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(seed: bool = False, workers: bool = False) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    if seed:
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (required)")
    if workers:
        p.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel workers")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freewaytt", description="Freeway travel-time estimation and prediction.")
    parser.add_argument("--version", action="version", version=f"freewaytt {__version__}")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    seeded = _common(seed=True, workers=True)
    plain = _common(workers=True)

    p = sub.add_parser("estimate", parents=[plain], help="BSM files -> travel-time matrix CSV")
    p.add_argument("--bsm", action="append", required=True, help="BSM CSV path or glob (repeatable)")
    p.add_argument("--segments", required=True)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--max-dist-m", type=float, default=DEFAULT_MAX_DIST_M)
    p.add_argument("--max-heading-delta", type=float, default=DEFAULT_MAX_HEADING_DELTA_DEG)
    p.add_argument("--window", type=parse_hour_range, default=DEFAULT_DAY_WINDOW)
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--v-floor", type=float, default=DEFAULT_V_FLOOR_MPS)
    p.add_argument("--no-interpolate", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[seeded], help="synthetic BSM file or matrix")
    p.add_argument("--kind", choices=("bsm", "matrix"), default="bsm")
    p.add_argument("--segments", help="segment CSV; default is a generated straight corridor")
    p.add_argument("--n-segments", type=int, default=3)
    p.add_argument("--length-km", type=float, default=0.8)
    p.add_argument("--bearing", type=float, default=135.0)
    p.add_argument("--segments-out", help="write the generated corridor here")
    p.add_argument("--days", type=int, default=2)
    p.add_argument("--start-date", default=DEFAULT_START)
    p.add_argument("--vehicles-per-interval", type=int, default=2)
    p.add_argument("--base-speed", type=float, default=27.0)
    p.add_argument("--peak", type=parse_peak_multipliers, default=((6, 9, 0.6), (16, 19, 0.6)),
                   help="START:END:MULT windows, comma separated")
    p.add_argument("--diurnal", type=float, default=0.0)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--ar-coef", type=float, default=0.0)
    p.add_argument("--window", type=parse_hour_range, default=DEFAULT_DAY_WINDOW)
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--truth", help="ground-truth sidecar path (bsm kind); default truth_<OUT name> beside OUT")
    p.add_argument("--stats-out", help="per-segment peak/non-peak travel-time statistics (matrix kind)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("features", help="matrix CSV -> supervised dataset CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--omega", type=int, default=3)
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--neighbors", help="neighbor CSV; enables TT_up/TT_down")
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("screen", help="Pearson screen of candidate series against later travel time")
    p.add_argument("--matrix", required=True)
    p.add_argument("--candidates", default="TT,Ax,Ay")
    p.add_argument("--shift", type=int, default=1)
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tune", parents=[seeded], help="k-fold grid search")
    p.add_argument("--algo", choices=KINDS, required=True)
    p.add_argument("--grid", required=True, help="key = values config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=None, help="folds (overrides the grid file)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[seeded], help="fit a model on a dataset")
    p.add_argument("--algo", choices=KINDS, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", help="tune first and train the best combination")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--param", type=parse_param, action="append", default=[], help="key=value override")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="score a dataset with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[seeded], help="per-horizon test MAPE, peak vs non-peak")
    p.add_argument("--matrix", required=True)
    p.add_argument("--algo", choices=KINDS, default="xgb")
    p.add_argument("--horizons", type=parse_int_list, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--peak", type=parse_peaks, default=list(DEFAULT_PEAKS))
    p.add_argument("--omega", type=int, default=3)
    p.add_argument("--train-frac", type=float, default=0.75)
    p.add_argument("--shuffle-split", action="store_true", help="random instead of chronological split")
    p.add_argument("--neighbors")
    p.add_argument("--param", type=parse_param, action="append", default=[])
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--predictions-out", help="prediction-vs-actual CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("importance", help="gain-based feature importance of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---- commands ----

def _need_file(path: str) -> str:
    if not Path(path).is_file():
        raise IOFailure(f"no such file: {path}")
    return path


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command} needs --seed")
    return args.seed


def _write_rows(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return str(v)


def cmd_estimate(args) -> tuple[list[str], list[str]]:
    paths: list[str] = []
    for pattern in args.bsm:
        found = sorted(glob.glob(pattern))
        if not found:
            raise IOFailure(f"no BSM files match {pattern}")
        paths.extend(found)
    segs = load_segments(_need_file(args.segments))
    m, stats = estimate(paths, segs, args.partitions, args.workers, args.max_dist_m, args.max_heading_delta,
                        tuple(args.window), args.tz_offset_min, args.v_floor, not args.no_interpolate)
    logger.info("read %d rows, kept %d, matched %d", stats.rows_read, stats.rows_kept, stats.matched)
    write_matrix_csv(args.out, m)
    return paths + [args.segments], [args.out]


def _profile(args, seed: int) -> CongestionProfile:
    return CongestionProfile(args.base_speed, tuple(args.peak), args.diurnal, args.noise_sd, args.ar_coef, seed)


def cmd_synth(args):
    seed = _require_seed(args)
    inputs, outputs = [], [args.out]
    if args.segments:
        segs = load_segments(_need_file(args.segments))
        inputs.append(args.segments)
    else:
        segs = demo_segments(args.n_segments, args.length_km, bearing_deg=args.bearing)
        if args.segments_out:
            write_segments(args.segments_out, segs)
            outputs.append(args.segments_out)
    profile = _profile(args, seed)
    if args.kind == "bsm":
        truth = args.truth or str(Path(args.out).with_name("truth_" + Path(args.out).name))
        generate_trajectories(segs, profile, args.vehicles_per_interval, args.days, args.out, truth,
                              args.start_date, tuple(args.window), args.tz_offset_min)
        outputs.append(truth)
    else:
        m = generate_matrix(profile, segs, args.days, args.start_date, tuple(args.window), args.tz_offset_min)
        write_matrix_csv(args.out, m)
        if args.stats_out:
            rows = period_statistics(m, segs)
            keys = list(rows[0])
            _write_rows(args.stats_out, keys, [[_fmt(r[k]) for k in keys] for r in rows])
            outputs.append(args.stats_out)
    return inputs, outputs


def cmd_features(args):
    m = read_matrix_csv(_need_file(args.matrix), args.tz_offset_min)
    inputs = [args.matrix]
    neighbors = {}
    if args.neighbors:
        neighbors = read_neighbors(_need_file(args.neighbors))
        inputs.append(args.neighbors)
    ds = build_supervised(m, FeatureSpec(args.omega, args.horizon, bool(args.neighbors), neighbors))
    write_dataset_csv(args.out, ds)
    return inputs, [args.out]


def cmd_screen(args):
    m = read_matrix_csv(_need_file(args.matrix), args.tz_offset_min)
    rows = screen_features(m, [c.strip() for c in args.candidates.split(",")], args.shift)
    _write_rows(args.out, ["candidate", "segment_id", "r", "n"],
                [[r["candidate"], r["segment_id"], _fmt(r["r"]), r["n"]] for r in rows])
    return [args.matrix], [args.out]


def _read_grid(args, seed: int):
    text = Path(_need_file(args.grid)).read_text()
    grid = parse_grid_config(text, args.algo, seed=seed)
    if args.k is not None:
        grid.k = args.k
    grid.seed = seed
    return grid


def cmd_tune(args):
    seed = _require_seed(args)
    ds = read_dataset_csv(_need_file(args.dataset))
    result = grid_search(ds, _read_grid(args, seed), args.workers)
    write_tune_csv(args.out, result)
    return [args.dataset, args.grid], [args.out]


def cmd_train(args):
    seed = _require_seed(args)
    ds = read_dataset_csv(_need_file(args.dataset))
    inputs = [args.dataset]
    params = dict(DEFAULT_PARAMS[args.algo])
    if args.grid:
        grid = _read_grid(args, seed)
        inputs.append(args.grid)
        params.update(grid.fixed)
        params.update({k: v for k, v in grid_search(ds, grid, args.workers).best_params.items() if k in params})
    params.update(dict(args.param))
    unknown = set(dict(args.param)) - set(DEFAULT_PARAMS[args.algo])
    if unknown:
        raise UsageError(f"{args.algo} has no parameter(s) {', '.join(sorted(unknown))}")
    model = fit_model(args.algo, ds.X, ds.y, params, seed, args.workers)
    model.feature_names = list(ds.feature_names)
    save_model(model, args.out)
    args.resolved_params = params
    return inputs, [args.out]


def cmd_predict(args):
    model = load_model(_need_file(args.model))
    ds = read_dataset_csv(_need_file(args.dataset))
    if model.feature_names and model.feature_names != ds.feature_names:
        raise ValidationError("dataset columns do not match the model's features")
    pred = predict(model, ds.X)
    _write_rows(args.out, ["segment_id", "interval_start", "actual", "predicted"],
                [[ds.segment_id[i], int(ds.target_start[i]), repr(float(ds.y[i])), repr(float(pred[i]))]
                 for i in range(len(ds))])
    return [args.model, args.dataset], [args.out]


def cmd_evaluate(args):
    seed = _require_seed(args)
    m = read_matrix_csv(_need_file(args.matrix), args.tz_offset_min)
    inputs = [args.matrix]
    neighbors = None
    if args.neighbors:
        neighbors = read_neighbors(_need_file(args.neighbors))
        inputs.append(args.neighbors)
    results = evaluate_horizons(m, args.algo, dict(args.param), args.horizons, args.omega, seed, args.train_frac,
                                args.peak, bool(neighbors), neighbors, args.shuffle_split, args.workers)
    rows = []
    for r in results:
        rows.append([r.horizon, r.horizon * 5, _fmt(r.by_period.get("peak", {}).get("ALL")),
                     _fmt(r.by_period.get("non-peak", {}).get("ALL")), _fmt(r.mape), _fmt(r.train_mape)])
    _write_rows(args.out, ["horizon_steps", "horizon_min", "peak_mape", "non_peak_mape", "all_mape",
                           "train_mape"], rows)
    outputs = [args.out]
    if args.predictions_out:
        peak_windows = args.peak
        pred_rows = []
        for r in results:
            hour = (r.test.target_start + r.test.tz_offset_min * 60) % 86400 / 3600.0
            for i in range(len(r.test)):
                period = "peak" if any(a <= hour[i] < b for a, b in peak_windows) else "non-peak"
                pred_rows.append([r.horizon, r.test.segment_id[i], int(r.test.target_start[i]), period,
                                  repr(float(r.test.y[i])), repr(float(r.predicted[i]))])
        _write_rows(args.predictions_out, ["horizon_steps", "segment_id", "interval_start", "period", "actual",
                                           "predicted"], pred_rows)
        outputs.append(args.predictions_out)
    return inputs, outputs


def cmd_importance(args):
    model = load_model(_need_file(args.model))
    shares = feature_importance(model)
    _write_rows(args.out, ["feature", "share"], [[k, repr(v)] for k, v in shares.items()])
    return [args.model], [args.out]


COMMANDS = {
    "estimate": cmd_estimate, "synth": cmd_synth, "features": cmd_features, "screen": cmd_screen,
    "tune": cmd_tune, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "importance": cmd_importance,
}


def _config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def run(argv: Sequence[str]) -> int:
    args = build_parser().parse_args(list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    inputs, outputs = COMMANDS[args.command](args)
    elapsed = time.perf_counter() - t0
    manifest = RunManifest(args.command, list(argv), _config(args), {p: sha256_file(p) for p in inputs},
                           {p: sha256_file(p) for p in outputs}, args.seed, __version__, started, round(elapsed, 3))
    for out in outputs:
        manifest_path(out).write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True, default=str) + "\n")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except FreewayTTError as exc:
        print(f"error[{exc.category}]: {exc}".replace("\n", " "), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error[io]: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
