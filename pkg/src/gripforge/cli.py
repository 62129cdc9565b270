"""Command-line surface: synth, preprocess, train, eval, sweep, predict.

Exit codes: 0 success, 2 usage errors (argparse), 3 data errors,
4 numeric divergence. Every command writes a manifest.json into its
output directory as the final (atomic) step, so an interrupted run
leaves no manifest. Flags override config-file values, which override
built-in defaults; the effective configuration is echoed into the
manifest. GRIPFORGE_OUT_DIR sets the default output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, DivergenceError
from . import io as gio
from .dataset import make_windows_multi, split_train_eval
from .evaluation import (
    METRIC_COLUMNS,
    TABLE_COLUMNS,
    evaluate_model,
    horizon_sweep,
)
from .models import (
    ARCHITECTURES,
    DEFAULT_WINDOW,
    checkpoint_dict,
    model_from_checkpoint,
)
from .signals import (
    FilterCoefficients,
    N_EMG_CHANNELS,
    Recording,
    ScalerParams,
    StreamingFilter,
    design_bandpass,
    design_lowpass,
    design_notch,
    merge_and_fit_scaler,
    minmax_apply,
    minmax_invert,
    preprocess_recording,
)
from .synth import SynthConfig, generate_corpus
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _default_out() -> str:
    return os.environ.get("GRIPFORGE_OUT_DIR", "out")


def _load_config_file(path: str | None) -> dict:
    """JSON object, or plain `key = value` lines; '#' starts a comment."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        cfg = json.loads(text)
        if not isinstance(cfg, dict):
            raise DataError(f"{p}: config must be a JSON object")
        return cfg
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{p}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        cfg[key] = val
    return cfg


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def _merged_train_config(args) -> TrainConfig:
    """defaults < config file < explicit CLI flags."""
    base = TrainConfig()
    file_cfg = _load_config_file(getattr(args, "config", None))
    values = {}
    for f in dataclass_fields(TrainConfig):
        values[f.name] = getattr(base, f.name)
        if f.name in file_cfg:
            values[f.name] = _coerce(file_cfg[f.name], getattr(base, f.name))
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return TrainConfig(**values)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file (JSON or key=value lines)")
    p.add_argument("--arch", choices=ARCHITECTURES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--window", type=int, default=None,
                   help=f"input window length in samples (default {DEFAULT_WINDOW})")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None,
                   help="recurrent state size (default 50)")
    p.add_argument("--activation-mode", dest="activation_mode",
                   choices=("paper", "strict", "standard"), default=None)
    p.add_argument("--multi-horizon", dest="multi_horizon",
                   action="store_true", default=None,
                   help="predict all H future steps instead of only step H")
    p.add_argument("--shuffle-split", dest="shuffle_split",
                   action="store_true", default=None,
                   help="random eval split instead of per-recording tails")
    p.add_argument("--keep-best", dest="keep_best", action="store_true", default=None)


def _collect_csvs(data: list[str]) -> list[Path]:
    out: list[Path] = []
    for item in data:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.csv")))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not out:
        raise DataError(f"no CSV files found under {data}")
    return out


def _load_tables(paths: list[Path], fs: float) -> list[tuple[str, np.ndarray]]:
    recs = [gio.read_recording_csv(p, sample_rate_hz=fs) for p in paths]
    return [(r.subject_id, r.as_table()) for r in recs]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = SynthConfig(
        seed=args.seed,
        subjects=args.subjects,
        duration_s=args.duration,
        sample_rate_hz=args.fs,
    )
    recs = generate_corpus(cfg)
    paths = []
    for rec in recs:
        path = out / f"{rec.subject_id}.csv"
        gio.write_recording_csv(path, rec)
        paths.append(path)
    manifest = gio.run_manifest(
        "synth",
        {
            "seed": cfg.seed,
            "subjects": cfg.subjects,
            "duration_s": cfg.duration_s,
            "sample_rate_hz": cfg.sample_rate_hz,
        },
        inputs=[],
        outputs=paths,
        seeds={"synth": cfg.seed},
    )
    manifest["inputs"] = []
    manifest["output_hashes"] = {str(p): gio.sha256_file(p) for p in paths}
    gio.write_json(out / "manifest.json", manifest)
    print(f"wrote {len(paths)} recordings to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def _parse_pair(text: str, what: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError as e:
        raise DataError(f"expected '{what}' as two comma-separated numbers: {text!r}") from e
    return a, b


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    paths = _collect_csvs(args.inputs)
    fs = args.fs
    low, high = _parse_pair(args.emg_band, "--emg-band")
    notch_hz, notch_q = _parse_pair(args.notch, "--notch")
    bp = design_bandpass(low, high, fs, args.emg_order)
    nt = design_notch(notch_hz, notch_q, fs)
    if args.force_same_filters:
        force_filter = None
        force_notch = None
    else:
        force_filter = design_lowpass(args.force_cut, fs, args.force_order)
        force_notch = nt

    recs = [gio.read_recording_csv(p, sample_rate_hz=fs) for p in paths]
    processed = [
        preprocess_recording(r, bp, nt, force_bandpass=force_filter,
                             force_notch=force_notch)
        for r in recs
    ]
    merged, scaler = merge_and_fit_scaler(processed)

    out_paths = []
    for rec, src in zip(processed, paths):
        table = minmax_apply(scaler, rec.as_table())
        norm = Recording(
            sample_rate_hz=rec.sample_rate_hz,
            emg=table[:, :N_EMG_CHANNELS],
            force=table[:, N_EMG_CHANNELS],
            subject_id=rec.subject_id,
        )
        path = out / "processed" / f"{src.stem}.csv"
        gio.write_recording_csv(path, norm)
        out_paths.append(path)

    scaler_doc = {
        "min": scaler.min.tolist(),
        "max": scaler.max.tolist(),
        "sample_rate_hz": fs,
        "columns": [f"emg{i}" for i in range(1, 9)] + ["force"],
        "emg_bandpass": bp.to_dict(),
        "emg_notch": nt.to_dict(),
        "force_filter": (force_filter or bp).to_dict(),
        "force_notch": (force_notch or nt).to_dict(),
    }
    scaler_path = out / "scaler.json"
    gio.write_json(scaler_path, scaler_doc)

    config = {
        "emg_band": [low, high],
        "emg_order": args.emg_order,
        "notch": [notch_hz, notch_q],
        "force_same_filters": bool(args.force_same_filters),
        "force_cut": args.force_cut,
        "force_order": args.force_order,
        "sample_rate_hz": fs,
    }
    manifest = gio.run_manifest(
        "preprocess", config, inputs=paths, outputs=out_paths + [scaler_path]
    )
    gio.write_json(out / "manifest.json", manifest)
    print(f"wrote {len(out_paths)} processed recordings and {scaler_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _build_datasets(tables, tc: TrainConfig):
    ds = make_windows_multi(tables, tc.window, tc.horizon,
                            multi_horizon=tc.multi_horizon)
    train_ds, eval_ds = split_train_eval(ds, tc.eval_fraction, tc.seed,
                                         shuffle=tc.shuffle_split)
    return ds, train_ds, eval_ds


def cmd_train(args) -> int:
    out = Path(args.out)
    tc = _merged_train_config(args)
    paths = _collect_csvs(args.data)
    tables = _load_tables(paths, args.fs)
    ds, train_ds, eval_ds = _build_datasets(tables, tc)

    model, history = train(train_ds, eval_ds, tc)

    ckpt = checkpoint_dict(model)
    ckpt["train_config"] = tc.to_dict()
    ckpt["dataset"] = ds.manifest()
    ckpt_path = out / "checkpoint.json"
    gio.write_json(ckpt_path, ckpt)
    hist_path = out / "history.json"
    gio.write_json(hist_path, history.to_dict())
    ds_path = out / "dataset.json"
    gio.write_json(ds_path, ds.manifest())

    manifest = gio.run_manifest(
        "train", tc.to_dict(), inputs=paths,
        outputs=[ckpt_path, hist_path, ds_path],
        seeds={"train": tc.seed},
    )
    gio.write_json(out / "manifest.json", manifest)
    print(
        f"trained {tc.arch} (W={tc.window}, H={tc.horizon}) "
        f"final eval loss {history.eval_loss[-1]:.6g}; checkpoint at {ckpt_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _report_files(out: Path, report, stem: str, pred, actual):
    gio.write_json(out / f"{stem}.json", report.to_dict())
    gio.write_table_csv(out / f"{stem}_metrics.csv", METRIC_COLUMNS,
                        [{k: report.table_row()[k] for k in METRIC_COLUMNS}])
    se = (np.asarray(pred) - np.asarray(actual)) ** 2
    d = report.distribution
    lines = ["sample_index,squared_error"]
    lines.extend(f"{i},{repr(float(v))}" for i, v in enumerate(se))
    gio.atomic_write_text(out / f"{stem}_plot_data.csv", "\n".join(lines) + "\n")
    gio.write_json(
        out / f"{stem}_quartiles.json",
        {"q1": d.q1, "median": d.median, "q3": d.q3,
         "whisker_lo": d.whisker_lo, "whisker_hi": d.whisker_hi,
         "min": d.min, "max": d.max, "n_outliers": d.n_outliers},
    )


def cmd_eval(args) -> int:
    out = Path(args.out)
    ckpt = gio.read_json(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    tc_dict = ckpt.get("train_config", {})
    tc = TrainConfig(**tc_dict) if tc_dict else TrainConfig(
        arch=model.config.arch, window=model.config.window,
        horizon=model.config.horizon, hidden=model.config.hidden,
        seed=model.config.seed,
    )
    if args.eval_fraction is not None:
        tc = TrainConfig(**{**tc.to_dict(), "eval_fraction": args.eval_fraction})
    paths = _collect_csvs(args.data)
    tables = _load_tables(paths, args.fs)
    _, _, eval_ds = _build_datasets(tables, tc)

    from .evaluation import predict_batched

    report = evaluate_model(model, eval_ds, config=tc.to_dict())
    pred = predict_batched(model, eval_ds)
    actual = eval_ds.targets if not eval_ds.multi_horizon else eval_ds.targets[:, -1]
    if eval_ds.multi_horizon:
        pred = pred[:, -1]
    _report_files(out, report, "report", pred, actual)
    manifest = gio.run_manifest(
        "eval", tc.to_dict(), inputs=[Path(args.checkpoint), *paths],
        outputs=[out / "report.json"],
    )
    gio.write_json(out / "manifest.json", manifest)
    print(f"eval {report.model} H={report.horizon}: mse={report.mse:.6g} "
          f"r2={report.r2:.6g} ({report.predictions_per_second:,.0f} pred/s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    out = Path(args.out)
    tc = _merged_train_config(args)
    archs = [a.strip() for a in args.archs.split(",") if a.strip()]
    bad = [a for a in archs if a not in ARCHITECTURES]
    if bad:
        raise DataError(
            f"unknown architecture(s) {bad}; valid: {', '.join(ARCHITECTURES)}"
        )
    horizons = [int(h) for h in args.horizons.split(",") if h.strip()]
    paths = _collect_csvs(args.data)
    tables = _load_tables(paths, args.fs)

    results = horizon_sweep(tables, archs, horizons, tc, workers=args.workers)

    rows = []
    cell_outputs = []
    for res in results:
        report = res["report"]
        stem = f"cell_{report.model}_h{report.horizon}"
        gio.write_json(out / f"{stem}.json", report.to_dict())
        gio.write_json(out / f"{stem}_history.json", res["history"].to_dict())
        cell_outputs.append(out / f"{stem}.json")
        rows.append(report.table_row())
    gio.write_table_csv(out / "sweep.csv", TABLE_COLUMNS, rows)
    gio.write_table_csv(
        out / "metrics.csv", METRIC_COLUMNS,
        [{k: r[k] for k in METRIC_COLUMNS} for r in rows],
    )
    gio.write_json(out / "sweep.json", [r for r in rows])

    manifest = gio.run_manifest(
        "sweep",
        {**tc.to_dict(), "archs": archs, "horizons": horizons,
         "workers": args.workers},
        inputs=paths,
        outputs=[out / "sweep.csv", out / "metrics.csv", *cell_outputs],
        seeds={"train": tc.seed},
    )
    gio.write_json(out / "manifest.json", manifest)
    print(f"swept {len(rows)} cells; consolidated table at {out/'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    ckpt = gio.read_json(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    W = model.config.window
    doc = gio.read_json(args.scaler)
    for key in ("min", "max", "emg_bandpass", "emg_notch"):
        if key not in doc:
            raise DataError(f"{args.scaler}: missing field {key!r}")
    scaler = ScalerParams.from_dict({"min": doc["min"], "max": doc["max"]})
    if scaler.n_columns != N_EMG_CHANNELS + 1:
        raise DataError(
            f"scaler has {scaler.n_columns} columns, expected {N_EMG_CHANNELS + 1}"
        )
    emg_scaler = scaler.select(range(N_EMG_CHANNELS))
    force_scaler = scaler.select([N_EMG_CHANNELS])
    bp = StreamingFilter(
        FilterCoefficients.from_dict(doc["emg_bandpass"]), N_EMG_CHANNELS
    )
    nt = StreamingFilter(
        FilterCoefficients.from_dict(doc["emg_notch"]), N_EMG_CHANNELS
    )

    in_path = Path(args.input)
    if not in_path.exists():
        raise DataError(f"input file not found: {in_path}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    window = np.zeros((W, N_EMG_CHANNELS))
    filled = 0
    skipped = 0
    emitted = 0
    with in_path.open("r", encoding="utf-8", newline="") as fh, \
            out_path.open("w", encoding="utf-8", newline="") as oh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 1 + N_EMG_CHANNELS or header[0] != "t":
            raise DataError(f"{in_path}: expected a recording CSV header")
        oh.write("t,predicted_force_n\n")
        for lineno, row in enumerate(reader, 2):
            try:
                t = float(row[0])
                x = np.array([float(v) for v in row[1 : 1 + N_EMG_CHANNELS]],
                             dtype=np.float64)
                if x.shape != (N_EMG_CHANNELS,) or not np.all(np.isfinite(x)):
                    raise ValueError("bad channel data")
            except (ValueError, IndexError) as e:
                if args.strict:
                    raise DataError(f"{in_path}:{lineno}: malformed row ({e})") from e
                skipped += 1
                warnings.warn(f"{in_path}:{lineno}: skipping malformed row")
                continue
            filtered = nt.process(bp.process(x[None, :]))[0]
            normalized = minmax_apply(emg_scaler, filtered)
            window[:-1] = window[1:]
            window[-1] = normalized
            filled += 1
            if filled < W:
                continue
            y_norm = model.forward(window)
            if model.config.out_dim != 1:
                y_norm = float(np.asarray(y_norm)[-1])
            y_phys = float(minmax_invert(force_scaler, np.array([y_norm]))[0])
            oh.write(f"{t},{y_phys:.6f}\n")
            emitted += 1
    print(f"predicted {emitted} rows -> {out_path}"
          + (f" ({skipped} malformed rows skipped)" if skipped else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gripforge",
        description="Grip-force prediction from sEMG: preprocessing, four "
                    "small neural nets, and an evaluation harness.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic press/release recordings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--duration", type=float, default=90.0, help="seconds per subject")
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, merge, and normalize recordings")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="recording CSVs or directories of them")
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--emg-band", default="20,95",
                   help="EMG band-pass edges in Hz, 'low,high'")
    p.add_argument("--emg-order", type=int, default=4)
    p.add_argument("--notch", default="50,30", help="'center_hz,Q'")
    p.add_argument("--force-cut", type=float, default=10.0,
                   help="force low-pass cutoff in Hz")
    p.add_argument("--force-order", type=int, default=4)
    p.add_argument("--force-same-filters", action="store_true",
                   help="run the force channel through the EMG filters instead")
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one architecture on processed data")
    p.add_argument("--data", nargs="+", required=True,
                   help="processed CSVs or directories of them")
    p.add_argument("--fs", type=float, default=200.0)
    _add_train_flags(p)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the holdout split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float, default=None)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate a (model x horizon) grid")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--archs", default="mlp,rnn,lstm,gru")
    p.add_argument("--horizons", default="1,3,5")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel worker processes; results are identical to "
                        "a serial sweep")
    _add_train_flags(p)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="stream per-row force predictions from raw CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scaler", required=True,
                   help="scaler.json from preprocess (filters + min/max)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--strict", action="store_true",
                   help="abort on malformed rows instead of skipping")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
