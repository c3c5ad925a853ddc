"""Command-line interface: synthesize data, train, evaluate, predict, explain.

Exit codes are a stable contract: 0 success, 2 usage error, 3 data or
configuration error, 4 numeric failure. Configuration precedence is flags >
config file (``key=value`` lines, ``#`` comments) > built-in defaults. Every
artifact-producing command writes one JSON manifest (config snapshot, seed,
sha256 hashes of input files, output paths, wall-clock timings); manifest
timing fields and the ``seconds`` history column are the only outputs that
vary between identical reruns.

``NOWCAST_THREADS`` caps internal numeric parallelism (0 or unset = auto);
it must be honored before numpy loads, so the heavy imports happen inside
``main``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

PRECIP_INPUT_FRAMES = (6, 12, 18)
PRECIP_LEAD_MINUTES = (30, 60, 90, 120, 180)
CLOUD_INPUT_FRAMES = 4
CLOUD_LEAD_COUNT = 6

_EXIT_USAGE = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4


def _apply_thread_cap() -> None:
    cap = os.environ.get("NOWCAST_THREADS", "").strip()
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_config_file(path: Path) -> dict[str, str]:
    values = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise SystemExit(f"config file {path}: malformed line {raw!r}")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _apply_config_file(args: argparse.Namespace, converters: dict) -> None:
    """Fill argparse Namespace holes (None) from the --config file."""
    if not getattr(args, "config", None):
        return
    values = _parse_config_file(Path(args.config))
    for key, raw in values.items():
        if key not in converters:
            continue
        if getattr(args, key, None) is None:
            conv = converters[key]
            if conv is bool:
                setattr(args, key, _BOOLS[raw.lower()])
            else:
                setattr(args, key, conv(raw))


def _fill_defaults(args: argparse.Namespace, defaults: dict) -> None:
    for key, val in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)


def _require(args, names) -> None:
    from .errors import UsageError
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _refuse_overwrite(paths, force: bool) -> None:
    from .errors import DataError
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise DataError("refusing to overwrite existing output(s) "
                        f"{existing}; pass --force to replace them")


def _write_manifest(path: Path, command: str, snapshot: dict, inputs: dict,
                    outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": snapshot,
        "inputs_sha256": inputs,
        "outputs": [str(o) for o in outputs],
        "seconds": round(time.time() - started, 3),
        "tool_version": _version(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _version() -> str:
    from . import __version__
    return __version__


# -- shared pipeline helpers -----------------------------------------------------

def _window_spec(in_frames: int, lead_minutes, cloud: bool, interval: int):
    from .data import WindowSpec
    from .errors import ConfigurationError
    if cloud:
        if in_frames != CLOUD_INPUT_FRAMES:
            raise ConfigurationError(
                f"cloud setups use --in-frames {CLOUD_INPUT_FRAMES} "
                f"(got {in_frames}); outputs are the next {CLOUD_LEAD_COUNT} frames")
        return WindowSpec(CLOUD_INPUT_FRAMES, tuple(range(1, CLOUD_LEAD_COUNT + 1)))
    if in_frames not in PRECIP_INPUT_FRAMES or lead_minutes not in PRECIP_LEAD_MINUTES:
        grid = ", ".join(f"{i}in/{m}min" for i in PRECIP_INPUT_FRAMES
                         for m in PRECIP_LEAD_MINUTES)
        raise ConfigurationError(
            f"invalid precipitation setup --in-frames {in_frames} "
            f"--lead-minutes {lead_minutes}; valid grid: {grid}")
    if lead_minutes % interval != 0:
        raise ConfigurationError(
            f"lead of {lead_minutes} min is not a whole number of "
            f"{interval}-min frames")
    return WindowSpec(in_frames, (lead_minutes // interval,))


def _lead_minutes_tuple(spec, interval: int) -> tuple[int, ...]:
    return tuple(o * interval for o in spec.target_offsets)


def _assemble(series, spec, select_fraction, scale=None):
    """Chronological splits, rain-gated windows, shared train-split scale."""
    from .data import (WindowDataset, chronological_split, make_windows,
                       normalization_scale, select_rainy)
    splits = chronological_split(series)
    datasets = []
    if scale is None:
        scale = normalization_scale(splits[0])
    for part in splits:
        selected = None if select_fraction is None else \
            select_rainy(part, select_fraction)
        windows = make_windows(part, spec, selected)
        datasets.append(WindowDataset(part, windows, scale))
    return datasets, scale


def _model_display_name(variant: str) -> str:
    return "sar-unet" if variant == "sar" else "smaat-config"


def _checkpoint_extras(spec, series, scale, select_fraction, cloud: bool) -> dict:
    return {
        "input_frames": str(spec.input_frames),
        "target_offsets": ",".join(str(o) for o in spec.target_offsets),
        "interval_minutes": str(series.interval_minutes),
        "unit": series.unit,
        "norm_scale": repr(float(scale)),
        "select_fraction": "" if select_fraction is None else repr(select_fraction),
        "cloud": str(cloud),
    }


def _spec_from_extras(meta: dict):
    from .data import WindowSpec
    from .errors import UsageError
    try:
        spec = WindowSpec(int(meta["input_frames"]),
                          tuple(int(o) for o in meta["target_offsets"].split(",")))
        scale = float(meta["norm_scale"])
        fraction = float(meta["select_fraction"]) if meta["select_fraction"] else None
        interval = int(meta["interval_minutes"])
        unit = meta["unit"]
    except KeyError as e:
        raise UsageError(f"checkpoint is missing training metadata key {e}") from None
    return spec, scale, fraction, interval, unit


def _check_data_compat(meta: dict, series) -> None:
    from .errors import ConfigurationError
    diffs = []
    if int(meta["interval_minutes"]) != series.interval_minutes:
        diffs.append(f"interval_minutes: checkpoint {meta['interval_minutes']} "
                     f"vs data {series.interval_minutes}")
    if meta["unit"] != series.unit:
        diffs.append(f"unit: checkpoint {meta['unit']} vs data {series.unit}")
    if diffs:
        raise ConfigurationError("checkpoint/data mismatch:\n  " + "\n  ".join(diffs))


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    import numpy as np
    from .data import save_nwds, synth_generate
    started = time.time()
    _require(args, ["out"])
    out = Path(args.out)
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    _refuse_overwrite([out], args.force)
    wind = tuple(float(p) for p in args.wind.split(","))
    if len(wind) != 2:
        from .errors import UsageError
        raise UsageError(f"--wind needs DX,DY (px/frame), got {args.wind!r}")
    series = synth_generate(seed=args.seed, n_frames=args.frames,
                            height=args.size, width=args.size,
                            n_blobs=args.blobs, wind=wind, growth=args.growth,
                            jitter=args.jitter,
                            interval_minutes=args.interval)
    if args.binary:
        from .data import FrameSeries
        thresh = float(np.median(series.frames[series.frames > 0])) \
            if (series.frames > 0).any() else 1.0
        series = FrameSeries((series.frames >= thresh).astype("float32"),
                             args.interval, "binary")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_nwds(out, series)
    snapshot = {k: getattr(args, k) for k in
                ("seed", "frames", "size", "blobs", "wind", "growth", "jitter",
                 "interval", "binary")}
    _write_manifest(manifest_path, "synth", snapshot, {}, [out], started)
    print(f"wrote {out} ({args.frames} frames, {args.size}x{args.size})")
    return 0


def cmd_train(args) -> int:
    from .data import load_nwds
    from .model import ModelConfig, build, save_checkpoint
    from .train import TrainConfig, fit, load_best_into
    started = time.time()
    _require(args, ["data", "out_dir"])
    data_path = Path(args.data)
    out_dir = Path(args.out_dir)
    series = load_nwds(data_path)
    cloud = bool(args.cloud)
    if cloud and args.in_frames is None:
        args.in_frames = CLOUD_INPUT_FRAMES
    _require(args, ["in_frames"] if cloud else ["in_frames", "lead_minutes"])
    spec = _window_spec(args.in_frames, args.lead_minutes, cloud,
                        series.interval_minutes)
    fraction = None if cloud and args.select_fraction is None else \
        (0.5 if args.select_fraction is None else args.select_fraction)
    artifacts = [out_dir / "model.ckpt", out_dir / "history.csv",
                 out_dir / "manifest.json"]
    _refuse_overwrite(artifacts, args.force)
    (train_ds, val_ds, _test_ds), scale = _assemble(series, spec, fraction)
    from .errors import DataError
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError("window assembly produced an empty train or val split; "
                        "try more frames or a lower --select-fraction")
    out_ch = len(spec.target_offsets)
    config = ModelConfig(in_channels=spec.input_frames, out_channels=out_ch,
                         base_channels=args.base_channels, variant=args.variant,
                         cbam_reduction=args.cbam_reduction)
    model = build(config, seed=args.seed)
    tc = TrainConfig(max_epochs=args.max_epochs, batch_size=args.batch_size,
                     seed=args.seed, early_stop_patience=args.early_stop_patience)
    result = fit(model, train_ds, val_ds, tc, out_dir=out_dir)
    load_best_into(model, result)
    extras = _checkpoint_extras(spec, series, scale, fraction, cloud)
    save_checkpoint(out_dir / "model.ckpt", model, extras)
    snapshot = {k: getattr(args, k) for k in
                ("variant", "in_frames", "lead_minutes", "cloud", "base_channels",
                 "cbam_reduction", "seed", "max_epochs", "batch_size",
                 "early_stop_patience", "select_fraction")}
    snapshot["norm_scale"] = scale
    snapshot["best_epoch"] = result.best_epoch
    snapshot["best_val_mse"] = result.best_val_loss
    _write_manifest(out_dir / "manifest.json", "train", snapshot,
                    {str(data_path): _sha256(data_path)},
                    [out_dir / "model.ckpt", out_dir / "history.csv"], started)
    print(f"trained {_model_display_name(args.variant)}: best epoch "
          f"{result.best_epoch}, val MSE {result.best_val_loss:.6g}")
    print(f"wrote {out_dir / 'model.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import load_nwds
    from .errors import UsageError
    from .metrics import (EvalSetup, evaluate_setup, render_report_table,
                          write_per_lead_csv, write_report_csv)
    from .model import load_checkpoint
    started = time.time()
    _require(args, ["data", "out_dir"])
    data_path = Path(args.data)
    out_dir = Path(args.out_dir)
    series = load_nwds(data_path)
    inputs = {str(data_path): _sha256(data_path)}

    model = None
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        model, meta = load_checkpoint(ckpt)
        _check_data_compat(meta, series)
        spec, scale, fraction, interval, unit = _spec_from_extras(meta)
        inputs[str(ckpt)] = _sha256(ckpt)
    else:
        if args.baseline != "persistence":
            raise UsageError("evaluation without --checkpoint needs "
                             "--baseline persistence")
        cloud = bool(args.cloud)
        if cloud and args.in_frames is None:
            args.in_frames = CLOUD_INPUT_FRAMES
        _require(args, ["in_frames"] if cloud else ["in_frames", "lead_minutes"])
        spec = _window_spec(args.in_frames, args.lead_minutes, cloud,
                            series.interval_minutes)
        fraction = None if cloud and args.select_fraction is None else \
            (0.5 if args.select_fraction is None else args.select_fraction)
        scale = None
        unit = series.unit

    artifacts = [out_dir / "report.csv", out_dir / "report.txt",
                 out_dir / "per_lead.csv", out_dir / "manifest.json"]
    _refuse_overwrite(artifacts, args.force)
    (_, _, test_ds), scale = _assemble(series, spec, fraction, scale=scale)
    if len(test_ds) == 0:
        from .errors import DataError
        raise DataError("no evaluation windows in the test split")
    leads = _lead_minutes_tuple(spec, series.interval_minutes)
    input_minutes = spec.input_frames * series.interval_minutes

    def setup_for(name):
        return EvalSetup(model_name=name, input_minutes=input_minutes,
                         lead_minutes=leads, unit=series.unit, scale=scale,
                         interval_minutes=series.interval_minutes,
                         threshold_mm_per_h=args.threshold)

    reports = []
    if model is not None:
        reports.append(evaluate_setup(
            model, test_ds, setup_for(_model_display_name(model.config.variant)),
            batch_size=args.batch_size))
    if args.baseline == "persistence":
        reports.append(evaluate_setup("persistence", test_ds,
                                      setup_for("persistence"),
                                      batch_size=args.batch_size))
    if not reports:
        raise UsageError("nothing to evaluate: give --checkpoint and/or "
                         "--baseline persistence")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / "report.csv", reports)
    write_per_lead_csv(out_dir / "per_lead.csv", reports)
    table = render_report_table(reports)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    snapshot = {"threshold": args.threshold, "batch_size": args.batch_size,
                "baseline": args.baseline, "norm_scale": scale}
    _write_manifest(out_dir / "manifest.json", "evaluate", snapshot, inputs,
                    artifacts[:3], started)
    sys.stdout.write(table)
    return 0


def cmd_predict(args) -> int:
    from .data import FrameSeries, load_nwds, make_windows, save_nwds, select_rainy
    from .model import load_checkpoint
    from .tensor import Tensor4
    import numpy as np
    started = time.time()
    _require(args, ["checkpoint", "data", "out"])
    ckpt = Path(args.checkpoint)
    data_path = Path(args.data)
    out = Path(args.out)
    _refuse_overwrite([out], args.force)
    model, meta = load_checkpoint(ckpt)
    series = load_nwds(data_path)
    _check_data_compat(meta, series)
    spec, scale, fraction, _, _ = _spec_from_extras(meta)
    selected = None if fraction is None else select_rainy(series, fraction)
    windows = make_windows(series, spec, selected, strict=True)
    from .errors import UsageError
    if not 0 <= args.window_index < len(windows):
        raise UsageError(f"--window-index {args.window_index} outside "
                         f"[0, {len(windows)})")
    inp_idx, _ = windows[args.window_index]
    x = series.frames[list(inp_idx)][None] / np.float32(scale)
    pred, _ = model.forward(Tensor4(x, _checked=True))
    frames = np.maximum(pred.data[0], 0.0) * np.float32(scale)  # clamp: rain >= 0
    out.parent.mkdir(parents=True, exist_ok=True)
    save_nwds(out, FrameSeries(frames, series.interval_minutes, series.unit))
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "predict",
                    {"window_index": args.window_index},
                    {str(ckpt): _sha256(ckpt), str(data_path): _sha256(data_path)},
                    [out], started)
    print(f"wrote {out} ({frames.shape[0]} predicted frame(s))")
    return 0


def cmd_explain(args) -> int:
    from .data import load_nwds, make_windows, select_rainy
    from .errors import UsageError
    from .gradcam import (ExplainTarget, explain_suite, grad_cam,
                          save_heatmap_nwds, suite_targets, write_ppm)
    from .model import load_checkpoint
    from .tensor import Tensor4
    import numpy as np
    started = time.time()
    _require(args, ["checkpoint", "data", "out_dir"])
    ckpt = Path(args.checkpoint)
    data_path = Path(args.data)
    out_dir = Path(args.out_dir)
    model, meta = load_checkpoint(ckpt)
    series = load_nwds(data_path)
    _check_data_compat(meta, series)
    spec, scale, fraction, interval, unit = _spec_from_extras(meta)
    selected = None if fraction is None else select_rainy(series, fraction)
    windows = make_windows(series, spec, selected, strict=True)
    if not 0 <= args.input_window < len(windows):
        raise UsageError(f"--input-window {args.input_window} outside "
                         f"[0, {len(windows)})")
    inp_idx, _ = windows[args.input_window]
    x = Tensor4(series.frames[list(inp_idx)][None] / np.float32(scale),
                _checked=True)
    klass = "cloud" if unit == "binary" else "rain"
    kw = dict(unit=unit, scale=scale, interval_minutes=interval,
              threshold_mm_per_h=args.threshold)

    if args.targets == "all":
        maps = explain_suite(model, x, klass=klass, **kw)
    else:
        names = [n.strip() for n in args.targets.split(",") if n.strip()]
        if not names:
            raise UsageError("--targets needs 'all' or a comma-separated name list")
        maps = [grad_cam(model, x, ExplainTarget(n, klass), **kw) for n in names]

    index_path = out_dir / "index.csv"
    files = [out_dir / (hm.target.layer.replace(".", "_") + ext)
             for hm in maps for ext in (".nwds", ".ppm")]
    _refuse_overwrite(files + [index_path], args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = _suite_grid_positions(model) if args.targets == "all" else {}
    with open(index_path, "w", encoding="utf-8") as f:
        f.write("target,section,row,col,file,raw_max\n")
        outputs = [index_path]
        for hm in maps:
            stem = hm.target.layer.replace(".", "_")
            nwds_path = out_dir / f"{stem}.nwds"
            ppm_path = out_dir / f"{stem}.ppm"
            save_heatmap_nwds(nwds_path, hm)
            write_ppm(ppm_path, hm)
            outputs += [nwds_path, ppm_path]
            section, row, col = grid.get(hm.target.layer, ("custom", -1, -1))
            f.write(f"{hm.target.layer},{section},{row},{col},"
                    f"{nwds_path.name},{hm.raw_max!r}\n")
    _write_manifest(out_dir / "manifest.json",
                    "explain", {"targets": args.targets,
                                "input_window": args.input_window,
                                "threshold": args.threshold},
                    {str(ckpt): _sha256(ckpt), str(data_path): _sha256(data_path)},
                    outputs, started)
    print(f"wrote {len(maps)} heatmap(s) to {out_dir}")
    return 0


def _suite_grid_positions(model) -> dict[str, tuple[str, int, int]]:
    """Figure layout: encoder rows are depths 0..4 with columns (block, dsc,
    shortcut, cbam); decoder rows start at the bottom level (depth 3)."""
    grid = {}
    for d in range(5):
        for col, suffix in enumerate(("block", "block.dsc_path",
                                      "block.shortcut", "cbam")):
            grid[f"enc{d}.{suffix}"] = ("encoder", d, col)
    for row, d in enumerate((3, 2, 1, 0)):
        for col, suffix in enumerate(("block", "block.dsc_path", "block.shortcut")):
            grid[f"dec{d}.{suffix}"] = ("decoder", row, col)
    return grid


# -- parser ----------------------------------------------------------------------

_SYNTH_DEFAULTS = dict(seed=0, frames=200, size=96, blobs=3, wind="1,0",
                       growth=1.0, jitter=0.0, interval=5, binary=False,
                       force=False)
_TRAIN_DEFAULTS = dict(variant="sar", base_channels=4, cbam_reduction=4,
                       seed=0, max_epochs=200, batch_size=6,
                       early_stop_patience=15, cloud=False, force=False)
_EVAL_DEFAULTS = dict(baseline=None, threshold=0.5, batch_size=6, cloud=False,
                      force=False)
_EXPLAIN_DEFAULTS = dict(targets="all", input_window=0, threshold=0.5, force=False)
_PREDICT_DEFAULTS = dict(window_index=0, force=False)

_CONVERTERS = {
    "seed": int, "frames": int, "size": int, "blobs": int, "wind": str,
    "growth": float, "jitter": float, "interval": int, "binary": bool,
    "variant": str, "in_frames": int, "lead_minutes": int, "cloud": bool,
    "base_channels": int, "cbam_reduction": int, "max_epochs": int,
    "batch_size": int, "early_stop_patience": int, "select_fraction": float,
    "baseline": str, "threshold": float, "targets": str, "input_window": int,
    "window_index": int, "out": str, "out_dir": str, "data": str,
    "checkpoint": str,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarunet",
        description="Nowcasting toolkit: synthetic data, training, evaluation, "
                    "prediction, and Grad-CAM heatmaps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file (flags win)")
        p.add_argument("--force", action="store_const", const=True, default=None,
                       help="overwrite existing outputs")

    p = sub.add_parser("synth", help="generate a synthetic NWDS dataset")
    add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int, help="square frame side, >= 32")
    p.add_argument("--blobs", type=int)
    p.add_argument("--wind", help="DX,DY in px/frame")
    p.add_argument("--growth", type=float)
    p.add_argument("--jitter", type=float, help="per-frame displacement noise")
    p.add_argument("--interval", type=int, help="minutes between frames")
    p.add_argument("--binary", action="store_const", const=True, default=None,
                   help="threshold to a binary cloud-style dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth, _defaults=_SYNTH_DEFAULTS)

    p = sub.add_parser("train", help="train a model on an NWDS dataset")
    add_common(p)
    p.add_argument("--data")
    p.add_argument("--variant", choices=("sar", "smaat"))
    p.add_argument("--in-frames", type=int, dest="in_frames")
    p.add_argument("--lead-minutes", type=int, dest="lead_minutes")
    p.add_argument("--cloud", action="store_const", const=True, default=None)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--cbam-reduction", type=int, dest="cbam_reduction")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--early-stop-patience", type=int, dest="early_stop_patience")
    p.add_argument("--select-fraction", type=float, dest="select_fraction")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train, _defaults=_TRAIN_DEFAULTS)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint and/or persistence")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--baseline", choices=("persistence",))
    p.add_argument("--threshold", type=float, help="binarization threshold, mm/h")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--in-frames", type=int, dest="in_frames")
    p.add_argument("--lead-minutes", type=int, dest="lead_minutes")
    p.add_argument("--cloud", action="store_const", const=True, default=None)
    p.add_argument("--select-fraction", type=float, dest="select_fraction")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_evaluate, _defaults=_EVAL_DEFAULTS)

    p = sub.add_parser("predict", help="write model predictions for one window")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--window-index", type=int, dest="window_index")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict, _defaults=_PREDICT_DEFAULTS)

    p = sub.add_parser("explain", help="Grad-CAM heatmaps for a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--input-window", type=int, dest="input_window")
    p.add_argument("--targets", help="'all' or comma-separated layer names")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_explain, _defaults=_EXPLAIN_DEFAULTS)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    from .errors import (ConfigurationError, DataError, DimensionError,
                         NumericError, UsageError)
    try:
        _apply_config_file(args, _CONVERTERS)
        _fill_defaults(args, args._defaults)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_USAGE
    except (ConfigurationError, DataError, DimensionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
