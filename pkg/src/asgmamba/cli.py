"""Command-line entry point.

Subcommands: train, eval, forecast, ablate, bench, synth. Settings resolve as
built-in defaults < ``--config`` file (``key = value`` lines, ``#`` comments)
< explicit flags. The resolved settings are written to ``manifest.txt`` in
the output directory before any work starts, in the same format, so
``--config <out>/manifest.txt`` replays a run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DataError, Scaler, chronological_split, load_csv, make_windows, save_csv, synth_generate
from .io_utils import atomic_write_text, write_csv
from .model import VARIANTS, ASGMamba, ModelConfig, ablate
from .training import (NumericalError, TrainConfig, benchmark_scaling, evaluate, evaluate_naive, predict,
                       train)

log = logging.getLogger("asgmamba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_HEADER = ["dataset", "horizon", "variant", "seed", "mse", "mae"]

# key -> (type, default); the flat settings namespace shared by flags, config files and manifests
SETTINGS: dict[str, tuple[type, object]] = {
    "data": (str, None),
    "look_back": (int, 96),
    "horizon": (int, 96),
    "d_model": (int, 128),
    "patch_sizes": (str, "8,16,32"),
    "d_state": (int, 16),
    "d_conv": (int, 4),
    "expand": (int, 2),
    "dropout": (float, 0.1),
    "k_freq": (int, 3),
    "depth": (int, 1),
    "residual": (str, "input"),
    "prenorm": (bool, True),
    "revin_affine": (bool, True),
    "dtype": (str, "float64"),
    "variant": (str, "full"),
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-5),
    "decoupled": (bool, True),
    "batch_size": (int, 32),
    "max_epochs": (int, 10),
    "patience": (int, 5),
    "seed": (int, 0),
    "seeds": (int, 1),
    "split": (str, "0.7,0.1,0.2"),
    "ett_split": (bool, False),
    "steps_per_hour": (int, 1),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(key: str, value):
    kind, _ = SETTINGS[key]
    if value is None:
        return None
    try:
        return _parse_bool(value) if kind is bool else kind(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; unknown keys are a usage error."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_manifest(settings: dict, command: str) -> str:
    lines = [f"# asgmamba run manifest ({command})"]
    for key in SETTINGS:
        value = settings.get(key)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def resolve_settings(args, keys) -> dict:
    settings = {k: SETTINGS[k][1] for k in keys}
    if getattr(args, "config", None):
        settings.update({k: v for k, v in read_config_file(args.config).items() if k in keys})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = _coerce(k, v)
    return settings


def _patch_sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise UsageError(f"bad patch size list {text!r}") from None


def model_config_from(settings: dict, n_vars: int) -> ModelConfig:
    try:
        cfg = ModelConfig(
            look_back=settings["look_back"], horizon=settings["horizon"], n_vars=n_vars,
            d_model=settings["d_model"], patch_sizes=_patch_sizes(settings["patch_sizes"]),
            d_state=settings["d_state"], d_conv=settings["d_conv"], expand=settings["expand"],
            dropout=settings["dropout"], k_freq=settings["k_freq"], depth=settings["depth"],
            residual=settings["residual"], prenorm=settings["prenorm"],
            revin_affine=settings["revin_affine"], dtype=settings["dtype"],
        )
        return ablate(cfg, settings.get("variant", "full"))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def train_config_from(settings: dict) -> TrainConfig:
    return TrainConfig(lr=settings["lr"], weight_decay=settings["weight_decay"], decoupled=settings["decoupled"],
                       batch_size=settings["batch_size"], max_epochs=settings["max_epochs"],
                       patience=settings["patience"])


def _split_ranges(settings: dict, length: int):
    if settings.get("ett_split"):
        return chronological_split(length, canonical_ett=True, steps_per_hour=settings["steps_per_hour"])
    try:
        ratios = tuple(float(r) for r in str(settings["split"]).split(","))
    except ValueError:
        raise UsageError(f"bad split ratios {settings['split']!r}") from None
    if len(ratios) != 3:
        raise UsageError("split needs three ratios: train,val,test")
    return chronological_split(length, ratios)


def _load_windows(settings: dict, horizon: int, look_back: int):
    if not settings.get("data"):
        raise UsageError("--data is required")
    series = load_csv(settings["data"])
    ranges = _split_ranges(settings, series.length)
    return series, ranges, make_windows(series, ranges, look_back, horizon)


def _write_manifest(out_dir: Path, settings: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "manifest.txt", format_manifest(settings, command))


def _fmt(x: float) -> str:
    return repr(float(x))


def _seed_list(settings: dict) -> list[int]:
    return [settings["seed"] + k for k in range(max(1, settings["seeds"]))]


def _checkpoint_meta(cfg: ModelConfig, tcfg: TrainConfig, scaler: Scaler, series, ranges, settings, seed) -> dict:
    return {
        "model": cfg.to_dict(), "train": tcfg.to_dict(), "scaler": scaler.to_dict(),
        "variate_names": list(series.variate_names), "split": {k: list(v) for k, v in ranges.as_dict().items()},
        "settings": {k: settings.get(k) for k in SETTINGS}, "seed": seed,
    }


def _train_variant(settings: dict, variant: str, series, ranges, windows, out_dir: Path, tag: str = ""):
    """Train every seed of one variant; returns metric rows."""
    cfg = model_config_from({**settings, "variant": variant}, series.n_vars)
    tcfg = train_config_from(settings)
    dataset = Path(settings["data"]).stem
    rows = []
    seeds = _seed_list(settings)
    for seed in seeds:
        model, run = train(cfg, windows, seed=seed, train_config=tcfg)
        res = evaluate(model, windows["test"])
        rows.append([dataset, cfg.horizon, variant, seed, _fmt(res.mse), _fmt(res.mae)])
        suffix = tag + (f"_seed{seed}" if len(seeds) > 1 else "")
        T.save_checkpoint(out_dir / f"checkpoint{suffix}.asgm", model.params,
                          _checkpoint_meta(cfg, tcfg, windows["train"].scaler, series, ranges, settings, seed))
        write_csv(out_dir / f"loss_trace{suffix}.csv", ["epoch", "train_loss", "val_loss"],
                  [[e + 1, _fmt(a), _fmt(b)] for e, (a, b) in enumerate(zip(run.train_loss, run.val_loss))])
        print(f"{variant} seed={seed}: test mse={res.mse:.6f} mae={res.mae:.6f} "
              f"(epochs={run.epochs_run}, best={run.best_epoch + 1})")
    return rows


def cmd_train(args) -> int:
    settings = resolve_settings(args, SETTINGS)
    if settings["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {settings['variant']!r}; valid: {', '.join(VARIANTS)}")
    out_dir = Path(args.out_dir)
    _write_manifest(out_dir, settings, "train")
    series, ranges, windows = _load_windows(settings, settings["horizon"], settings["look_back"])
    rows = _train_variant(settings, settings["variant"], series, ranges, windows, out_dir)
    if len(rows) > 1:
        rows.append([rows[0][0], rows[0][1], rows[0][2], "mean",
                     _fmt(np.mean([float(r[4]) for r in rows])), _fmt(np.mean([float(r[5]) for r in rows]))])
    write_csv(out_dir / "metrics.csv", METRIC_HEADER, rows)
    naive = evaluate_naive(windows["test"])
    print(f"naive last-value baseline: mse={naive.mse:.6f} mae={naive.mae:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    settings = resolve_settings(args, SETTINGS)
    out_dir = Path(args.out_dir)
    _write_manifest(out_dir, settings, "ablate")
    series, ranges, windows = _load_windows(settings, settings["horizon"], settings["look_back"])
    rows = []
    for variant in VARIANTS:
        rows.extend(_train_variant(settings, variant, series, ranges, windows, out_dir, tag=f"_{variant}"))
    write_csv(out_dir / "ablation.csv", METRIC_HEADER, rows)
    return EXIT_OK


def _load_model(path) -> tuple[ASGMamba, dict]:
    try:
        arrays, meta = T.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None
    model = ASGMamba(ModelConfig.from_dict(meta["model"]), params=arrays)
    return model, meta


def emit_plot_data(prediction: np.ndarray, truth: np.ndarray, variate: int, path) -> None:
    """Write (step, truth, prediction) rows for one variate of one window."""
    prediction, truth = np.asarray(prediction), np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ValueError(f"prediction shape {prediction.shape} differs from truth {truth.shape}")
    if not 0 <= variate < truth.shape[-1]:
        raise ValueError(f"variate index {variate} out of range for {truth.shape[-1]} variates")
    write_csv(path, ["step", "truth", "prediction"],
              [[i, _fmt(truth[i, variate]), _fmt(prediction[i, variate])] for i in range(truth.shape[0])])


def dump_gates(model: ASGMamba, window: np.ndarray, variate: int, patch_len: int, path) -> None:
    """Per-patch band shares and mean gate for one variate of one window."""
    cfg = model.config
    if patch_len not in cfg.patch_sizes:
        raise UsageError(f"branch P={patch_len} not in model patch sizes {cfg.patch_sizes}")
    if not 0 <= variate < cfg.n_vars:
        raise UsageError(f"variate index {variate} out of range for {cfg.n_vars} variates")
    with T.no_grad():
        model(window[None])
    spectra = model.last_spectra[patch_len][variate]
    gates = model.last_gates[patch_len][variate]
    names = ["low", "mid", "high"] if cfg.k_freq == 3 else [f"band{k}" for k in range(cfg.k_freq)]
    write_csv(path, ["patch_index", *names, "mean_gate"],
              [[i, *(_fmt(v) for v in spectra[i]), _fmt(gates[i])] for i in range(len(gates))])


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = model.config
    if args.horizon is not None and args.horizon != cfg.horizon:
        raise UsageError(f"--horizon {args.horizon} differs from the checkpoint horizon {cfg.horizon}")
    settings = dict(meta.get("settings", {}))
    settings["data"] = args.data
    out_dir = Path(args.out_dir)
    _write_manifest(out_dir, settings, "eval")
    series, _, windows = _load_windows(settings, cfg.horizon, cfg.look_back)
    if series.n_vars != cfg.n_vars:
        raise DataError(f"data has {series.n_vars} variates, checkpoint expects {cfg.n_vars}")
    test = windows["test"]
    res = evaluate(model, test, raw=True)
    variant = settings.get("variant", "full")
    write_csv(out_dir / "metrics.csv", METRIC_HEADER,
              [[Path(args.data).stem, cfg.horizon, variant, meta.get("seed", 0), _fmt(res.mse), _fmt(res.mae)]])
    write_csv(out_dir / "per_horizon.csv", ["step", "mse", "mae"],
              [[i + 1, _fmt(a), _fmt(b)] for i, (a, b) in enumerate(zip(res.mse_per_step, res.mae_per_step))])
    print(f"test mse={res.mse:.6f} mae={res.mae:.6f} (raw scale mse={res.raw_mse:.6f} mae={res.raw_mae:.6f})")
    w = args.window if args.window is not None else len(test) - 1
    if not 0 <= w < len(test):
        raise UsageError(f"window index {w} out of range for {len(test)} test windows")
    if args.plot_out:
        pred = predict(model, test.inputs[w:w + 1])[0]
        try:
            emit_plot_data(pred, test.targets[w], args.variate, args.plot_out)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.gate_dump:
        dump_gates(model, test.inputs[w], args.variate, args.dump_branch, args.gate_dump)
    return EXIT_OK


def cmd_forecast(args) -> int:
    model, meta = _load_model(args.checkpoint)
    cfg = model.config
    series = load_csv(args.data)
    if series.n_vars != cfg.n_vars:
        raise DataError(f"data has {series.n_vars} variates, checkpoint expects {cfg.n_vars}")
    if series.length < cfg.look_back:
        raise DataError(f"need at least {cfg.look_back} rows to forecast, got {series.length}")
    scaler = Scaler.from_dict(meta["scaler"])
    window = scaler.transform(series.values[-cfg.look_back:])
    pred = scaler.inverse(predict(model, window[None])[0])
    names = meta.get("variate_names") or series.variate_names
    write_csv(args.out, names, [[_fmt(v) for v in row] for row in pred])
    print(f"wrote {cfg.horizon}-step forecast to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    keys = [k for k in SETTINGS if k not in ("data",)]
    settings = resolve_settings(args, keys)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --lengths {args.lengths!r}") from None
    if not lengths or lengths != sorted(lengths):
        raise UsageError("--lengths must be ascending")
    settings["look_back"] = lengths[0]
    cfg = model_config_from(settings, args.channels)
    if min(lengths) < max(cfg.patch_sizes):
        raise UsageError("every length must be at least the largest patch size")
    out_dir = Path(args.out_dir)
    _write_manifest(out_dir, settings, "bench")
    rows = benchmark_scaling(cfg, lengths, args.reps, batch=args.batch, seed=settings["seed"])
    out = args.out or out_dir / "bench.csv"
    write_csv(out, ["L", "forward_ms", "peak_bytes", "time_ratio", "memory_ratio", "reps"],
              [[r.look_back, f"{r.forward_ms:.4f}", r.peak_bytes,
                "" if r.time_ratio is None else f"{r.time_ratio:.4f}",
                "" if r.memory_ratio is None else f"{r.memory_ratio:.4f}", len(r.timings_ms)] for r in rows])
    for r in rows:
        ratio = "" if r.time_ratio is None else f" ratio={r.time_ratio:.3f}"
        print(f"L={r.look_back}: {r.forward_ms:.2f} ms, peak {r.peak_bytes} B{ratio}")
    return EXIT_OK


def cmd_synth(args) -> int:
    series = synth_generate(args.kind, args.length, args.channels, args.snr_db, args.seed)
    save_csv(args.out, series)
    print(f"wrote {series.length} rows x {series.n_vars} channels to {args.out}")
    return EXIT_OK


def _add_settings_flags(p: argparse.ArgumentParser, skip=()) -> None:
    for key, (kind, default) in SETTINGS.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, default=None, metavar="BOOL",
                           help=f"true/false (default {str(default).lower()})")
        else:
            p.add_argument(flag, dest=key, type=str, default=None, help=f"(default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asgmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        _add_settings_flags(p)
        p.add_argument("--config")
        p.add_argument("--out-dir", default=f"runs/{name}")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out-dir", default="runs/eval")
    p.add_argument("--plot-out")
    p.add_argument("--gate-dump")
    p.add_argument("--dump-branch", type=int, default=16)
    p.add_argument("--variate", type=int, default=0)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("bench")
    _add_settings_flags(p, skip=("data", "look_back"))
    p.add_argument("--config")
    p.add_argument("--lengths", default="384,768,1536")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--channels", type=int, default=7)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--out-dir", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth")
    p.add_argument("--kind", default="sine")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--snr-db", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
