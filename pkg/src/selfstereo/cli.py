"""Command-line interface: train / predict / eval / viz over image files.

Configuration precedence is command-line flag > config file > built-in
default. Config files are flat UTF-8 "key = value" lines with "#" comments.
Exit codes: 0 ok, 2 usage or input error, 3 training abort, 4 undefined
metric. The environment variable SADA_THREADS caps the numeric worker
thread count (0 = auto); it must be set before the process starts to take
effect.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAIN_ABORT = 3
EXIT_METRIC_UNDEFINED = 4

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}

# key -> (target dataclass field group, python type)
CONFIG_KEYS: dict[str, type] = {
    # training loop
    "lr": float,
    "margin": float,
    "batch_size": int,
    "batches_per_epoch": int,
    "max_epochs": int,
    "patience": int,
    "dmax": int,
    "seed": int,
    "epoch0_mode": str,
    "checkpoint_every": int,
    # sampler
    "patch_size": int,
    "neg_offset_min": int,
    "neg_offset_max": int,
    # consistency check
    "threshold": float,
    # matcher
    "mode": str,
    # sub-pixel refinement
    "subpixel_variant": str,
    "clamp_to_half": bool,
    # metrics
    "tau": float,
}

_TRAIN_KEYS = (
    "lr",
    "margin",
    "batch_size",
    "batches_per_epoch",
    "max_epochs",
    "patience",
    "dmax",
    "seed",
    "epoch0_mode",
    "checkpoint_every",
)
_SAMPLER_KEYS = ("patch_size", "batch_size", "neg_offset_min", "neg_offset_max", "seed")


class ConfigError(ValueError):
    pass


def _apply_thread_cap() -> None:
    raw = os.environ.get("SADA_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SADA_THREADS must be an integer, got {raw!r}")
    if n <= 0:  # 0 = auto
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(n)


def parse_config_file(path: str | Path) -> dict:
    """Parse "key = value" lines; unknown keys and bad values are rejected."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw_value, path, lineno)
    return values


def _coerce(key: str, raw: str, path, lineno: int):
    target = CONFIG_KEYS[key]
    try:
        if target is bool:
            lowered = raw.lower()
            if lowered in _BOOL_TRUE:
                return True
            if lowered in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return target(raw)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for key {key!r}")


def merge_config(defaults: dict, config: dict, flags: dict) -> dict:
    """flag > config file > default."""
    merged = dict(defaults)
    merged.update({k: v for k, v in config.items() if k in merged})
    merged.update({k: v for k, v in flags.items() if v is not None and k in merged})
    return merged


def _read_pairs_file(path: Path) -> list[tuple[str, str]]:
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'left<TAB>right', got {line!r}")
        left, _, right = line.partition("\t")
        entries.append((left.strip(), right.strip()))
    if not entries:
        raise ConfigError(f"{path}: no stereo pairs listed")
    return entries


def cmd_train(args: argparse.Namespace) -> int:
    from dataclasses import asdict

    from . import imgio
    from .consistency import ConsistencyConfig
    from .sampler import SamplerConfig
    from .trainer import TrainConfig, TrainingAbortError, fit

    pair_paths = _read_pairs_file(Path(args.pairs))
    pairs = [(imgio.load_gray(l), imgio.load_gray(r)) for l, r in pair_paths]

    config = parse_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in CONFIG_KEYS}
    defaults = asdict(TrainConfig())
    defaults.update({k: v for k, v in asdict(SamplerConfig()).items() if k in _SAMPLER_KEYS})
    defaults["threshold"] = ConsistencyConfig().threshold
    merged = merge_config(defaults, config, flags)

    train_cfg = TrainConfig(**{k: merged[k] for k in _TRAIN_KEYS})
    sampler_cfg = SamplerConfig(**{k: merged[k] for k in _SAMPLER_KEYS})
    check_cfg = ConsistencyConfig(threshold=merged["threshold"])

    out_dir = Path(args.out)
    try:
        state = fit(pairs, train_cfg, sampler_cfg, check_cfg, out_dir=out_dir)
    except TrainingAbortError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN_ABORT
    for i, result in enumerate(state.pseudo_gt):
        imgio.write_pfm(result.sparse, out_dir / f"pseudo_gt_{i:03d}.pfm")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    from . import imgio
    from .consistency import ConsistencyConfig, lr_check
    from .matcher import MODE_TRAINED, MatchConfig, build_cost_volume, wta_disparity
    from .model import extract_features, load_model, normalize_image
    from .postproc import SubpixelConfig, subpixel_refine

    config = parse_config_file(args.config) if args.config else {}
    left = imgio.load_gray(args.left)
    right = imgio.load_gray(args.right)
    if left.shape != right.shape:
        raise ConfigError(f"image sizes differ: {left.shape} vs {right.shape}")
    model, _ = load_model(args.weights)

    dmax = args.dmax if args.dmax is not None else config.get("dmax", 64)
    mode = config.get("mode", MODE_TRAINED)
    match_cfg = MatchConfig(dmax=dmax, mode=mode)
    head = model.head if match_cfg.mode == MODE_TRAINED else None

    f_left = extract_features(normalize_image(left), model.extractor, mode="same")
    f_right = extract_features(normalize_image(right), model.extractor, mode="same")
    vol_left = build_cost_volume(f_left, f_right, match_cfg, head=head, direction="left")
    disp = wta_disparity(vol_left)

    if args.lr_check:
        vol_right = build_cost_volume(f_right, f_left, match_cfg, head=head, direction="right")
        d_right = wta_disparity(vol_right)
        check_cfg = ConsistencyConfig(threshold=config.get("threshold", 1.1))
        disp = lr_check(disp, d_right, check_cfg).sparse
    if args.subpixel:
        sub_cfg = SubpixelConfig(
            variant=config.get("subpixel_variant", SubpixelConfig().variant),
            clamp_to_half=config.get("clamp_to_half", True),
        )
        disp = subpixel_refine(vol_left, disp, sub_cfg)
    imgio.write_pfm(disp, args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from . import imgio
    from .postproc import MetricsConfig, completion, point_error

    pred = imgio.read_pfm(args.pred)
    gt = imgio.read_pfm(args.gt)
    if pred.values.shape != gt.values.shape:
        raise ConfigError(f"map sizes differ: {pred.values.shape} vs {gt.values.shape}")
    taus = []
    for token in args.tau.split(","):
        token = token.strip()
        if token:
            taus.append(float(token))
    if not taus:
        raise ConfigError("empty tau list")
    print("metric,tau,value")
    for tau in taus:
        value = point_error(pred, gt, MetricsConfig(tau=tau))
        print(f"point_error,{tau:g},{value:.6g}")
    print(f"completion,,{completion(pred, gt):.6g}")
    return EXIT_OK


def cmd_viz(args: argparse.Namespace) -> int:
    from . import imgio

    dmap = imgio.read_pfm(args.pfm)
    imgio.render_colormap(dmap, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfstereo",
        description="Self-supervised stereo matching: train, predict, evaluate, visualize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a list of rectified stereo pairs")
    p_train.add_argument("pairs", help="file with one 'left<TAB>right' image path pair per line")
    p_train.add_argument("out", help="output directory (checkpoints, convergence.csv, pseudo-GT PFMs)")
    p_train.add_argument("--config", help="key = value configuration file")
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--margin", type=float)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int)
    p_train.add_argument("--max-epochs", dest="max_epochs", type=int)
    p_train.add_argument("--patience", type=int)
    p_train.add_argument("--dmax", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epoch0-mode", dest="epoch0_mode")
    p_train.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p_train.add_argument("--patch-size", dest="patch_size", type=int)
    p_train.add_argument("--neg-offset-min", dest="neg_offset_min", type=int)
    p_train.add_argument("--neg-offset-max", dest="neg_offset_max", type=int)
    p_train.add_argument("--threshold", type=float)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="predict a disparity map for one pair")
    p_pred.add_argument("left")
    p_pred.add_argument("right")
    p_pred.add_argument("--weights", required=True, help="checkpoint file")
    p_pred.add_argument("--out", required=True, help="output PFM path")
    p_pred.add_argument("--lr-check", dest="lr_check", action="store_true", help="mask inconsistent pixels")
    p_pred.add_argument("--subpixel", action="store_true", help="refine disparities to sub-pixel")
    p_pred.add_argument("--dmax", type=int)
    p_pred.add_argument("--config", help="key = value configuration file")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="compare a predicted PFM against ground truth")
    p_eval.add_argument("pred")
    p_eval.add_argument("gt")
    p_eval.add_argument("--tau", default="1,2,3,4", help="comma-separated point-error thresholds")
    p_eval.set_defaults(func=cmd_eval)

    p_viz = sub.add_parser("viz", help="render a PFM disparity map to a color PNG")
    p_viz.add_argument("pfm")
    p_viz.add_argument("out")
    p_viz.set_defaults(func=cmd_viz)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - map known failure classes to exit codes
        from .postproc import MetricUndefinedError
        from .sampler import SamplingExhaustedError
        from .trainer import TrainingAbortError

        if isinstance(exc, MetricUndefinedError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_METRIC_UNDEFINED
        if isinstance(exc, (TrainingAbortError, SamplingExhaustedError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRAIN_ABORT
        if isinstance(exc, (ValueError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
