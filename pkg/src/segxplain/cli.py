"""Command-line entry point: gen-data, train, infer, explain and eval.

Settings resolve as command-line flag, then ``--config`` file (flat
``key = value`` lines), then built-in default. Exit codes are 0 on success,
2 for usage or validation errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import lrp as L
from . import network as N
from .plotting import plot_explanation, plot_losses, plot_metrics
from .training import TrainConfig, train

# keys a config file may set beyond the TrainConfig fields
EXTRA_KEYS = {
    "profile": str,
    "epsilon": float,
    "include_bias_in_denominator": bool,
    "target": str,
    "threshold": float,
}


class UsageError(Exception):
    """Bad flags, config keys or values; reported with exit code 2."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def config_types() -> dict[str, type]:
    return {**TrainConfig.field_types(), **EXTRA_KEYS}


def _convert(key: str, raw: str):
    kind = config_types()[key]
    try:
        if kind is bool:
            return _parse_bool(raw)
        return kind(raw)
    except ValueError as exc:
        raise UsageError(f"{key}: cannot read {raw!r} as {kind.__name__}") from exc


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    known = config_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw.strip())
    return values


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults into one flat dict."""
    settings = {**{f.name: f.default for f in dataclasses.fields(TrainConfig)},
                "profile": None, "epsilon": L.LrpConfig.epsilon,
                "include_bias_in_denominator": True, "target": "mask:0.0", "threshold": 0.0}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in config_types():
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    # "profile" is shorthand for profile_name and wins when given
    if settings["profile"] is not None:
        settings["profile_name"] = settings["profile"]
    settings["profile"] = settings["profile_name"]
    if settings["profile"] not in N.PROFILES:
        raise UsageError(f"unknown profile {settings['profile']!r}; choose from {sorted(N.PROFILES)}")
    return settings


def train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig(**{f.name: settings[f.name] for f in dataclasses.fields(TrainConfig)})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def lrp_config(settings: dict) -> L.LrpConfig:
    try:
        return L.LrpConfig(settings["epsilon"], settings["include_bias_in_denominator"],
                           L.RelevanceTarget.parse(settings["target"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_generator(path) -> tuple[N.NetworkSpec, N.ParamStore]:
    spec, params = N.load_checkpoint(path)
    if spec.role != "generator":
        raise UsageError(f"{path} holds a {spec.role}, not a generator")
    return spec, params


def _check_size(spec: N.NetworkSpec, images: np.ndarray, where) -> None:
    if images.shape[1:] != (3, *spec.input_size):
        raise UsageError(f"{where}: images are {images.shape[2]}x{images.shape[3]} with "
                         f"{images.shape[1]} channels; profile {spec.profile_name} needs "
                         f"3x{spec.input_size[0]}x{spec.input_size[1]}")


def _inputs(args) -> tuple[np.ndarray, list[str]]:
    """Images from --image (one file) or --manifest (every entry)."""
    if args.image:
        return D.load_image(args.image), [Path(args.image).stem]
    images, _, ids = D.load_dataset(D.load_manifest(args.manifest))
    return images, ids


def _predict(spec, params, images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = [N.forward(spec, params, images[i:i + batch])[0] for i in range(0, len(images), batch)]
    return np.concatenate(out)


# --- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, settings) -> int:
    size = args.size if args.size is not None else N.PROFILES[settings["profile"]]["size"]
    sizes = {p["size"] for p in N.PROFILES.values()}
    if size not in sizes:
        raise UsageError(f"--size {size} matches no profile; use one of {sorted(sizes)}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    train_m, test_m = D.gen_synthetic(args.kind, args.count, size, settings["seed"], args.out)
    print(Path(args.out) / "train.tsv")
    if test_m.entries:
        print(Path(args.out) / "test.tsv")
    return 0


def cmd_train(args, settings) -> int:
    config = train_config(settings)
    images, masks, _ = D.load_dataset(D.load_manifest(args.manifest))
    _check_size(N.build_generator(config.profile_name), images, args.manifest)
    run = Path(args.run)
    started = time.perf_counter()

    def progress(epoch, means):
        if epoch % 10 == 0 or epoch == config.epochs:
            print(f"epoch {epoch}/{config.epochs}  d={means[0]:.4f}  g_adv={means[1]:.4f}  "
                  f"g_l1={means[2]:.4f}  ({time.perf_counter() - started:.0f}s)", file=sys.stderr)

    result = train(images, masks, config, run_dir=run, progress=progress)
    plot_losses(result.losses, run / "loss.png")
    d, adv, l1 = result.losses.epoch_means()[config.epochs]
    print(f"final epoch {config.epochs}: d_loss={d:.6f} g_adv={adv:.6f} g_l1={l1:.6f}")
    return 0


def cmd_infer(args, settings) -> int:
    spec, params = _load_generator(args.checkpoint)
    images, ids = _inputs(args)
    _check_size(spec, images, args.image or args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = D.binarize(_predict(spec, params, images), settings["threshold"])
    for ident, mask in zip(ids, masks):
        D.save_image(mask[None], out / f"{ident}_mask.png")
    print(f"wrote {len(ids)} masks to {out}")
    return 0


def cmd_explain(args, settings) -> int:
    config = lrp_config(settings)
    spec, params = _load_generator(args.checkpoint)
    image = D.load_image(args.image)
    _check_size(spec, image, args.image)
    ident = Path(args.image).stem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        maps, report = L.explain(spec, params, image, config)
    except ValueError as exc:  # e.g. target pixel outside the output
        raise UsageError(str(exc)) from exc
    D.render_heatmap(maps["input"], out / f"{ident}_lrp_input.png")
    if args.all_layers:
        for layer in spec.layers:
            D.render_heatmap(maps[layer.name], out / f"{ident}_lrp_L{layer.index}.png")
    if args.raw:
        L.save_relevance(maps, out / f"{ident}_lrp.bin")
    prediction = D.binarize(N.forward(spec, params, image)[0], settings["threshold"])
    plot_explanation(image[0], prediction[0], maps["input"][0], out / f"{ident}_lrp_panel.png",
                     title=f"{ident}  target {config.target}")
    print(f"target {config.target}  epsilon {config.epsilon}  "
          f"bias_in_denominator {config.include_bias_in_denominator}")
    print(report.to_text())
    return 0


def cmd_eval(args, settings) -> int:
    manifest = D.load_manifest(args.manifest)
    _, truth, ids = D.load_dataset(manifest)
    threshold = settings["threshold"]
    if args.pred_dir:
        pred_dir = Path(args.pred_dir)
        preds = []
        for ident in ids:
            path = pred_dir / f"{ident}_mask.png"
            if not path.is_file():
                raise FileNotFoundError(f"no predicted mask {path}")
            preds.append(D.binarize(D.load_image(path)[0][:1], threshold))
        preds = np.stack(preds)
        default_out = pred_dir
    else:
        spec, params = _load_generator(args.checkpoint)
        images, _, _ = D.load_dataset(manifest)
        _check_size(spec, images, args.manifest)
        preds = D.binarize(_predict(spec, params, images), threshold)
        default_out = Path(args.checkpoint).parent
    if preds.shape != truth.shape:
        raise UsageError(f"predicted masks {preds.shape[2:]} do not match ground truth {truth.shape[2:]}")
    per_image = [D.metrics(D.confusion(p, t)) for p, t in zip(preds, truth)]
    report = D.aggregate(per_image, ids, threshold)
    out = Path(args.out) if args.out else default_out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    plot_metrics(report, out / "metrics.png")
    print("\t".join(["aggregate", *D.METRIC_NAMES, "n"]))
    print(report.aggregate_line())
    return 0


# --- parser ---------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # registered on the top-level parser and again on every subcommand, with
    # SUPPRESS on the copies so a flag given before the subcommand survives
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, metavar="FILE", help="key = value settings file")
    parser.add_argument("--seed", type=int, default=default, help="random seed (default 1)")
    parser.add_argument("--profile", choices=sorted(N.PROFILES), default=default,
                        help="network size profile (default desk-32)")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segxplain", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic image/mask dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--kind", choices=D.KINDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, help="image side; defaults to the profile's size")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train generator and discriminator")
    _global_flags(p, suppress=True)
    p.add_argument("--manifest", required=True, help="training manifest (id, image, mask per line)")
    p.add_argument("--run", required=True, metavar="DIR", help="run directory for checkpoints and logs")
    for key, kind in TrainConfig.field_types().items():
        if key not in ("seed", "profile_name"):
            p.add_argument(_flag(key), dest=key, type=kind, default=None, metavar=kind.__name__.upper())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict masks")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("explain", help="relevance heatmaps for one image")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--target", help="pixel:c,y,x | mask[:threshold] | full (default mask:0)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--include-bias-in-denominator", dest="include_bias_in_denominator", type=_parse_bool,
                   metavar="BOOL")
    p.add_argument("--threshold", type=float, help="mask threshold for the summary panel")
    p.add_argument("--all-layers", action="store_true", help="also render every generator layer")
    p.add_argument("--raw", action="store_true", help="also write the raw relevance tensors")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="metrics report over a manifest")
    _global_flags(p, suppress=True)
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="generator checkpoint")
    src.add_argument("--pred-dir", help="directory of <id>_mask.png predictions")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", metavar="DIR", help="report directory (default: checkpoint or prediction dir)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        settings = resolve(args)
        return args.func(args, settings)
    except UsageError as exc:
        print(f"segxplain {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, N.CheckpointError) as exc:
        print(f"segxplain {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
