"""Command-line pipeline: ``derain synth | train | infer | eval``.

Every command takes an optional JSON config (``--config`` or the
``DERAIN_CONFIG`` environment variable). Values resolve as
flag > config file > built-in default, and the sha256 fingerprint of the
resolved config is written into every artifact.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corruption import DEFAULT_DENSITY, CorruptionParams, SynthConfig, synthesize_dataset
from .data import (
    IMAGE_EXTS,
    DatasetSplit,
    default_split_counts,
    read_image,
    read_pair_set,
    split_dataset,
    write_image,
    write_pair_set,
    write_trio_set,
)
from .errors import ConfigInvalid, DerainError, FingerprintMismatch, IoFailure, ShapeMismatch
from .evaluation import DetectorSpec, emit_report, evaluate_model
from .networks import DiscriminatorConfig, Generator, GeneratorConfig, generator_forward, load_params, predictor, read_archive
from .training import CHECKPOINT_FORMAT, TrainConfig, derive_seed, detect_overfit, load_checkpoint, train

log = logging.getLogger("derain")

DEFAULTS = {
    "seed": 0,
    "data": {
        "pairs": 260,
        "dims": [64, 64],
        "density": DEFAULT_DENSITY,
        "min_cars": 1,
        "max_cars": 3,
        "background": "road",
        "split": None,
        "corruption": CorruptionParams().to_json(),
    },
    "generator": {"base_channels": 8, "depth": 3, "dropout": True, "dropout_rate": 0.5},
    "discriminator": {"base_channels": 8, "n_layers": 2},
    "train": {
        "epochs": 34,
        "batch_size": 1,
        "learning_rate": 2e-4,
        "adam_beta1": 0.5,
        "adam_beta2": 0.999,
        "l1_weight": 100.0,
        "deterministic": True,
        "patience": 3,
    },
    "detector": {"kind": "oracle", "command": None, "threshold": 0.8},
}

BEST_POINTER = "best.json"


class UsageError(DerainError):
    exit_code = 1


# --- config ----------------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigInvalid(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node[p]
    node[leaf] = value


def _get_dotted(cfg: dict, dotted: str):
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    return node


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Built-in defaults, then the JSON file, then explicit flag values."""
    cfg = copy.deepcopy(DEFAULTS)
    path = config_path or os.environ.get("DERAIN_CONFIG")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigInvalid(f"config {path} must hold a JSON object")
        cfg = _merge(cfg, file_cfg)
    for dotted, value in overrides.items():
        _set_dotted(cfg, dotted, value)
    return cfg


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dataset_fingerprint(cfg: dict) -> str:
    # only the keys that shape the synthesized images and their split
    return fingerprint({"seed": cfg["seed"], "data": cfg["data"]})


def training_identity(cfg: dict, data_fp: str | None) -> dict:
    """Config keys that determine a training trajectory.

    The schedule length is left out so extending a run with ``--resume``
    keeps its fingerprint; the data enters through its own fingerprint.
    """
    train_cfg = {k: v for k, v in cfg["train"].items() if k != "epochs"}
    return {
        "seed": cfg["seed"],
        "generator": cfg["generator"],
        "discriminator": cfg["discriminator"],
        "train": train_cfg,
        "dataset_fingerprint": data_fp,
    }


def parse_dims(text: str) -> list[int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"dims must be positive, got {text!r}")
    return [w, h]


def parse_split(text: str) -> list[int]:
    try:
        counts = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TRAIN,VAL,TEST, got {text!r}") from None
    if len(counts) != 3 or min(counts) < 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative counts, got {text!r}")
    return counts


def _synth_config(cfg: dict) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(
        dims=tuple(d["dims"]),
        density=float(d["density"]),
        min_cars=int(d["min_cars"]),
        max_cars=int(d["max_cars"]),
        background=d["background"],
        params=CorruptionParams.from_json(d["corruption"]),
    )


def _train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "patience"}
    return TrainConfig(seed=int(cfg["seed"]), **t)


def _detector_spec(cfg: dict) -> DetectorSpec:
    d = cfg["detector"]
    if d["kind"] == "oracle":
        return DetectorSpec("oracle", {"threshold": float(d["threshold"])})
    if d["kind"] == "external":
        if not d.get("command"):
            raise ConfigInvalid("external detector needs --detector-cmd")
        return DetectorSpec("external", {"command": d["command"]})
    raise ConfigInvalid(f"unknown detector kind {d['kind']!r}")


# --- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _opt(parser, flag, dotted, help, **kw):
    """Add a config-backed flag whose help text shows the built-in default."""
    default = _get_dotted(DEFAULTS, dotted)
    if isinstance(default, list) and dotted == "data.dims":
        shown = "x".join(str(v) for v in default)
    else:
        shown = default
    kw.setdefault("metavar", flag.lstrip("-").upper().replace("-", "_"))
    parser.add_argument(flag, dest=f"cfg:{dotted}", default=argparse.SUPPRESS, help=f"{help} (default: {shown})", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON config file; falls back to $DERAIN_CONFIG (default: none)")
    _opt(common, "--seed", "seed", "root seed for all randomness", type=int)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")

    parser = _Parser(prog="derain", description="Synthetic raindrop removal pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="synthesize a paired dataset")
    p.add_argument("out_dir", help="output directory")
    _opt(p, "--pairs", "data.pairs", "number of pairs", type=int)
    _opt(p, "--dims", "data.dims", "image size WxH", type=parse_dims)
    _opt(p, "--density", "data.density", "droplets per megapixel", type=float)
    _opt(p, "--max-cars", "data.max_cars", "most cars per scene", type=int)
    _opt(p, "--split", "data.split", "TRAIN,VAL,TEST counts; default splits 80:1:1", type=parse_split)

    p = sub.add_parser("train", parents=[common], help="train generator and discriminator")
    p.add_argument("data_dir", help="pair directory written by synth")
    p.add_argument("--out", default="run", help="checkpoint and metrics directory (default: run)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from (default: none)")
    p.add_argument("--force", action="store_true", help="resume even if dataset fingerprints differ (default: off)")
    _opt(p, "--epochs", "train.epochs", "total epochs", type=int)
    _opt(p, "--batch-size", "train.batch_size", "pairs per step", type=int)
    _opt(p, "--lr", "train.learning_rate", "Adam learning rate", type=float)
    _opt(p, "--l1-weight", "train.l1_weight", "weight of the L1 term", type=float)
    _opt(p, "--patience", "train.patience", "epochs of rising validation L1 before overfit is flagged", type=int)
    _opt(p, "--base-channels", "generator.base_channels", "generator base width", type=int)
    _opt(p, "--depth", "generator.depth", "generator down-sampling stages", type=int)
    _opt(p, "--disc-channels", "discriminator.base_channels", "discriminator base width", type=int)
    _opt(p, "--disc-layers", "discriminator.n_layers", "discriminator stride-2 layers", type=int)

    p = sub.add_parser("infer", parents=[common], help="restore a directory of images")
    p.add_argument("checkpoint", help="checkpoint, parameter archive or training run directory")
    p.add_argument("input_dir", help="directory of distorted images")
    p.add_argument("out_dir", help="where <id>_pred.png files go")

    p = sub.add_parser("eval", parents=[common], help="score restoration by detection counts")
    p.add_argument("test_dir", help="pair directory to evaluate")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint, parameter archive or run directory (default: none)")
    p.add_argument("--predictor", choices=("checkpoint", "identity", "perfect"), default="checkpoint",
                   help="what produces predicted images (default: checkpoint)")
    p.add_argument("--subset", default="test", help="split name to evaluate, if recorded (default: test)")
    p.add_argument("--out", default="eval", help="report directory (default: eval)")
    p.add_argument("--force", action="store_true", help="evaluate despite mismatched fingerprints (default: off)")
    _opt(p, "--detector", "detector.kind", "car detector: oracle or external", choices=("oracle", "external"))
    _opt(p, "--detector-cmd", "detector.command", "external detector command")
    _opt(p, "--threshold", "detector.threshold", "oracle match threshold", type=float)
    return parser


# --- shared helpers ------------------------------------------------------------------

def load_generator(path: str | os.PathLike) -> tuple[Generator, dict]:
    """Generator plus archive metadata from a checkpoint, params archive or run dir."""
    path = Path(path)
    if path.is_dir():
        pointer = path / BEST_POINTER
        if not pointer.exists():
            raise IoFailure(f"{path} has no {BEST_POINTER}")
        with open(pointer, encoding="utf-8") as fh:
            path = path / json.load(fh)["checkpoint"]
    _, manifest = read_archive(path)
    if manifest.get("format") == CHECKPOINT_FORMAT:
        state = load_checkpoint(path)
        return state.generator, state.meta
    net = load_params(path)
    if not isinstance(net, Generator):
        raise IoFailure(f"{path} holds a discriminator, not a generator")
    return net, manifest.get("meta", {})


def _pairs_for(pair_set, name: str):
    if name in pair_set.meta.get("splits", {}):
        return pair_set.subset(name)
    return list(pair_set.pairs)


# --- commands -------------------------------------------------------------------------

def cmd_synth(cfg: dict, out_dir: str) -> int:
    n = int(cfg["data"]["pairs"])
    if n < 0:
        raise ConfigInvalid("--pairs must be non-negative")
    scfg = _synth_config(cfg)
    items = synthesize_dataset(n, scfg.dims, scfg.density, int(cfg["seed"]), scfg)
    pairs = [p for p, _ in items]
    counts = cfg["data"]["split"] or default_split_counts(n)
    split = split_dataset(pairs, tuple(counts), derive_seed(int(cfg["seed"]), 10)) if n else DatasetSplit()
    meta = {
        "config": cfg,
        "config_fingerprint": fingerprint(cfg),
        "dataset_fingerprint": dataset_fingerprint(cfg),
        "splits": {
            "train": [p.id for p in split.train],
            "validation": [p.id for p in split.validation],
            "test": [p.id for p in split.test],
        },
    }
    path = write_pair_set(out_dir, pairs, [g for _, g in items], meta)
    print(f"wrote {n} pairs to {path.parent} (train/val/test {split.sizes}), fingerprint {meta['dataset_fingerprint']}")
    return 0


def cmd_train(cfg: dict, data_dir: str, out: str, resume: str | None, force: bool) -> int:
    pair_set = read_pair_set(data_dir)
    data_fp = pair_set.meta.get("dataset_fingerprint")
    if pair_set.meta.get("splits"):
        split = DatasetSplit(
            train=tuple(pair_set.subset("train")),
            validation=tuple(pair_set.subset("validation")),
            test=tuple(pair_set.subset("test")),
        )
    else:
        pairs = pair_set.pairs
        split = split_dataset(pairs, default_split_counts(len(pairs)), derive_seed(int(cfg["seed"]), 10))
    if not split.train:
        raise ConfigInvalid(f"{data_dir} has no training pairs")
    dims = split.train[0].dims
    tcfg = _train_config(cfg)
    ident = training_identity(cfg, data_fp)
    meta = {"config_fingerprint": fingerprint(ident), "dataset_fingerprint": data_fp, "config": ident}
    state = None
    if resume:
        state = load_checkpoint(resume)
        old = state.meta.get("dataset_fingerprint")
        if old and data_fp and old != data_fp and not force:
            raise FingerprintMismatch(f"{resume} was trained on dataset {old}, {data_dir} is {data_fp}; use --force")
        # the optimiser state carries the old hyperparameters; only the schedule length changes
        tcfg = replace(state.config, epochs=tcfg.epochs)
        meta = dict(state.meta)
    gcfg = GeneratorConfig(
        base_channels=int(cfg["generator"]["base_channels"]), depth=int(cfg["generator"]["depth"]),
        input_dims=dims, dropout=bool(cfg["generator"]["dropout"]), dropout_rate=float(cfg["generator"]["dropout_rate"]),
    )
    dcfg = DiscriminatorConfig(
        base_channels=int(cfg["discriminator"]["base_channels"]), n_layers=int(cfg["discriminator"]["n_layers"]),
        input_dims=dims,
    )
    out_dir = Path(out)
    print(f"schedule: {tcfg.epochs} epochs, batch size {tcfg.batch_size}, lr {tcfg.learning_rate:g}, "
          f"beta1 {tcfg.adam_beta1:g}, l1 weight {tcfg.l1_weight:g}, seed {tcfg.seed}, "
          f"{len(split.train)} train / {len(split.validation)} val pairs at {dims[0]}x{dims[1]}")

    def report(m):
        val = "n/a" if m.l1_val is None else f"{m.l1_val:.5f}"
        print(f"epoch {m.epoch:3d}  d_loss {m.d_loss:.4f}  g_adv {m.g_adv:.4f}  "
              f"l1_train {m.l1_train:.5f}  l1_val {val}", flush=True)

    state, history = train(
        tcfg, split, gcfg, dcfg, checkpoint_dir=out_dir, metrics_path=out_dir / "metrics.jsonl",
        state=state, meta=meta, on_epoch=report,
    )
    if all(m.l1_val is not None for m in history):
        rep = detect_overfit(history, int(cfg["train"]["patience"]))
        best, onset = rep.best_epoch, rep.overfit_epoch
    else:
        best, onset = history[-1].epoch, None
    pointer = {
        "best_epoch": best,
        "overfit_epoch": onset,
        "checkpoint": f"epoch_{best:03d}.ckpt",
        "config_fingerprint": meta.get("config_fingerprint"),
        "dataset_fingerprint": meta.get("dataset_fingerprint"),
    }
    with open(out_dir / BEST_POINTER, "w", encoding="utf-8") as fh:
        json.dump(pointer, fh, indent=2, sort_keys=True)
        fh.write("\n")
    note = f", overfitting from epoch {onset}" if onset is not None else ""
    print(f"best epoch {best}{note}")
    return 0


def _infer_inputs(input_dir: Path) -> list[tuple[str, Path]]:
    out = []
    for path in sorted(input_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        stem = path.stem
        if stem.endswith(("_clear", "_pred")):
            continue
        out.append((stem.removesuffix("_rain"), path))
    return out


def cmd_infer(cfg: dict, checkpoint: str, input_dir: str, out_dir: str) -> int:
    gen, _ = load_generator(checkpoint)
    src = Path(input_dir)
    if not src.is_dir():
        raise IoFailure(f"{src} is not a directory")
    inputs = _infer_inputs(src)
    if not inputs:
        log.warning("no images found in %s", src)
        return 0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for ident, path in inputs:
        try:
            pred = generator_forward(gen, read_image(path))
        except (ShapeMismatch, DerainError) as exc:
            failed += 1
            log.error("%s: %s", path.name, exc)
            continue
        write_image(out / f"{ident}_pred.png", pred)
    print(f"restored {len(inputs) - failed} of {len(inputs)} images into {out}")
    return ShapeMismatch.exit_code if failed else 0


def cmd_eval(cfg: dict, test_dir: str, checkpoint: str | None, mode: str, subset: str, out: str, force: bool) -> int:
    pair_set = read_pair_set(test_dir)
    pairs = _pairs_for(pair_set, subset)
    if not pairs:
        raise ConfigInvalid(f"{test_dir} has no pairs in subset {subset!r}")
    spec = _detector_spec(cfg)
    data_fp = pair_set.meta.get("dataset_fingerprint")
    model_fp = None
    if mode == "checkpoint":
        if not checkpoint:
            raise ConfigInvalid("--predictor checkpoint needs --checkpoint")
        gen, meta = load_generator(checkpoint)
        model_fp = meta.get("dataset_fingerprint")
        if model_fp and data_fp and model_fp != data_fp and not force:
            raise FingerprintMismatch(
                f"checkpoint was trained on dataset {model_fp} but {test_dir} is {data_fp}; use --force"
            )
        fn = predictor(gen)
    elif mode == "identity":
        fn = lambda img: img  # noqa: E731
    else:
        lookup = {p.distorted.tobytes(): p.clear for p in pairs}
        fn = lambda img: lookup[np.asarray(img).tobytes()]  # noqa: E731
    result = evaluate_model(fn, pairs, spec)
    run_fp = fingerprint({"config": cfg, "predictor": mode, "subset": subset})
    extra = {
        "predictor": mode,
        "subset": subset,
        "detector": spec.to_json(),
        "detector_fingerprint": spec.fingerprint(),
        "dataset_fingerprint": data_fp,
        "model_dataset_fingerprint": model_fp,
        "l1_predicted": result.l1_predicted,
        "l1_input": result.l1_input,
    }
    report_path, _ = emit_report(result.scores, result.table, out, fingerprint=run_fp, extra=extra)
    write_trio_set(result.trios, Path(out) / "trios", {"config_fingerprint": run_fp})
    s = result.scores
    print(f"term1 {s.term1:.4f}  term2 {s.term2:.4f}  m_effective {s.m_effective}  skipped {s.skipped}")
    print(f"l1 predicted {result.l1_predicted:.5f}  l1 input {result.l1_input:.5f}  report {report_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s", force=True)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg, args.out_dir)
        if args.command == "train":
            return cmd_train(cfg, args.data_dir, args.out, args.resume, args.force)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint, args.input_dir, args.out_dir)
        return cmd_eval(cfg, args.test_dir, args.checkpoint, args.predictor, args.subset, args.out, args.force)
    except DerainError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except ValueError as exc:
        # dataclass validation of resolved config values
        log.error("%s", exc)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
