"""``residual-peft`` command line: synth, train, eval, params, gradcheck.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime or
numerical failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import PRESETS, Backbone, BackboneConfig, backbone_param_count, head_param_count
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    ManifestError,
    best_threshold_mae,
    directory_digest,
    read_manifest,
    split_load,
    stack,
    synthesize,
)
from .training import average_precision, bce_loss, mean_absolute_error, train
from .variants import account, build_variant, forward, predict_proba

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_MAX_PARAMS = 100_000
GRADCHECK_TOL = 1e-4
KINK_MARGIN = 2e-5
MAX_DRAWS = 1000


class ValidationError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _config(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "variant": getattr(args, "variant", None),
        "lora_rank": getattr(args, "lora_rank", None),
        "lora_scale": getattr(args, "lora_scale", None),
        "preset": getattr(args, "preset", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "manifest": getattr(args, "manifest", None),
    }
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# commands; each returns a closure that performs the side effects, so that
# everything is validated before anything is written
# ---------------------------------------------------------------------------


def prepare_synth(cfg: RunConfig):
    if cfg.data.synth is None:
        raise ValidationError("synth needs a [data] section describing a synthetic task, not a manifest")

    def run() -> int:
        manifest = synthesize(cfg.data.synth, cfg.data.dir)
        _emit({"manifest": str(manifest.path), "entries": len(manifest.entries),
               "digest": "sha256:" + directory_digest(manifest)})
        return EXIT_OK

    return run


def _dataset(cfg: RunConfig):
    path = cfg.data.manifest_path()
    if cfg.data.synth is not None and not path.exists():
        synthesize(cfg.data.synth, cfg.data.dir)
    manifest = read_manifest(path)
    return split_load(manifest, "train"), split_load(manifest, "test")


def prepare_train(cfg: RunConfig):
    if cfg.preset == "vitb-like":
        raise ValidationError("the vitb-like preset is for parameter accounting only")
    if cfg.data.manifest is not None and not cfg.data.manifest.exists():
        raise ValidationError(f"manifest {cfg.data.manifest} does not exist")

    def run() -> int:
        train_set, test_set = _dataset(cfg)
        size = train_set[0].image.shape
        expected = (cfg.backbone.image_size, cfg.backbone.image_size, cfg.backbone.channels)
        if size != expected:
            raise ValidationError(f"dataset images are {size}, model expects {expected}")
        out = cfg.out
        out.mkdir(parents=True, exist_ok=True)
        model = build_variant(Backbone(cfg.backbone, seed=cfg.seed), cfg.variant, seed=cfg.seed)
        best_path = out / "best.ckpt"

        def on_best(epoch: int, mae: float) -> None:
            save_checkpoint(best_path, model, {"epoch": epoch, "mae": mae})

        with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as log_fh:
            def log(record: dict) -> None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()

            report = train(model, train_set, test_set, cfg.train, log=log, on_best=on_best)
        save_checkpoint(out / "final.ckpt", model, {"epoch": cfg.train.epochs - 1, "mae": report.mae})
        counts = account(cfg.backbone, cfg.variant)
        doc = {
            "variant": cfg.variant.to_dict(),
            "backbone": cfg.backbone.to_dict(),
            "train": cfg.train.to_dict(),
            "seed": cfg.seed,
            "parameters": counts,
            "n_train": len(train_set),
            "n_test": len(test_set),
            "threshold_baseline_mae": best_threshold_mae(test_set)["mae"],
            **report.to_dict(),
        }
        with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        _emit({"report": str(out / "report.json"), "checkpoint": str(best_path), "mae": report.mae,
               "ap": report.ap, "best_mae": report.best_mae, "peft_parameters": counts["peft"]})
        return EXIT_OK

    return run


def prepare_eval(args):
    ckpt, manifest_path = Path(args.checkpoint), Path(args.manifest)
    for p in (ckpt, manifest_path):
        if not p.exists():
            raise ValidationError(f"{p} does not exist")
    cfg = load_config(args.config, {}) if args.config else None

    def run() -> int:
        try:
            model, _ = load_checkpoint(ckpt)
        except CheckpointError as exc:
            raise ValidationError(str(exc)) from exc
        if cfg is not None and cfg.backbone != model.config:
            raise ValidationError(f"checkpoint backbone {model.config} does not match config {cfg.backbone}")
        samples = split_load(read_manifest(manifest_path), args.split)
        images, masks = stack(samples)
        if images.shape[1:] != (model.config.image_size, model.config.image_size, model.config.channels):
            raise ValidationError(f"dataset images {images.shape[1:]} do not fit the checkpoint's model")
        probs = predict_proba(model, images)
        _emit({"mae": mean_absolute_error(probs, masks), "ap": average_precision(probs, masks),
               "n_samples": len(samples), "split": args.split})
        return EXIT_OK

    return run


def prepare_params(cfg: RunConfig, as_json: bool):
    def run() -> int:
        counts = account(cfg.backbone, cfg.variant)
        if as_json:
            _emit({"preset": cfg.preset, "variant": cfg.variant.to_dict(), **counts})
            return EXIT_OK
        v = cfg.variant
        detail = f"rank={v.lora_rank}, s={v.lora_scale}" if v.kind.value == "lora" else \
            f"ratio={v.adapter_ratio}, hidden={v.adapter_hidden(cfg.backbone.d_model)}, act={v.activation}"
        print(f"preset: {cfg.preset or 'custom'}  (L={cfg.backbone.depth}, d={cfg.backbone.d_model})")
        print(f"variant: {v.kind.value}  ({detail})")
        print(f"{'group':<12}{'parameters':>14}{'millions':>10}  state")
        for group, state in (("backbone", "frozen"), ("peft", "trainable"), ("head", "trainable")):
            print(f"{group:<12}{counts[group]:>14,}{counts[group] / 1e6:>10.2f}  {state}")
        print(f"{'trainable':<12}{counts['trainable']:>14,}{counts['trainable'] / 1e6:>10.2f}")
        print(f"{'total':<12}{counts['total']:>14,}{counts['total'] / 1e6:>10.2f}")
        print(f"trainable fraction: {counts['trainable_fraction']:.4%}   "
              f"peft / backbone: {counts['peft_fraction_of_backbone']:.4%}")
        return EXIT_OK

    return run


def gradcheck_variant(cfg: BackboneConfig, variant, seed: int = 0, batch: int = 2,
                      step: float = 1e-5) -> dict:
    """Finite-difference check of every trainable parameter on a random batch."""
    total = backbone_param_count(cfg) + head_param_count(cfg) + account(cfg, variant)["peft"]
    if total > GRADCHECK_MAX_PARAMS:
        raise ValidationError(f"gradcheck needs a model below {GRADCHECK_MAX_PARAMS:,} parameters, "
                              f"this one has {total:,}")
    rng = np.random.default_rng([seed, 0x6C4])
    model = build_variant(Backbone(cfg, seed=seed), variant, seed=seed)
    params = model.trainable_parameters()
    # Move trainable tensors off their zero init so every path carries
    # gradient, and redraw until no ReLU input lies within KINK_MARGIN of 0:
    # a finite-difference step across a kink measures the corner, not the
    # derivative.
    for attempt in range(1, MAX_DRAWS + 1):
        for t in params.values():
            t.data[...] = rng.normal(0.0, 0.3, t.shape)
        images = rng.random((batch, cfg.image_size, cfg.image_size, cfg.channels))
        masks = (rng.random((batch, cfg.image_size, cfg.image_size)) < 0.5).astype(np.float64)
        with ad.kink_probe() as probe:
            forward(model, images)
        if probe.distance >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free sample point in {MAX_DRAWS} draws")
    err = ad.grad_check(lambda: bce_loss(forward(model, images), masks), params.values(), step)
    return {"variant": variant.kind.value, "max_relative_error": err, "tolerance": GRADCHECK_TOL,
            "passed": bool(err < GRADCHECK_TOL), "checked_parameters": sorted(params),
            "checked_count": int(sum(t.size for t in params.values())),
            "draws": attempt, "kink_distance": probe.distance}


def prepare_gradcheck(cfg: RunConfig):
    total = backbone_param_count(cfg.backbone) + head_param_count(cfg.backbone)
    if total > GRADCHECK_MAX_PARAMS:
        raise ValidationError(f"gradcheck needs a model below {GRADCHECK_MAX_PARAMS:,} parameters, "
                              f"this one has {total:,}; use --preset gradcheck")

    def run() -> int:
        result = gradcheck_variant(cfg.backbone, cfg.variant, cfg.seed)
        shown = dict(result)
        shown["checked_parameters"] = len(result["checked_parameters"])
        _emit(shown)
        return EXIT_OK if result["passed"] else EXIT_RUNTIME

    return run


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="residual-peft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--preset", choices=sorted(PRESETS))
        if variant:
            p.add_argument("--variant", choices=["series", "parallel", "mixed", "lora"])
            p.add_argument("--lora-rank", type=int)
            p.add_argument("--lora-scale", type=float)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, variant=False)

    p = sub.add_parser("train", help="fine-tune a variant on a dataset")
    common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--config", type=Path, help="optional; guards against a mismatched backbone")

    p = sub.add_parser("params", help="parameter accounting table")
    common(p)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a small model")
    common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        if args.command == "eval":
            run = prepare_eval(args)
        else:
            if args.command == "gradcheck" and args.preset is None and args.config is None:
                args.preset = "gradcheck"
            cfg = _config(args)
            if args.command == "synth":
                run = prepare_synth(cfg)
            elif args.command == "train":
                run = prepare_train(cfg)
            elif args.command == "params":
                run = prepare_params(cfg, args.json)
            else:
                run = prepare_gradcheck(cfg)
    except (ConfigError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return run()
    except (ValidationError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
