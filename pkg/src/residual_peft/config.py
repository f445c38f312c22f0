"""Run configuration: one TOML file plus command-line overrides.

Example::

    seed = 0
    out = "runs/mixed"

    [backbone]
    preset = "desk"          # or any BackboneConfig key

    [variant]
    kind = "mixed"           # series | parallel | mixed | lora
    adapter_ratio = 0.25
    lora_rank = 4
    lora_scale = 1.0
    activation = "gelu"

    [train]
    lr0 = 1e-4
    epochs = 100
    batch_size = 4

    [train.adamw]
    weight_decay = 0.01

    [data]
    task = "camouflage"      # synthesize into data.dir ...
    dir = "data/camouflage"
    # manifest = "path/to/manifest.tsv"   # ... or read an existing dataset

The single top-level ``seed`` drives backbone init, element init, data
synthesis and shuffling. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import PRESETS, BackboneConfig
from .data import SynthSpec
from .training import AdamWConfig, TrainConfig
from .variants import VariantSpec

__all__ = ["ConfigError", "DataConfig", "RunConfig", "load_config", "build_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: Path | None = None
    synth: SynthSpec | None = None
    dir: Path | None = None

    def manifest_path(self) -> Path:
        if self.manifest is not None:
            return self.manifest
        return Path(self.dir) / "manifest.tsv"


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=lambda: PRESETS["desk"])
    variant: VariantSpec = field(default_factory=VariantSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: Path = Path("runs/default")
    seed: int = 0
    preset: str | None = "desk"


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _make(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def build_config(raw: dict, overrides: dict | None = None, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed TOML mapping (plus flag overrides) into a :class:`RunConfig`.

    ``overrides`` keys: seed, out, variant, lora_rank, lora_scale, preset,
    epochs, batch_size, manifest. ``None`` values are ignored.
    """
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    base_dir = base_dir or Path.cwd()
    _reject_unknown("top level", raw, {"seed", "out", "backbone", "variant", "train", "data"})

    seed = ov.get("seed", raw.get("seed", 0))
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    out = Path(ov.get("out", raw.get("out", "runs/default")))
    if not out.is_absolute():
        out = base_dir / out if "out" not in ov else out

    bb = raw.get("backbone", {})
    _reject_unknown("backbone", bb, _names(BackboneConfig) | {"preset"})
    preset = ov.get("preset", bb.pop("preset", None))
    if preset is None and not bb:
        preset = "desk"
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        backbone = dataclasses.replace(PRESETS[preset], **bb) if bb else PRESETS[preset]
        try:
            BackboneConfig(**dataclasses.asdict(backbone))
        except ValueError as exc:
            raise ConfigError(f"[backbone] {exc}") from exc
    else:
        backbone = _make(BackboneConfig, "backbone", bb)

    var = raw.get("variant", {})
    _reject_unknown("variant", var, _names(VariantSpec))
    for key, name in (("variant", "kind"), ("lora_rank", "lora_rank"), ("lora_scale", "lora_scale")):
        if key in ov:
            var[name] = ov[key]
    if "kind" in var:
        var["kind"] = str(var["kind"]).lower()
    variant = _make(VariantSpec, "variant", var)

    tr = raw.get("train", {})
    _reject_unknown("train", tr, _names(TrainConfig) - {"seed"})
    adamw = tr.pop("adamw", {})
    _reject_unknown("train.adamw", adamw, _names(AdamWConfig))
    for key in ("epochs", "batch_size"):
        if key in ov:
            tr[key] = ov[key]
    train = _make(TrainConfig, "train", {**tr, "seed": seed, "adamw": _make(AdamWConfig, "train.adamw", adamw)})

    dat = raw.get("data", {})
    _reject_unknown("data", dat, (_names(SynthSpec) - {"seed"}) | {"manifest", "dir"})
    manifest = ov.get("manifest", dat.pop("manifest", None))
    ddir = dat.pop("dir", None)
    if manifest is not None:
        if dat:
            raise ConfigError(f"[data] manifest given together with synthesis keys: {', '.join(sorted(dat))}")
        manifest = Path(manifest)
        if not manifest.is_absolute():
            manifest = base_dir / manifest
        data = DataConfig(manifest=manifest, dir=manifest.parent)
    else:
        dat.setdefault("size", backbone.image_size)
        synth = _make(SynthSpec, "data", {**dat, "seed": seed})
        try:
            synth.check_patch(backbone.patch_size)
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from exc
        if synth.size != backbone.image_size:
            raise ConfigError(f"[data] synthetic size {synth.size} differs from backbone image_size "
                              f"{backbone.image_size}; the model does not resize")
        ddir = Path(ddir) if ddir is not None else out / "data"
        if not ddir.is_absolute():
            ddir = base_dir / ddir
        data = DataConfig(synth=synth, dir=ddir)
    return RunConfig(backbone, variant, train, data, out, seed, preset)


def load_config(path: Path | None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return build_config({}, overrides)
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(raw, overrides, base_dir=path.parent)
