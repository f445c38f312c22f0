"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"RPEFTCKP"
    version    u32       1
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (sorted keys):
               {"backbone": {...}, "variant": {...} | null, "extra": {...}}
    count      u32       number of parameter records
    count x record:
        name_len  u16
        name      name_len bytes UTF-8, e.g. "block.3.attn.W_v",
                  "peft.block.0.attn_sublayer.W_up", "head.W"
        ndim      u8
        dims      ndim x u32
        data      prod(dims) x f64, row-major

Records appear in the model's parameter order. PEFT records carry the
``peft.`` prefix, so a file saved with ``include_backbone=False`` holds just
the adapted part and can be loaded onto any backbone of the same shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, MaskHead
from .variants import PeftModel, VariantSpec, base_model, build_variant

__all__ = ["CheckpointError", "MAGIC", "VERSION", "save_checkpoint", "read_checkpoint",
           "load_checkpoint", "load_into"]

MAGIC = b"RPEFTCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _meta(model: PeftModel, extra: dict | None) -> bytes:
    meta = {
        "backbone": model.config.to_dict(),
        "variant": model.spec.to_dict() if model.spec is not None else None,
        "extra": extra or {},
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: PeftModel, extra: dict | None = None,
                    include_backbone: bool = True) -> Path:
    path = Path(path)
    records = [(name, t.data) for name, t in model.named_parameters()
               if include_backbone or not model.freeze_mask.get(name, False)]
    meta = _meta(model, extra)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """``(meta, {name: array})`` with arrays in file order."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = arr
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, params


def load_into(model: PeftModel, params: dict[str, np.ndarray]) -> None:
    """Copy ``params`` onto ``model``; every name must exist with the same shape."""
    own = dict(model.named_parameters())
    for name, arr in params.items():
        if name not in own:
            raise CheckpointError(f"checkpoint parameter {name!r} has no counterpart in the model")
        if own[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {own[name].shape}")
    for name, arr in params.items():
        own[name].data[...] = arr


def load_checkpoint(path) -> tuple[PeftModel, dict]:
    """Rebuild a self-describing checkpoint into a frozen :class:`PeftModel`."""
    meta, params = read_checkpoint(path)
    cfg = BackboneConfig(**meta["backbone"])
    backbone = Backbone(cfg)
    spec = VariantSpec(**meta["variant"]) if meta.get("variant") else None
    model = build_variant(backbone, spec, MaskHead(cfg)) if spec else base_model(backbone, MaskHead(cfg))
    missing = [name for name, _ in model.named_parameters() if name not in params]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {len(missing)} parameters, e.g. {missing[0]!r}")
    load_into(model, params)
    return model, meta.get("extra", {})
