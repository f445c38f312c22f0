"""ViT-style image encoder and a per-patch mask head.

Blocks use pre-norm wiring::

    u = x + Attn(LN1(x))
    y = u + FFN(LN2(u))

PEFT elements hook into a block through a list of :class:`Injection` records
(see :mod:`residual_peft.elements`). Images are ``H x W x C`` (or a batch
``B x H x W x C``) arrays of floats; the model never resizes them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .elements import (
    AdapterModule,
    Injection,
    Insertion,
    Location,
    adapter_apply_parallel,
    adapter_apply_sequential,
    lora_apply,
)

__all__ = [
    "BackboneConfig",
    "PRESETS",
    "TransformerBlock",
    "Backbone",
    "MaskHead",
    "truncated_normal",
    "patchify",
    "attention",
    "ffn",
    "block_forward",
    "embed_patches",
    "encode",
    "decode_mask",
    "backbone_param_count",
    "head_param_count",
]


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    ffn_ratio: int = 4

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "d_model", "depth", "heads", "ffn_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def ffn_dim(self) -> int:
        return self.ffn_ratio * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, BackboneConfig] = {
    "desk": BackboneConfig(image_size=64, patch_size=8, channels=1, d_model=64, depth=4, heads=4),
    "gradcheck": BackboneConfig(image_size=16, patch_size=4, channels=1, d_model=16, depth=2, heads=2),
    # accounting only: ~90M floats, never instantiated
    "vitb-like": BackboneConfig(image_size=1024, patch_size=16, channels=3, d_model=768, depth=12, heads=12),
}


def backbone_param_count(cfg: BackboneConfig) -> int:
    d, f = cfg.d_model, cfg.ffn_dim
    per_block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    return cfg.patch_dim * d + d + cfg.num_tokens * d + cfg.depth * per_block


def head_param_count(cfg: BackboneConfig) -> int:
    p2 = cfg.patch_size**2
    return cfg.d_model * p2 + p2


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


class TransformerBlock:
    PARAMS = ("norm1.gain", "norm1.bias", "attn.W_q", "attn.b_q", "attn.W_k", "attn.b_k",
              "attn.W_v", "attn.b_v", "attn.W_o", "attn.b_o", "norm2.gain", "norm2.bias",
              "ffn.W1", "ffn.b1", "ffn.W2", "ffn.b2")

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        d, f = cfg.d_model, cfg.ffn_dim
        self.heads = cfg.heads
        w = (lambda *s: Tensor(truncated_normal(rng, s))) if rng is not None else (lambda *s: Tensor(np.zeros(s)))
        self.norm1_gain, self.norm1_bias = Tensor(np.ones(d)), Tensor(np.zeros(d))
        self.W_q, self.b_q = w(d, d), Tensor(np.zeros(d))
        self.W_k, self.b_k = w(d, d), Tensor(np.zeros(d))
        self.W_v, self.b_v = w(d, d), Tensor(np.zeros(d))
        self.W_o, self.b_o = w(d, d), Tensor(np.zeros(d))
        self.norm2_gain, self.norm2_bias = Tensor(np.ones(d)), Tensor(np.zeros(d))
        self.W_ffn1, self.b_ffn1 = w(d, f), Tensor(np.zeros(f))
        self.W_ffn2, self.b_ffn2 = w(f, d), Tensor(np.zeros(d))

    def parameters(self) -> dict[str, Tensor]:
        vals = (self.norm1_gain, self.norm1_bias, self.W_q, self.b_q, self.W_k, self.b_k,
                self.W_v, self.b_v, self.W_o, self.b_o, self.norm2_gain, self.norm2_bias,
                self.W_ffn1, self.b_ffn1, self.W_ffn2, self.b_ffn2)
        return dict(zip(self.PARAMS, vals))


class Backbone:
    """Patch embedding, learned positional embedding and the block stack."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.patch_W = Tensor(truncated_normal(rng, (cfg.patch_dim, d)))
        self.patch_b = Tensor(np.zeros(d))
        self.pos_embed = Tensor(truncated_normal(rng, (cfg.num_tokens, d)))
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.depth)]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_embed.W", self.patch_W
        yield "patch_embed.b", self.patch_b
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for name, t in blk.parameters().items():
                yield f"block.{i}.{name}", t

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class MaskHead:
    """Linear map from each token to the ``patch x patch`` logits it covers.

    Tokens are standardized per row (layer norm without affine terms) before
    the projection, so the head sees unit-scale features whatever the encoder
    weight scale.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None, init_std: float = 0.0):
        p2 = cfg.patch_size**2
        self.config = cfg
        if rng is None or init_std == 0.0:
            self.W = Tensor(np.zeros((cfg.d_model, p2)))
        else:
            self.W = Tensor(rng.normal(0.0, init_std, (cfg.d_model, p2)))
        self.b = Tensor(np.zeros(p2))
        self._unit = Tensor(np.ones(cfg.d_model))
        self._zero = Tensor(np.zeros(cfg.d_model))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "head.W", self.W
        yield "head.b", self.b


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _index(injection: Sequence[Injection] | None) -> dict:
    found: dict = {}
    for inj in injection or ():
        if inj.location in found:
            raise ValueError(f"two elements at {inj.location.value} in one block")
        found[inj.location] = inj
    return found


def attention(x: Tensor, block: TransformerBlock, injection: Sequence[Injection] | None = None) -> Tensor:
    """Multi-head self-attention ``softmax(Q K^T / sqrt(d_k)) V`` then ``W_o``.

    ``x`` is ``n x d`` or ``B x n x d``. LoRA injections at the query/value
    locations rewrite those projections.
    """
    d = block.W_q.shape[0]
    if x.ndim not in (2, 3) or x.shape[-1] != d:
        raise ShapeError(f"attention input must be (B,) n x {d}, got {x.shape}")
    found = _index(injection)
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    B, n, _ = x.shape
    h = block.heads
    dk = d // h

    def project(W, b, loc):
        inj = found.get(loc)
        if inj is not None:
            return lora_apply(x, W, inj.element, b)
        return ad.bias_add(ad.matmul(x, W), b)

    def split(t):
        return ad.transpose(ad.reshape(t, (B, n, h, dk)), (0, 2, 1, 3))

    q = split(project(block.W_q, block.b_q, Location.ATTN_QUERY))
    k = split(ad.bias_add(ad.matmul(x, block.W_k), block.b_k))
    v = split(project(block.W_v, block.b_v, Location.ATTN_VALUE))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, n, d))
    out = ad.bias_add(ad.matmul(ctx, block.W_o), block.b_o)
    return ad.reshape(out, (n, d)) if single else out


def ffn(x: Tensor, block: TransformerBlock) -> Tensor:
    """``relu(x W1 + b1) W2 + b2``."""
    if x.shape[-1] != block.W_ffn1.shape[0]:
        raise ShapeError(f"ffn input width {x.shape[-1]} != {block.W_ffn1.shape[0]}")
    z = ad.relu(ad.bias_add(ad.matmul(x, block.W_ffn1), block.b_ffn1))
    return ad.bias_add(ad.matmul(z, block.W_ffn2), block.b_ffn2)


def _sublayer(x: Tensor, out: Tensor, inj: Injection | None) -> Tensor:
    # residual + optional adapter; a parallel adapter supplies the residual itself
    if inj is None:
        return ad.add(x, out)
    if inj.insertion is Insertion.PARALLEL:
        return adapter_apply_parallel(x, out, inj.element)
    return adapter_apply_sequential(ad.add(x, out), inj.element)


def block_forward(x: Tensor, block: TransformerBlock, injection: Sequence[Injection] | None = None) -> Tensor:
    found = _index(injection)
    for loc in (Location.ATTN_SUBLAYER, Location.FFN_SUBLAYER):
        if loc in found and not isinstance(found[loc].element, AdapterModule):
            raise ValueError(f"only adapters may sit at {loc.value}")
    a = attention(ad.layer_norm(x, block.norm1_gain, block.norm1_bias), block, injection)
    u = _sublayer(x, a, found.get(Location.ATTN_SUBLAYER))
    m = ffn(ad.layer_norm(u, block.norm2_gain, block.norm2_bias), block)
    return _sublayer(u, m, found.get(Location.FFN_SUBLAYER))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``B x H x W x C`` -> ``B x n x (patch*patch*C)``, patches in row-major order."""
    B, H, W, C = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g_h * g_w, patch * patch * C)


def _as_batch(image, cfg: BackboneConfig) -> tuple[np.ndarray, bool]:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    if cfg.channels == 1 and arr.ndim in (2, 3) and arr.shape[-1] != 1:
        # grayscale without a channel axis: H x W or B x H x W
        single = arr.ndim == 2
        arr = arr[..., None]
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(f"expected images of shape {cfg.image_size}x{cfg.image_size}x{cfg.channels}, "
                         f"got {tuple(np.shape(image))}")
    return arr, single


def embed_patches(image, backbone: Backbone) -> Tensor:
    """Linear patch embedding before the positional term; ``(B,) n x d``."""
    cfg = backbone.config
    arr, single = _as_batch(image, cfg)
    tokens = ad.bias_add(ad.matmul(Tensor._wrap(patchify(arr, cfg.patch_size)), backbone.patch_W),
                         backbone.patch_b)
    return ad.reshape(tokens, tokens.shape[1:]) if single else tokens


def encode(image, backbone: Backbone, plan: Sequence[Sequence[Injection]] | None = None) -> Tensor:
    """Patchify, embed, add positions and run every block; ``(B,) n x d``."""
    cfg = backbone.config
    arr, single = _as_batch(image, cfg)
    if plan is not None and len(plan) != cfg.depth:
        raise ValueError(f"plan covers {len(plan)} blocks, backbone has {cfg.depth}")
    x = ad.bias_add(embed_patches(arr, backbone), backbone.pos_embed)
    for i, blk in enumerate(backbone.blocks):
        x = block_forward(x, blk, plan[i] if plan is not None else None)
    return ad.reshape(x, x.shape[1:]) if single else x


def decode_mask(tokens: Tensor, head: MaskHead) -> Tensor:
    """Per-patch logits tiled into a full-resolution ``(B,) H x W`` logit map."""
    cfg = head.config
    n, d, p, g = cfg.num_tokens, cfg.d_model, cfg.patch_size, cfg.grid
    single = tokens.ndim == 2
    if tokens.shape[-2:] != (n, d) or tokens.ndim not in (2, 3):
        raise ShapeError(f"mask head expects (B,) {n} x {d} tokens, got {tokens.shape}")
    if single:
        tokens = ad.reshape(tokens, (1, n, d))
    B = tokens.shape[0]
    z = ad.layer_norm(tokens, head._unit, head._zero)
    z = ad.bias_add(ad.matmul(z, head.W), head.b)
    z = ad.transpose(ad.reshape(z, (B, g, g, p, p)), (0, 1, 3, 2, 4))
    z = ad.reshape(z, (B, cfg.image_size, cfg.image_size))
    return ad.reshape(z, z.shape[1:]) if single else z
