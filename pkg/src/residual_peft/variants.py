"""The four injection variants, backbone freezing and parameter accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import (
    Backbone,
    BackboneConfig,
    MaskHead,
    backbone_param_count,
    decode_mask,
    encode,
    head_param_count,
)
from .elements import (
    AdapterModule,
    Injection,
    Insertion,
    LoraModule,
    Location,
    adapter_param_count,
    lora_param_count,
)

__all__ = [
    "VariantKind",
    "VariantSpec",
    "PeftModel",
    "build_variant",
    "base_model",
    "predict_proba",
    "freeze_backbone",
    "count_trainable",
    "count_by_walk",
    "account",
    "forward",
]


class VariantKind(str, Enum):
    SERIES = "series"
    PARALLEL = "parallel"
    MIXED = "mixed"
    LORA = "lora"


# (location, insertion) per block for each adapter variant
_ADAPTER_LAYOUT = {
    VariantKind.SERIES: ((Location.ATTN_SUBLAYER, Insertion.SEQUENTIAL),
                         (Location.FFN_SUBLAYER, Insertion.SEQUENTIAL)),
    VariantKind.PARALLEL: ((Location.ATTN_SUBLAYER, Insertion.PARALLEL),
                           (Location.FFN_SUBLAYER, Insertion.PARALLEL)),
    VariantKind.MIXED: ((Location.ATTN_SUBLAYER, Insertion.SEQUENTIAL),
                        (Location.FFN_SUBLAYER, Insertion.PARALLEL)),
}


@dataclass(frozen=True)
class VariantSpec:
    kind: VariantKind = VariantKind.MIXED
    adapter_ratio: float = 0.25
    lora_rank: int = 4
    lora_scale: float = 1.0
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if not 0 < self.adapter_ratio < 1:
            raise ValueError(f"adapter_ratio must lie in (0, 1), got {self.adapter_ratio}")
        if not isinstance(self.lora_rank, int) or self.lora_rank < 0:
            raise ValueError(f"lora_rank must be a non-negative integer, got {self.lora_rank!r}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")

    def adapter_hidden(self, d: int) -> int:
        # exact rational product so 0.25 * 768 is 192, not 191
        return int(Fraction(self.adapter_ratio).limit_denominator(10_000) * d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        return out


@dataclass
class PeftModel:
    backbone: Backbone
    head: MaskHead
    spec: VariantSpec | None
    plan: list[list[Injection]]
    freeze_mask: dict[str, bool] = field(default_factory=dict)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def named_peft_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, injections in enumerate(self.plan):
            for inj in injections:
                for name, t in inj.element.parameters().items():
                    yield f"peft.block.{i}.{inj.location.value}.{name}", t

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.backbone.named_parameters()
        yield from self.named_peft_parameters()
        yield from self.head.named_parameters()

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters() if not self.freeze_mask.get(k, False)}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters() if self.freeze_mask.get(k, False)}


def _build_plan(cfg: BackboneConfig, spec: VariantSpec, rng: np.random.Generator) -> list[list[Injection]]:
    d = cfg.d_model
    plan: list[list[Injection]] = []
    for i in range(cfg.depth):
        block: list[Injection] = []
        if spec.kind is VariantKind.LORA:
            if spec.lora_rank == 0:
                plan.append(block)
                continue
            for loc, proj in ((Location.ATTN_QUERY, "q"), (Location.ATTN_VALUE, "v")):
                lora = LoraModule(d, d, spec.lora_rank, spec.lora_scale, target=f"block.{i}.attn.W_{proj}", rng=rng)
                block.append(Injection(loc, Insertion.PARALLEL, lora))
        else:
            hidden = spec.adapter_hidden(d)
            for loc, form in _ADAPTER_LAYOUT[spec.kind]:
                adapter = AdapterModule(d, hidden, spec.activation, skip_connect=True, rng=rng)
                block.append(Injection(loc, form, adapter))
        plan.append(block)
    return plan


def build_variant(backbone: Backbone, spec: VariantSpec, head: MaskHead | None = None,
                  seed: int = 0) -> PeftModel:
    """Wrap ``backbone`` with the elements of ``spec``; frozen and identity at init."""
    cfg = backbone.config
    d = cfg.d_model
    if spec.kind is VariantKind.LORA:
        if spec.lora_rank >= d:
            raise ValueError(f"LoRA rank {spec.lora_rank} is not a bottleneck for d={d}")
    else:
        hidden = spec.adapter_hidden(d)
        if not 0 < hidden < d:
            raise ValueError(f"adapter ratio {spec.adapter_ratio} gives hidden size {hidden} for d={d}")
    rng = np.random.default_rng([seed, 0x5EED])
    model = PeftModel(backbone, head if head is not None else MaskHead(cfg), spec, _build_plan(cfg, spec, rng))
    freeze_backbone(model)
    return model


def base_model(backbone: Backbone, head: MaskHead | None = None) -> PeftModel:
    """The frozen backbone and head with nothing injected."""
    model = PeftModel(backbone, head if head is not None else MaskHead(backbone.config), None,
                      [[] for _ in backbone.blocks])
    freeze_backbone(model)
    return model


def freeze_backbone(model: PeftModel) -> dict[str, bool]:
    """Mark every encoder parameter frozen and everything else trainable."""
    mask = {name: True for name, _ in model.backbone.named_parameters()}
    for name, _ in model.named_peft_parameters():
        mask[name] = False
    for name, _ in model.head.named_parameters():
        mask[name] = False
    for name, t in model.named_parameters():
        t.requires_grad = not mask[name]
        if mask[name]:
            t.grad = None
    model.freeze_mask = mask
    return mask


def account(cfg: BackboneConfig, spec: VariantSpec | None) -> dict:
    """Closed-form parameter counts; needs only the configuration."""
    backbone = backbone_param_count(cfg)
    head = head_param_count(cfg)
    if spec is None:
        peft = 0
    elif spec.kind is VariantKind.LORA:
        peft = cfg.depth * 2 * lora_param_count(cfg.d_model, cfg.d_model, spec.lora_rank)
    else:
        peft = cfg.depth * 2 * adapter_param_count(cfg.d_model, spec.adapter_hidden(cfg.d_model))
    trainable = peft + head
    total = backbone + trainable
    return {
        "backbone": backbone,
        "peft": peft,
        "head": head,
        "trainable": trainable,
        "frozen": backbone,
        "total": total,
        "trainable_fraction": trainable / total,
        "peft_fraction_of_backbone": peft / backbone,
    }


def count_trainable(model: PeftModel) -> dict:
    return account(model.config, model.spec)


def count_by_walk(model: PeftModel) -> dict:
    """Same groups as :func:`count_trainable`, by summing actual tensor sizes."""
    groups = {"backbone": 0, "peft": 0, "head": 0}
    trainable = frozen = 0
    for name, t in model.named_parameters():
        group = "peft" if name.startswith("peft.") else "head" if name.startswith("head.") else "backbone"
        groups[group] += t.size
        if model.freeze_mask.get(name, False):
            frozen += t.size
        else:
            trainable += t.size
    total = trainable + frozen
    return {**groups, "trainable": trainable, "frozen": frozen, "total": total,
            "trainable_fraction": trainable / total,
            "peft_fraction_of_backbone": groups["peft"] / groups["backbone"]}


def forward(model: PeftModel, image) -> Tensor:
    """Mask logits for one image (``H x W``) or a batch (``B x H x W``)."""
    return decode_mask(encode(image, model.backbone, model.plan), model.head)


def predict_proba(model: PeftModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Sigmoid mask probabilities, evaluated without recording a tape."""
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(ad.sigmoid(forward(model, images[start:start + batch_size])).data)
    return np.concatenate(chunks, axis=0)
