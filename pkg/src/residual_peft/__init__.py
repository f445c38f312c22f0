"""Parameter-efficient fine-tuning of a frozen vision transformer, in numpy.

Every injected element (bottleneck adapter or low-rank pair) is an additive
correction ``dh`` to some hidden state of a frozen encoder. The package builds
the four wirings of those elements (series, parallel, mixed, LoRA), trains
them with a tape-based autodiff core and scores them on seeded synthetic
segmentation tasks.
"""

from .backbone import PRESETS, Backbone, BackboneConfig, MaskHead, decode_mask, encode
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthSpec, read_manifest, split_load, synthesize
from .elements import AdapterModule, Injection, Insertion, LoraModule, Location, describe
from .training import AdamWConfig, TrainConfig, evaluate_ap, evaluate_mae, train
from .variants import (
    PeftModel,
    VariantKind,
    VariantSpec,
    account,
    build_variant,
    count_by_walk,
    count_trainable,
    forward,
    freeze_backbone,
)

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "Backbone",
    "BackboneConfig",
    "MaskHead",
    "encode",
    "decode_mask",
    "AdapterModule",
    "LoraModule",
    "Injection",
    "Insertion",
    "Location",
    "describe",
    "VariantKind",
    "VariantSpec",
    "PeftModel",
    "build_variant",
    "freeze_backbone",
    "forward",
    "account",
    "count_trainable",
    "count_by_walk",
    "AdamWConfig",
    "TrainConfig",
    "train",
    "evaluate_mae",
    "evaluate_ap",
    "SynthSpec",
    "synthesize",
    "read_manifest",
    "split_load",
    "save_checkpoint",
    "load_checkpoint",
]
