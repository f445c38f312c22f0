"""Adapter and LoRA modules, and the four-axis descriptor that unifies them.

Both elements produce an additive correction ``dh`` to a hidden state:

* adapter: ``dh = f(h @ W_down + b_down) @ W_up + b_up``
* LoRA:    ``dh = s * (x @ A.T) @ B.T``, i.e. a rank-``r`` update of ``x @ W0``

Up-projections start at exactly zero, so a freshly built element leaves the
host network's function untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "Location",
    "Insertion",
    "AdapterModule",
    "LoraModule",
    "Injection",
    "DesignElement",
    "adapter_delta",
    "adapter_apply_sequential",
    "adapter_apply_parallel",
    "lora_delta",
    "lora_apply",
    "describe",
    "adapter_param_count",
    "lora_param_count",
]


class Location(str, Enum):
    ATTN_SUBLAYER = "attn_sublayer"
    FFN_SUBLAYER = "ffn_sublayer"
    ATTN_QUERY = "attn_query"
    ATTN_VALUE = "attn_value"


class Insertion(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


_ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu}


def adapter_param_count(d: int, hidden: int) -> int:
    """Weights and biases of one bottleneck adapter."""
    return d * hidden + hidden + hidden * d + d


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    """Weights of one low-rank pair (no biases); ``2*d*r`` when square."""
    return rank * d_in + d_out * rank


class AdapterModule:
    """Down-projection, activation, up-projection, optional internal skip."""

    def __init__(self, d: int, hidden: int, activation: str = "gelu",
                 skip_connect: bool = True, rng: np.random.Generator | None = None,
                 init_std: float = 0.02):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}, got {activation!r}")
        if not 0 < hidden < d:
            raise ValueError(f"adapter hidden size must satisfy 0 < hidden < d, got hidden={hidden}, d={d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.hidden = hidden
        self.activation = activation
        self.skip_connect = skip_connect
        self.W_down = Tensor(rng.normal(0.0, init_std, (d, hidden)))
        self.b_down = Tensor(np.zeros(hidden))
        self.W_up = Tensor(np.zeros((hidden, d)))
        self.b_up = Tensor(np.zeros(d))

    def parameters(self) -> dict[str, Tensor]:
        return {"W_down": self.W_down, "b_down": self.b_down,
                "W_up": self.W_up, "b_up": self.b_up}

    def num_parameters(self) -> int:
        return adapter_param_count(self.d, self.hidden)

    def __repr__(self) -> str:
        return (f"AdapterModule(d={self.d}, hidden={self.hidden}, "
                f"activation={self.activation!r}, skip_connect={self.skip_connect})")


class LoraModule:
    """Low-rank pair wrapping one projection: ``A`` is r x d_in, ``B`` is d_out x r."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float = 1.0,
                 target: str = "", rng: np.random.Generator | None = None,
                 init_std: float = 0.02):
        if rank < 1 or rank >= min(d_in, d_out):
            raise ValueError(f"LoRA rank must satisfy 1 <= r < min(d_in, d_out), got r={rank}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.scale = float(scale)
        self.target = target
        self.A = Tensor(rng.normal(0.0, init_std, (rank, d_in)))
        self.B = Tensor(np.zeros((d_out, rank)))

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}

    def num_parameters(self) -> int:
        return lora_param_count(self.d_in, self.d_out, self.rank)

    def __repr__(self) -> str:
        return (f"LoraModule(d_in={self.d_in}, d_out={self.d_out}, rank={self.rank}, "
                f"scale={self.scale}, target={self.target!r})")


def _check_width(x: Tensor, d: int, what: str) -> None:
    if x.ndim < 1 or x.shape[-1] != d:
        raise ShapeError(f"{what}: expected last dimension {d}, got shape {x.shape}")


def adapter_delta(x: Tensor, adapter: AdapterModule) -> Tensor:
    _check_width(x, adapter.d, "adapter input")
    z = ad.bias_add(ad.matmul(x, adapter.W_down), adapter.b_down)
    z = _ACTIVATIONS[adapter.activation](z)
    return ad.bias_add(ad.matmul(z, adapter.W_up), adapter.b_up)


def adapter_apply_sequential(h: Tensor, adapter: AdapterModule) -> Tensor:
    """Transform a sublayer output: ``h + dh(h)``, or ``dh(h)`` without skip."""
    delta = adapter_delta(h, adapter)
    return ad.add(h, delta) if adapter.skip_connect else delta


def adapter_apply_parallel(x: Tensor, sublayer_out: Tensor, adapter: AdapterModule) -> Tensor:
    """Combine a sublayer with a side branch on its input: ``out + dh(x) + x``.

    The ``+ x`` term is the block's residual connection; callers must not add
    it a second time.
    """
    if x.shape != sublayer_out.shape:
        raise ShapeError(f"parallel adapter: input {x.shape} and sublayer output "
                         f"{sublayer_out.shape} differ")
    return ad.add(ad.add(sublayer_out, adapter_delta(x, adapter)), x)


def lora_delta(x: Tensor, lora: LoraModule) -> Tensor:
    """``s * (x @ A.T) @ B.T`` without the base projection."""
    _check_width(x, lora.d_in, "LoRA input")
    low = ad.matmul(x, ad.transpose(lora.A, (1, 0)))
    return ad.mul(ad.matmul(low, ad.transpose(lora.B, (1, 0))), lora.scale)


def lora_apply(x: Tensor, weight: Tensor, lora: LoraModule, bias: Tensor | None = None) -> Tensor:
    """``x @ W0 (+ b) + s * (x @ A.T) @ B.T``."""
    if weight.shape != (lora.d_in, lora.d_out):
        raise ShapeError(f"LoRA wraps a {lora.d_in}x{lora.d_out} projection, got {weight.shape}")
    h = ad.matmul(x, weight)
    if bias is not None:
        h = ad.bias_add(h, bias)
    if lora.scale == 0.0:
        return h
    return ad.add(h, lora_delta(x, lora))


@dataclass(frozen=True)
class Injection:
    """One element placed at one location of a transformer block."""

    location: Location
    insertion: Insertion
    element: AdapterModule | LoraModule

    def __post_init__(self):
        lora = isinstance(self.element, LoraModule)
        proj = self.location in (Location.ATTN_QUERY, Location.ATTN_VALUE)
        if lora != proj:
            raise ValueError(f"{type(self.element).__name__} cannot sit at {self.location.value}")
        if lora and self.insertion is not Insertion.PARALLEL:
            raise ValueError("LoRA is always a parallel branch of its projection")


@dataclass(frozen=True)
class DesignElement:
    functional_form: str
    insertion_form: str
    modified_location: str
    final_function: str


def describe(injection: Injection) -> DesignElement:
    """The four-column descriptor of a placed element."""
    loc = injection.location.value
    if isinstance(injection.element, LoraModule):
        return DesignElement("x W_down W_up", "parallel", loc, "h += s * dh")
    if injection.insertion is Insertion.SEQUENTIAL:
        form = "f(h W_down) W_up"
    else:
        form = "f(h W_down) W_up + x"
    return DesignElement(form, injection.insertion.value, loc, "h += dh")
