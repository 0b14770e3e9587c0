"""
Low-rank reparameterized linear maps.

    y = x W^T + b + scale * (x A^T) B^T,   A = down (r x d_in), B = up (d_out x r)

`up` starts at zero so a fresh adapter is an exact no-op.
"""

import copy
import logging
import math
from typing import Dict, List, Mapping, Optional

import numpy as np

from core.core_errors import NumericsError
from core.core_numerics import Rng, Tensor, tensor, zeros

logger = logging.getLogger(__name__)


class LoraAdapter:
    def __init__(self, down: Tensor, up: Tensor, scale: float):
        if down.data.ndim != 2 or up.data.ndim != 2 or up.dims[1] != down.dims[0]:
            raise NumericsError(f"lora: down {down.dims} and up {up.dims} do not share a rank")
        if down.dims[0] < 1:
            raise NumericsError("lora rank must be >= 1")
        self.down = down
        self.up = up
        self.scale = float(scale)

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, alpha: float, rng: Rng) -> "LoraAdapter":
        if rank < 1:
            raise NumericsError(f"lora rank must be >= 1, got {rank}")
        down = tensor(rng.normal((rank, d_in), scale=1.0 / math.sqrt(d_in)), requires_grad=True)
        up = zeros(d_out, rank, requires_grad=True)
        return cls(down, up, alpha / rank)

    @property
    def rank(self) -> int:
        return self.down.dims[0]

    def delta(self) -> np.ndarray:
        return self.scale * (self.up.data @ self.down.data)

    def parameters(self) -> List[Tensor]:
        return [self.down, self.up]


class ReparamLinear:
    """Frozen-or-trainable base linear map with an optional LoRA adapter."""

    def __init__(self, base_weight, base_bias=None, adapter: Optional[LoraAdapter] = None,
                 frozen: bool = True):
        self.frozen = frozen
        self.base_weight = tensor(base_weight, requires_grad=not frozen)
        if self.base_weight.data.ndim != 2:
            raise NumericsError(f"base weight must be a matrix, got dims {self.base_weight.dims}")
        self.base_bias = None if base_bias is None else tensor(base_bias, requires_grad=not frozen)
        if self.base_bias is not None and self.base_bias.dims != (self.d_out,):
            raise NumericsError(f"bias dims {self.base_bias.dims} do not match d_out {self.d_out}")
        self.adapter = None
        if adapter is not None:
            self.attach(adapter)

    @classmethod
    def from_rng(cls, d_in: int, d_out: int, rng: Rng, bias: bool = True,
                 frozen: bool = True) -> "ReparamLinear":
        weight = rng.normal((d_out, d_in), scale=1.0 / math.sqrt(d_in))
        b = rng.normal(d_out, scale=0.02) if bias else None
        return cls(weight, b, frozen=frozen)

    @property
    def d_in(self) -> int:
        return self.base_weight.dims[1]

    @property
    def d_out(self) -> int:
        return self.base_weight.dims[0]

    def attach(self, adapter: LoraAdapter) -> "ReparamLinear":
        if adapter.down.dims[1] != self.d_in or adapter.up.dims[0] != self.d_out:
            raise NumericsError(f"adapter {adapter.down.dims}/{adapter.up.dims} does not fit "
                                f"{self.d_out}x{self.d_in} weight")
        self.adapter = adapter
        return self

    def with_adapter(self, rank: int, alpha: float, rng: Rng) -> "ReparamLinear":
        return self.attach(LoraAdapter.create(self.d_in, self.d_out, rank, alpha, rng))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.dims[1] != self.d_in:
            raise NumericsError(f"linear: input dims {x.dims} do not match d_in {self.d_in}")
        y = x @ self.base_weight.T
        if self.base_bias is not None:
            y = y + self.base_bias
        if self.adapter is not None:
            y = y + (x @ self.adapter.down.T) @ self.adapter.up.T * self.adapter.scale
        return y

    __call__ = forward

    def merge(self) -> "ReparamLinear":
        """New layer with the adapter folded into the base weight."""
        bias = None if self.base_bias is None else self.base_bias.data
        if self.adapter is None or not np.any(self.adapter.up.data):
            return ReparamLinear(self.base_weight.data, bias, frozen=self.frozen)
        return ReparamLinear(self.base_weight.data + self.adapter.delta(), bias, frozen=self.frozen)

    def clone(self, frozen: Optional[bool] = None) -> "ReparamLinear":
        """Deep copy of base and adapter; optionally change the freeze flag."""
        out = copy.deepcopy(self)
        if frozen is not None:
            out.frozen = frozen
            out.base_weight.requires_grad = not frozen
            if out.base_bias is not None:
                out.base_bias.requires_grad = not frozen
        return out

    def base_parameters(self) -> List[Tensor]:
        return [self.base_weight] + ([self.base_bias] if self.base_bias is not None else [])

    def trainable_parameters(self) -> List[Tensor]:
        params = [] if self.frozen else self.base_parameters()
        return params + (self.adapter.parameters() if self.adapter is not None else [])


# ============================================================================
# TRAINABLE STATE
# ============================================================================
def _trainable_items(name: str, layer: ReparamLinear):
    if not layer.frozen:
        yield f"{name}.weight", layer.base_weight
        if layer.base_bias is not None:
            yield f"{name}.bias", layer.base_bias
    if layer.adapter is not None:
        yield f"{name}.down", layer.adapter.down
        yield f"{name}.up", layer.adapter.up


def trainable_state(layers: Mapping[str, ReparamLinear]) -> Dict[str, np.ndarray]:
    """Copies of every trainable array: adapters, plus base weights of unfrozen layers."""
    return {key: t.data.copy() for name, layer in layers.items() for key, t in _trainable_items(name, layer)}


def adapter_scales(layers: Mapping[str, ReparamLinear]) -> Dict[str, float]:
    return {name: layer.adapter.scale for name, layer in layers.items() if layer.adapter is not None}


def load_trainable_state(layers: Mapping[str, ReparamLinear], state: Mapping[str, np.ndarray]) -> None:
    for name, layer in layers.items():
        for key, target in _trainable_items(name, layer):
            if key not in state:
                raise NumericsError(f"checkpoint state is missing {key}")
            if tuple(state[key].shape) != target.dims:
                raise NumericsError(f"{key}: dims {state[key].shape} do not match {target.dims}")
            target.data[...] = state[key]
