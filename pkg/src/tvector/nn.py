"""Building blocks: per-frame TDNN, sinusoidal positions, memory attention,
post-norm encoder block and statistics pooling.

Every block is a parameter record plus a forward function. Inputs may carry
leading batch axes; blocks act on the last two (frames x features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

SCALE_MODES = ("inv_sqrt_dk", "inv_sqrt_d")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name, dtype=values.dtype)


class Module:
    """Anything exposing named parameters in a fixed declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass
class Affine(Module):
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, fan_in: int, fan_out: int, dtype=np.float64) -> "Affine":
        return cls(_param(glorot(rng, fan_in, fan_out, dtype), "weight"),
                   _param(np.zeros(fan_out, dtype=dtype), "bias"))

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"affine expects width {self.weight.shape[0]}, got {x.shape}")
        return tn.matmul(x, self.weight) + self.bias


@dataclass
class TdnnLayer(Module):
    """Context-width-1 TDNN: the same affine map applied to every frame."""

    affine: Affine
    activation: str = "relu"

    @classmethod
    def init(cls, rng, fan_in: int, fan_out: int, activation: str = "relu", dtype=np.float64):
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        return cls(Affine.init(rng, fan_in, fan_out, dtype), activation)

    @property
    def weight(self) -> Tensor:
        return self.affine.weight

    @property
    def bias(self) -> Tensor:
        return self.affine.bias

    def named_parameters(self, prefix=""):
        yield from self.affine.named_parameters(prefix)


def tdnn_forward(x: Tensor, layer: TdnnLayer) -> Tensor:
    y = layer.affine(tn.as_tensor(x))
    return tn.relu(y) if layer.activation == "relu" else y


def positional_encoding(T: int, D: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, wavelength base 10000."""
    if D % 2:
        raise ValueError(f"positional encoding needs an even width, got {D}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


@dataclass
class MultiHeadAttentionMem(Module):
    """Multi-head attention whose keys and values also see a memory block.

    Per-head projections are stored fused as D x D matrices; head ``i`` uses
    columns ``i*D_k:(i+1)*D_k``.
    """

    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    scale_mode: str = "inv_sqrt_dk"

    @classmethod
    def init(cls, rng, dim: int, heads: int, scale_mode="inv_sqrt_dk", dtype=np.float64):
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        if scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale mode {scale_mode!r}")
        w = [_param(glorot(rng, dim, dim, dtype), n) for n in ("w_q", "w_k", "w_v", "w_o")]
        return cls(heads, *w, scale_mode=scale_mode)

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def scale(self) -> float:
        width = self.dim // self.heads if self.scale_mode == "inv_sqrt_dk" else self.dim
        return 1.0 / math.sqrt(width)

    def named_parameters(self, prefix=""):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            yield prefix + name, getattr(self, name)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, rows, dim = x.shape
    y = tn.reshape(x, (*lead, rows, heads, dim // heads))
    n = len(lead)
    return tn.permute(y, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, rows, dk = x.shape
    n = len(lead)
    y = tn.permute(x, (*range(n), n + 1, n, n + 2))
    return tn.reshape(y, (*lead, rows, heads * dk))


def mha_mem_forward(x: Tensor, mem, attn: MultiHeadAttentionMem, return_weights: bool = False):
    """Queries from ``x``; keys and values from the rows of ``[mem; x]``.

    ``mem`` is None for memoryless attention. It is always detached before
    use, so no gradient flows back into whatever produced it.
    """
    x = tn.as_tensor(x)
    if x.shape[-2] == 0:
        raise DimensionError("attention over zero frames")
    if x.shape[-1] != attn.dim:
        raise DimensionError(f"attention width {attn.dim}, input {x.shape}")
    context = x
    if mem is not None:
        mem = tn.stop_gradient(tn.as_tensor(mem, dtype=x.dtype))
        if mem.shape[-1] != attn.dim:
            raise DimensionError(f"memory width {mem.shape[-1]} does not match {attn.dim}")
        if mem.shape[:-2] != x.shape[:-2]:
            mem = Tensor(np.broadcast_to(mem.data, x.shape[:-2] + mem.shape[-2:]), dtype=x.dtype)
        context = tn.concat_rows([mem, x])
    q = _split_heads(tn.matmul(x, attn.w_q), attn.heads)
    k = _split_heads(tn.matmul(context, attn.w_k), attn.heads)
    v = _split_heads(tn.matmul(context, attn.w_v), attn.heads)
    weights = tn.softmax_rows(tn.scale(tn.matmul(q, tn.transpose(k)), attn.scale))
    out = tn.matmul(_merge_heads(tn.matmul(weights, v)), attn.w_o)
    return (out, weights) if return_weights else out


@dataclass
class LayerNormParams(Module):
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int, dtype=np.float64) -> "LayerNormParams":
        return cls(_param(np.ones(dim, dtype=dtype), "gain"), _param(np.zeros(dim, dtype=dtype), "bias"))

    def named_parameters(self, prefix=""):
        yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias)


@dataclass
class EncoderBlock(Module):
    attention: MultiHeadAttentionMem
    ffn_in: Affine
    ffn_out: Affine
    norm1: LayerNormParams
    norm2: LayerNormParams

    @classmethod
    def init(cls, rng, dim: int, heads: int, ffn_width: int = 2048,
             scale_mode="inv_sqrt_dk", dtype=np.float64) -> "EncoderBlock":
        return cls(
            MultiHeadAttentionMem.init(rng, dim, heads, scale_mode, dtype),
            Affine.init(rng, dim, ffn_width, dtype),
            Affine.init(rng, ffn_width, dim, dtype),
            LayerNormParams.init(dim, dtype),
            LayerNormParams.init(dim, dtype),
        )

    def named_parameters(self, prefix=""):
        yield from self.attention.named_parameters(prefix + "attn.")
        yield from self.ffn_in.named_parameters(prefix + "ffn_in.")
        yield from self.ffn_out.named_parameters(prefix + "ffn_out.")
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield from self.norm2.named_parameters(prefix + "norm2.")


def encoder_block_forward(x: Tensor, mem_layer, block: EncoderBlock) -> Tensor:
    """Post-norm block: norm(x + attn(x)) then norm(y + ffn(y))."""
    x = tn.as_tensor(x)
    y1 = block.norm1(x + mha_mem_forward(x, mem_layer, block.attention))
    hidden = block.ffn_out(tn.relu(block.ffn_in(y1)))
    return block.norm2(y1 + hidden)


@dataclass
class MemoryBank:
    """Detached per-layer hidden states carried from one window to the next."""

    layers: list = field(default_factory=list)

    @classmethod
    def zeros(cls, depth: int, rows: int, dim: int, batch: tuple = (), dtype=np.float64):
        return cls([np.zeros(batch + (rows, dim), dtype=dtype) for _ in range(depth)])

    def __len__(self) -> int:
        return len(self.layers)

    def update(self, layer: int, hidden: Tensor) -> None:
        self.layers[layer] = tn.stop_gradient(hidden).data


def statistics_pooling(x: Tensor) -> Tensor:
    """Concatenate per-column mean and population std: (..., M, D) -> (..., 1, 2D)."""
    x = tn.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError(f"statistics pooling needs at least one row, got {x.shape}")
    return tn.concat_cols([tn.mean_rows(x), tn.std_rows(x)])
