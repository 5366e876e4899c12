"""Hierarchical T-vector network, the X-vector baseline, and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .nn import (
    SCALE_MODES,
    Affine,
    EncoderBlock,
    MemoryBank,
    Module,
    TdnnLayer,
    encoder_block_forward,
    positional_encoding,
    statistics_pooling,
    tdnn_forward,
)
from .tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"TVEC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TvectorConfig:
    n_speakers: int = 254
    n_features: int = 20
    dim: int = 512
    heads: int = 4
    depth: int = 4
    ffn_width: int = 2048
    window: int = 20
    step: int = 10
    seg_tdnn_width: int = 1500
    clf_hidden: int = 512
    scale_mode: str = "inv_sqrt_dk"
    use_memory: bool = True
    global_relu: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} must be divisible by heads={self.heads}")
        if self.dim % 2:
            raise ValueError(f"dim={self.dim} must be even for positional encoding")
        if not 1 <= self.step <= self.window:
            raise ValueError(f"need 1 <= step <= window, got step={self.step}, window={self.window}")
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be at least 1")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")


@dataclass
class UtteranceScore:
    scores: np.ndarray


def num_segments(T: int, window: int, step: int) -> int:
    if T < window:
        return 1
    return (T - window) // step + 1


def segment_sequence(S, window: int, step: int) -> list[Tensor]:
    """Sliding windows over the frame axis; frames past the last full window are dropped.

    A sequence shorter than one window yields a single right-zero-padded window.
    """
    if window <= 0 or step <= 0:
        raise ValueError(f"window and step must be positive, got {window}, {step}")
    S = tn.as_tensor(S)
    T = S.shape[-2]
    if T < 1:
        raise DimensionError("cannot segment an empty sequence")
    if T < window:
        pad = Tensor(np.zeros(S.shape[:-2] + (window - T, S.shape[-1]), dtype=S.dtype))
        return [tn.concat_rows([S, pad])]
    return [tn.slice_rows(S, i * step, i * step + window)
            for i in range(num_segments(T, window, step))]


def frame_encoder_pass(segments, blocks, use_memory: bool = True, hidden: list | None = None):
    """Run the shared block stack over each window, left to right.

    Layer ``l`` of window ``i`` attends over the detached output of layer ``l``
    at window ``i-1``; the bank starts at zeros for every call. Returns one
    pooled (..., 1, 2D) vector per window. If ``hidden`` is a list, the
    per-window lists of block outputs are appended to it.
    """
    if not segments:
        raise ValueError("no segments to encode")
    first = segments[0]
    bank = None
    if use_memory:
        bank = MemoryBank.zeros(len(blocks), first.shape[-2], first.shape[-1],
                                first.shape[:-2], dtype=first.dtype)
    vectors = []
    for seg in segments:
        h = seg
        outputs = []
        for layer, block in enumerate(blocks):
            h = encoder_block_forward(h, bank.layers[layer] if bank else None, block)
            if bank:
                bank.update(layer, h)
            outputs.append(h)
        if hidden is not None:
            hidden.append(outputs)
        vectors.append(statistics_pooling(h))
    return vectors


def _as_batch(features, dtype) -> Tensor:
    x = tn.as_tensor(features, dtype=dtype)
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    return x


class TvectorModel(Module):
    arch = "tvector"

    def __init__(self, config: TvectorConfig, seed: int = 0, dtype=np.float64):
        self.config = c = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.global_tdnn = TdnnLayer.init(rng, c.n_features, c.dim,
                                          "relu" if c.global_relu else "none", dtype)
        self.frame_blocks = [EncoderBlock.init(rng, c.dim, c.heads, c.ffn_width, c.scale_mode, dtype)
                             for _ in range(c.depth)]
        self.seg_tdnn1 = TdnnLayer.init(rng, 2 * c.dim, c.dim, "relu", dtype)
        self.seg_block = EncoderBlock.init(rng, c.dim, c.heads, c.ffn_width, c.scale_mode, dtype)
        self.seg_tdnn2 = TdnnLayer.init(rng, c.dim, c.seg_tdnn_width, "relu", dtype)
        self.clf1 = Affine.init(rng, 2 * c.seg_tdnn_width, c.clf_hidden, dtype)
        self.clf2 = Affine.init(rng, c.clf_hidden, c.n_speakers, dtype)

    def named_parameters(self, prefix=""):
        yield from self.global_tdnn.named_parameters(prefix + "global_tdnn.")
        for i, block in enumerate(self.frame_blocks):
            yield from block.named_parameters(f"{prefix}frame.{i}.")
        yield from self.seg_tdnn1.named_parameters(prefix + "seg_tdnn1.")
        yield from self.seg_block.named_parameters(prefix + "seg_block.")
        yield from self.seg_tdnn2.named_parameters(prefix + "seg_tdnn2.")
        yield from self.clf1.named_parameters(prefix + "clf1.")
        yield from self.clf2.named_parameters(prefix + "clf2.")

    def forward(self, features, trace: dict | None = None, use_memory: bool | None = None) -> Tensor:
        """Features (..., T, F) -> sigmoid scores (..., 1, K)."""
        c = self.config
        if use_memory is None:
            use_memory = c.use_memory
        x = _as_batch(features, self.dtype)
        if x.ndim < 2 or x.shape[-1] != c.n_features:
            raise DimensionError(f"expected (..., T, {c.n_features}) features, got {x.shape}")
        T = x.shape[-2]
        if T == 0:
            raise DimensionError("empty utterance")
        note = trace.__setitem__ if trace is not None else (lambda k, v: None)
        note("input", x.shape)
        S = tdnn_forward(x, self.global_tdnn) + positional_encoding(T, c.dim).astype(self.dtype)
        note("global_tdnn", S.shape)
        segments = segment_sequence(S, c.window, c.step)
        note("segments", (len(segments),) + segments[0].shape)
        vectors = frame_encoder_pass(segments, self.frame_blocks, use_memory)
        note("frame_pool", vectors[0].shape)
        V = tn.concat_rows(vectors)
        note("segment_vectors", V.shape)
        h = tdnn_forward(V, self.seg_tdnn1)
        note("seg_tdnn1", h.shape)
        h = encoder_block_forward(h, None, self.seg_block)
        note("seg_block", h.shape)
        h = tdnn_forward(h, self.seg_tdnn2)
        note("seg_tdnn2", h.shape)
        u = statistics_pooling(h)
        note("utterance_pool", u.shape)
        h = tn.relu(self.clf1(u))
        note("clf1", h.shape)
        logits = self.clf2(h)
        note("clf2", logits.shape)
        return tn.sigmoid(logits)

    def predict(self, features) -> np.ndarray:
        """Scores as a plain array, (..., K)."""
        return self.forward(features).data[..., 0, :]


class XvectorModel(Module):
    """Per-frame TDNN stack, whole-utterance statistics pooling, two-layer classifier."""

    arch = "xvector"

    def __init__(self, config: TvectorConfig, seed: int = 0, dtype=np.float64):
        self.config = c = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.tdnn = [
            TdnnLayer.init(rng, c.n_features, c.dim, "relu", dtype),
            TdnnLayer.init(rng, c.dim, c.dim, "relu", dtype),
            TdnnLayer.init(rng, c.dim, c.seg_tdnn_width, "relu", dtype),
        ]
        self.clf1 = Affine.init(rng, 2 * c.seg_tdnn_width, c.clf_hidden, dtype)
        self.clf2 = Affine.init(rng, c.clf_hidden, c.n_speakers, dtype)

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.tdnn):
            yield from layer.named_parameters(f"{prefix}tdnn{i + 1}.")
        yield from self.clf1.named_parameters(prefix + "clf1.")
        yield from self.clf2.named_parameters(prefix + "clf2.")

    def forward(self, features, trace: dict | None = None, use_memory=None) -> Tensor:
        c = self.config
        h = _as_batch(features, self.dtype)
        if h.ndim < 2 or h.shape[-1] != c.n_features or h.shape[-2] == 0:
            raise DimensionError(f"expected (..., T, {c.n_features}) features, got {h.shape}")
        for layer in self.tdnn:
            h = tdnn_forward(h, layer)
        u = statistics_pooling(h)
        return tn.sigmoid(self.clf2(tn.relu(self.clf1(u))))

    def predict(self, features) -> np.ndarray:
        return self.forward(features).data[..., 0, :]


ARCHITECTURES = {"tvector": TvectorModel, "xvector": XvectorModel}


def utterance_forward(features, model: TvectorModel) -> UtteranceScore:
    return UtteranceScore(np.asarray(model.predict(features)))


def xvector_forward(features, baseline: XvectorModel) -> UtteranceScore:
    return UtteranceScore(np.asarray(baseline.predict(features)))


def snap_to_float32(model: Module) -> None:
    """Round every parameter to the nearest float32 so it survives a checkpoint exactly."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   "TVEC" | u32 version | u32 n | n bytes of "key=value\n" config text
#   then per tensor: u32 name_len | name | u32 rank | rank x u32 | f32 LE data


def _config_text(model: Module) -> str:
    lines = [f"arch={model.arch}"]
    for f in dataclasses.fields(model.config):
        lines.append(f"{f.name}={_format_value(getattr(model.config, f.name))}")
    return "".join(line + "\n" for line in lines)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_config(text: str) -> tuple[str, TvectorConfig]:
    items = dict(line.split("=", 1) for line in text.splitlines() if line)
    arch = items.pop("arch", "tvector")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r} in checkpoint")
    kwargs = {}
    for f in dataclasses.fields(TvectorConfig):
        if f.name not in items:
            continue
        raw = items.pop(f.name)
        if f.type in ("bool", bool):
            kwargs[f.name] = raw == "true"
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    if items:
        raise ValueError(f"unknown checkpoint config keys: {sorted(items)}")
    return arch, TvectorConfig(**kwargs)


def checkpoint_bytes(model: Module) -> bytes:
    buf = io.BytesIO()
    cfg = _config_text(model).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: Module) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(blob: bytes, dtype=np.float64) -> Module:
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a TVEC checkpoint")
    version, n = struct.unpack_from("<II", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    arch, config = _parse_config(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    model = ARCHITECTURES[arch](config, dtype=dtype)
    for name, p in model.named_parameters():
        if pos >= len(blob):
            raise ValueError(f"checkpoint truncated before {name}")
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        stored = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", view, pos)
        shape = struct.unpack_from(f"<{rank}I", view, pos + 4)
        pos += 4 + 4 * rank
        if stored != name or tuple(shape) != p.shape:
            raise ValueError(f"checkpoint has {stored}{tuple(shape)}, model expects {name}{p.shape}")
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        p.data = values.reshape(shape).astype(dtype)
        p.zero_grad()
    if pos != len(blob):
        raise ValueError("trailing bytes after the last checkpoint tensor")
    return model


def load_checkpoint(path, dtype=np.float64) -> Module:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)
