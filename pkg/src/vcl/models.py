"""Vision Transformer classifier and residual CNN with a dense transfer head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kv
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    dropout,
    gelu,
    get_dtype,
    layernorm,
    matmul,
    record,
    relu,
    softmax,
)

CHECKPOINT_MAGIC = b"VCL1"
_KIND_CODES = {"vit": 0, "cnn": 1}


class CheckpointError(ValueError):
    pass


class UnsupportedOperation(TypeError):
    """The operation is not defined for this model kind."""


@dataclass(frozen=True)
class ViTConfig:
    image_hw: tuple = (128, 128)
    channels: int = 3
    patch_size: int = 64
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_head_units: tuple = (2048, 1024)
    transformer_dropout: float = 0.1
    head_dropout: float = 0.5
    num_classes: int = 37

    def __post_init__(self):
        h, w = self.image_hw
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ValueError(f"image {h}x{w} is not divisible into {p}x{p} patches")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 1 or self.channels < 1 or self.num_layers < 0:
            raise ValueError("num_classes and channels must be positive, num_layers non-negative")

    @property
    def num_patches(self) -> int:
        h, w = self.image_hw
        return h * w // self.patch_size**2


@dataclass(frozen=True)
class CnnConfig:
    image_hw: tuple = (32, 32)
    channels: int = 1
    conv_blocks: tuple = ((16, 3, 1), (32, 3, 2), (32, 3, 2))  # (filters, kernel, stride)
    residual: bool = True
    head_units: tuple = (1024, 512)
    head_dropout: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        if not self.conv_blocks:
            raise ValueError("a CNN needs at least one conv block")
        if tuple(self.head_units) != (1024, 512):
            raise ValueError(f"head units are fixed at (1024, 512), got {self.head_units}")
        shapes = self.block_shapes()
        if min(shapes[-1][:2]) < 2:
            raise ValueError(f"final feature map {shapes[-1][:2]} is smaller than 2x2")
        if self.residual:
            for i in range(2, len(shapes)):
                (sh, sw, sc), (th, tw, tc) = shapes[i - 2], shapes[i]
                if sh % th or sw % tw or sc > tc:
                    raise ValueError(f"skip into block {i} cannot map {shapes[i - 2]} onto {shapes[i]}")

    def block_shapes(self) -> list:
        h, w = self.image_hw
        shapes = []
        for filters, _, stride in self.conv_blocks:
            h, w = -(-h // stride), -(-w // stride)
            shapes.append((h, w, filters))
        return shapes


@dataclass
class Model:
    """A parameter collection plus the kind-specific forward pass.

    ``frozen`` names parameters the optimizer must leave untouched; they still
    take part in gradient flow.
    """

    kind: str
    config: object
    params: dict
    frozen: set = field(default_factory=set)

    @property
    def feature_taps(self) -> list:
        if self.kind != "cnn":
            return []
        return [f"block{i}" for i in range(len(self.config.conv_blocks))]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> list:
        return [n for n in sorted(self.params) if n not in self.frozen]

    def forward(self, x, train_mode: bool = False, rng=None) -> Tensor:
        if self.kind == "vit":
            return vit_forward(self, x, train_mode, rng)
        return cnn_forward(self, x, train_mode, rng)[0]

    def forward_with_taps(self, x, train_mode: bool = False, rng=None):
        if self.kind != "cnn":
            raise UnsupportedOperation("feature taps exist only for convolutional models")
        return cnn_forward(self, x, train_mode, rng)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- initialisation -------------------------------------------------------------
def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=get_dtype()), requires_grad=True)


def init_vit(cfg: ViTConfig, rng: np.random.Generator) -> Model:
    d = cfg.embed_dim
    patch_dim = cfg.patch_size**2 * cfg.channels
    raw = {
        "patch_w": _trunc_normal(rng, (patch_dim, d)),
        "patch_b": np.zeros(d),
        "cls_token": np.zeros((1, 1, d)),
        "pos_embed": _trunc_normal(rng, (1, cfg.num_patches + 1, d)),
    }
    for i in range(cfg.num_layers):
        pre = f"enc{i}."
        for ln in ("ln1", "ln2"):
            raw[pre + ln + "_g"] = np.ones(d)
            raw[pre + ln + "_b"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            raw[pre + f"attn_{proj}_w"] = _trunc_normal(rng, (d, d))
            raw[pre + f"attn_{proj}_b"] = np.zeros(d)
        raw[pre + "mlp1_w"] = _trunc_normal(rng, (d, 2 * d))
        raw[pre + "mlp1_b"] = np.zeros(2 * d)
        raw[pre + "mlp2_w"] = _trunc_normal(rng, (2 * d, d))
        raw[pre + "mlp2_b"] = np.zeros(d)
    raw["ln_f_g"] = np.ones(d)
    raw["ln_f_b"] = np.zeros(d)
    width = d
    for j, units in enumerate(cfg.mlp_head_units):
        raw[f"head{j}_w"] = _trunc_normal(rng, (width, units))
        raw[f"head{j}_b"] = np.zeros(units)
        width = units
    raw["out_w"] = _trunc_normal(rng, (width, cfg.num_classes))
    raw["out_b"] = np.zeros(cfg.num_classes)
    return Model("vit", cfg, {k: _param(v) for k, v in raw.items()})


def init_cnn(cfg: CnnConfig, rng: np.random.Generator) -> Model:
    raw = {}
    cin = cfg.channels
    for i, (filters, ksize, _) in enumerate(cfg.conv_blocks):
        raw[f"conv{i}_w"] = _glorot(rng, (ksize, ksize, cin, filters), ksize * ksize * cin, ksize * ksize * filters)
        raw[f"conv{i}_b"] = np.zeros(filters)
        cin = filters
    h, w, c = cfg.block_shapes()[-1]
    width = h * w * c
    for j, units in enumerate(cfg.head_units):
        raw[f"dense{j}_w"] = _glorot(rng, (width, units), width, units)
        raw[f"dense{j}_b"] = np.zeros(units)
        width = units
    raw["out_w"] = _glorot(rng, (width, cfg.num_classes), width, cfg.num_classes)
    raw["out_b"] = np.zeros(cfg.num_classes)
    return Model("cnn", cfg, {k: _param(v) for k, v in raw.items()})


def build_model(cfg, rng: np.random.Generator) -> Model:
    if isinstance(cfg, ViTConfig):
        return init_vit(cfg, rng)
    if isinstance(cfg, CnnConfig):
        return init_cnn(cfg, rng)
    raise TypeError(f"unknown model config {type(cfg).__name__}")


# -- ViT ---------------------------------------------------------------------------
def _patch_view(x: np.ndarray, p: int) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, (h // p) * (w // p), p * p * c)


def _unpatch_view(patches: np.ndarray, p: int, hw) -> np.ndarray:
    n = patches.shape[0]
    h, w = hw
    c = patches.shape[2] // (p * p)
    return patches.reshape(n, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


def patchify(x, p: int) -> Tensor:
    """Cut (N, H, W, C) into (N, HW/P^2, P*P*C) row-major flattened patches."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4:
        raise ValueError(f"patchify expects (N, H, W, C), got {x.shape}")
    _, h, w, _ = x.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image H={h}, W={w}")
    return record(_patch_view(x.data, p), (x,), lambda g: (_unpatch_view(g, p, (h, w)),), "patchify")


def unpatchify(patches, p: int, hw) -> Tensor:
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    return record(_unpatch_view(patches.data, p, hw), (patches,), lambda g: (_patch_view(g, p),), "unpatchify")


def _dense(x: Tensor, params: dict, name: str) -> Tensor:
    return matmul(x, params[name + "_w"]) + params[name + "_b"]


def msa(x: Tensor, params: dict, num_heads: int, prefix: str = "", attn_out: Optional[list] = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, T, D) tokens.

    ``params`` holds ``attn_{q,k,v,o}_{w,b}`` under ``prefix``. Attention
    weights, shaped (B, heads, T, T), are appended to ``attn_out`` if given.
    """
    b, t, d = x.shape
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(name):
        y = _dense(x, params, prefix + name)
        return y.reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("attn_q"), heads("attn_k"), heads("attn_v")
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(weights.data)
    mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return _dense(mixed, params, prefix + "attn_o")


def vit_forward(m: Model, x, train_mode: bool = False, rng=None, attn_out: Optional[list] = None) -> Tensor:
    cfg: ViTConfig = m.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    expected = tuple(cfg.image_hw) + (cfg.channels,)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"ViT expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    p = m.params
    n = x.shape[0]
    tokens = _dense(patchify(x, cfg.patch_size), p, "patch")
    cls = broadcast_to(p["cls_token"], (n, 1, cfg.embed_dim))
    h = concat([cls, tokens], axis=1) + p["pos_embed"]
    rate = cfg.transformer_dropout
    for i in range(cfg.num_layers):
        pre = f"enc{i}."
        a = layernorm(h, p[pre + "ln1_g"], p[pre + "ln1_b"])
        a = msa(a, p, cfg.num_heads, pre, attn_out)
        h = h + dropout(a, rate, rng, train_mode)
        f = layernorm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
        f = gelu(_dense(f, p, pre + "mlp1"))
        f = dropout(_dense(dropout(f, rate, rng, train_mode), p, pre + "mlp2"), rate, rng, train_mode)
        h = h + f
    h = layernorm(h, p["ln_f_g"], p["ln_f_b"])
    z = h[:, 0, :]
    for j in range(len(cfg.mlp_head_units)):
        z = dropout(gelu(_dense(z, p, f"head{j}")), cfg.head_dropout, rng, train_mode)
    return _dense(z, p, "out")


# -- CNN ---------------------------------------------------------------------------
def _shortcut(src: Tensor, like_shape: tuple) -> Tensor:
    """Parameter-free identity skip: stride-subsample, then zero-pad channels."""
    _, sh, sw, sc = src.shape
    _, th, tw, tc = like_shape
    ry, rx = sh // th, sw // tw
    if ry > 1 or rx > 1:
        src = src[:, ::ry, ::rx, :]
    if tc > sc:
        pad = Tensor(np.zeros(src.shape[:3] + (tc - sc,), dtype=src.data.dtype))
        src = concat([src, pad], axis=3)
    return src


def cnn_forward(m: Model, x, train_mode: bool = False, rng=None):
    """Return ``(logits, taps)``; taps maps ``block<i>`` to its output map."""
    cfg: CnnConfig = m.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    expected = tuple(cfg.image_hw) + (cfg.channels,)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"CNN expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    p = m.params
    taps = {}
    outputs = []
    h = x
    for i, (_, _, stride) in enumerate(cfg.conv_blocks):
        h = relu(conv2d(h, p[f"conv{i}_w"], stride, "same") + p[f"conv{i}_b"])
        if cfg.residual and i >= 2 and i % 2 == 0:
            h = h + _shortcut(outputs[i - 2], h.shape)
        outputs.append(h)
        taps[f"block{i}"] = h
    z = h.reshape(h.shape[0], -1)
    for j in range(len(cfg.head_units)):
        z = dropout(relu(_dense(z, p, f"dense{j}")), cfg.head_dropout, rng, train_mode)
    return _dense(z, p, "out"), taps


def freeze_backbone(m: Model) -> Model:
    """Mark every conv parameter frozen (in place) and return the model."""
    if m.kind != "cnn":
        raise UnsupportedOperation(f"freeze_backbone needs a convolutional model, got {m.kind!r}")
    m.frozen |= {name for name in m.params if name.startswith("conv")}
    return m


# -- checkpoints -------------------------------------------------------------------
def _config_text(m: Model, class_names=None) -> str:
    values = kv.to_dict(m.config)
    values["frozen"] = ",".join(sorted(m.frozen))
    if class_names is not None:
        values["class_names"] = json.dumps(list(class_names))
    return "".join(f"{k}={v}\n" for k, v in values.items())


def save_checkpoint(path, m: Model, class_names=None) -> None:
    chunks = [CHECKPOINT_MAGIC, bytes([_KIND_CODES[m.kind]])]
    text = _config_text(m, class_names).encode("utf-8")
    chunks.append(struct.pack("<I", len(text)) + text)
    chunks.append(struct.pack("<I", len(m.params)))
    for name in sorted(m.params):
        data = m.params[name].data
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(model, class_names)``; ``class_names`` may be None."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC or len(buf) < 5:
        raise CheckpointError("bad checkpoint header")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if buf[4] not in kinds:
        raise CheckpointError("bad checkpoint header")
    kind = kinds[buf[4]]
    try:
        pos = 5
        (tlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        text = buf[pos : pos + tlen].decode("utf-8")
        pos += tlen
        values = dict(line.split("=", 1) for line in text.splitlines() if line)
        frozen = {n for n in values.pop("frozen", "").split(",") if n}
        names = values.pop("class_names", None)
        class_names = json.loads(names) if names is not None else None
        cfg = kv.from_dict(ViTConfig if kind == "vit" else CnnConfig, values)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"checkpoint truncated inside parameter {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
            params[name] = _param(arr)
    except (struct.error, UnicodeDecodeError, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    reference = build_model(cfg, np.random.default_rng(0))
    if set(reference.params) != set(params) or any(reference.params[k].shape != params[k].shape for k in params):
        raise CheckpointError("checkpoint parameters do not match its configuration")
    return Model(kind, cfg, params, frozen), class_names
