"""A small, configurable Vision Transformer on top of :mod:`vitdp.tensor`.

Pipeline: non-overlapping patches -> shared linear embedding -> class token
and learned positions -> ``depth`` pre-norm encoder blocks -> final norm ->
linear head on the class-token row. No dropout, no convolutional stem.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, InputError
from .tensor import Tape, Tensor

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 4
    num_classes: int = 10

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim", "num_heads", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mlp_dim < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} leaves no hidden units")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


# ViT-B/16 geometry, for reference and shape tests.
VIT_B_16 = ViTConfig(image_size=224, patch_size=16, embed_dim=768, num_heads=12, depth=12, mlp_ratio=4, num_classes=1000)


def seq_len(cfg: ViTConfig) -> int:
    """Token count: one per patch plus the class token."""
    return cfg.num_patches + 1


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (seq_len(cfg), d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "norm1.gain": (d,),
            b + "norm1.bias": (d,),
            b + "attn.qkv.weight": (d, 3 * d),
            b + "attn.qkv.bias": (3 * d,),
            b + "attn.proj.weight": (d, d),
            b + "attn.proj.bias": (d,),
            b + "norm2.gain": (d,),
            b + "norm2.bias": (d,),
            b + "mlp.fc1.weight": (d, cfg.mlp_dim),
            b + "mlp.fc1.bias": (cfg.mlp_dim,),
            b + "mlp.fc2.weight": (cfg.mlp_dim, d),
            b + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.gain": (d,),
        "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    })
    return shapes


def param_count(cfg: ViTConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ViTConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Deterministic initialization for ``(cfg, seed)``.

    Matrices are uniform in +-1/sqrt(fan_in); positions uniform in +-0.02;
    norm gains are one; biases and the class token are zero.
    """
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif name == "pos_embed":
            arr = rng.uniform(-0.02, 0.02, size=shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, num_patches, C*patch*patch], channel-major per patch."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch * patch))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_trailing(T.matmul(x, w), b)


def _attention(cfg: ViTConfig, p: Mapping[str, Tensor], prefix: str, h: Tensor) -> Tensor:
    bsz, t, d = h.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    qkv = _linear(T.reshape(h, (bsz * t, d)), p[prefix + "qkv.weight"], p[prefix + "qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (bsz, t, 3, nh, hd)), (2, 0, 3, 1, 4))
    q, k, v = (T.take(qkv, i, axis=0) for i in range(3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz * t, d))
    out = _linear(ctx, p[prefix + "proj.weight"], p[prefix + "proj.bias"])
    return T.reshape(out, (bsz, t, d))


def _mlp(p: Mapping[str, Tensor], prefix: str, h: Tensor) -> Tensor:
    bsz, t, d = h.shape
    x = T.reshape(h, (bsz * t, d))
    x = T.gelu(_linear(x, p[prefix + "fc1.weight"], p[prefix + "fc1.bias"]))
    x = _linear(x, p[prefix + "fc2.weight"], p[prefix + "fc2.bias"])
    return T.reshape(x, (bsz, t, d))


def _check_images(cfg: ViTConfig, images: np.ndarray) -> None:
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != want:
        raise InputError(f"expected images of shape [b, {want[0]}, {want[1]}, {want[2]}], got {images.shape}")


def forward_tensors(cfg: ViTConfig, p: Mapping[str, Tensor], images: np.ndarray) -> Tensor:
    """Forward pass over parameter tensors; recorded if a tape is active."""
    images = np.asarray(images)
    _check_images(cfg, images)
    bsz = images.shape[0]
    d = cfg.embed_dim
    dtype = p["patch_embed.weight"].dtype
    patches = patchify(images.astype(dtype, copy=False), cfg.patch_size)
    x = _linear(Tensor(patches.reshape(bsz * cfg.num_patches, cfg.patch_dim)),
                p["patch_embed.weight"], p["patch_embed.bias"])
    x = T.reshape(x, (bsz, cfg.num_patches, d))
    cls = T.expand_leading(T.reshape(p["cls_token"], (1, d)), bsz)
    x = T.add_trailing(T.concat([cls, x], axis=1), p["pos_embed"])
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        h = T.layer_norm(x, p[b + "norm1.gain"], p[b + "norm1.bias"])
        x = T.add(x, _attention(cfg, p, b + "attn.", h))
        h = T.layer_norm(x, p[b + "norm2.gain"], p[b + "norm2.bias"])
        x = T.add(x, _mlp(p, b + "mlp.", h))
    x = T.layer_norm(x, p["norm.gain"], p["norm.bias"])
    return _linear(T.take(x, 0, axis=1), p["head.weight"], p["head.bias"])


def forward(cfg: ViTConfig, params: Mapping[str, np.ndarray], images: np.ndarray) -> np.ndarray:
    """Logits ``[b, num_classes]`` for a batch of images."""
    return forward_tensors(cfg, {k: Tensor(v) for k, v in params.items()}, images).data


def loss_and_grads(cfg: ViTConfig, params: Mapping[str, np.ndarray], images, labels):
    """Cross-entropy loss, top-1 accuracy and per-parameter gradients."""
    with Tape() as tape:
        leaves = {k: tape.watch(Tensor(v)) for k, v in params.items()}
        logits = forward_tensors(cfg, leaves, images)
        loss = T.cross_entropy(logits, labels)
        tape.backward(loss)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))
    return loss.item(), acc, {k: leaves[k].grad for k in params}


# --------------------------------------------------------------------------
# ParamSet helpers
# --------------------------------------------------------------------------


def flatten(params: Mapping[str, np.ndarray], dtype=np.float32) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=dtype).reshape(-1) for v in params.values()])


def unflatten(vec: np.ndarray, like: Mapping[str, np.ndarray]) -> ParamSet:
    need = sum(v.size for v in like.values())
    if vec.size != need:
        raise InputError(f"flat vector has {vec.size} elements, parameters need {need}")
    out: ParamSet = {}
    pos = 0
    for k, v in like.items():
        n = v.size
        out[k] = vec[pos:pos + n].reshape(v.shape).astype(v.dtype, copy=True)
        pos += n
    return out


def params_to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    """Length-prefixed named tensors, little-endian float32.

    Layout: u32 count, then per tensor u32 name length, UTF-8 name,
    u32 ndim, ndim x u32 dims, float32 data.
    """
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ParamSet:
    view = memoryview(data)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", read(4))
    out: ParamSet = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = bytes(read(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        n = math.prod(shape)
        out[name] = np.frombuffer(read(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after checkpoint")
    return out


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: str | Path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())
