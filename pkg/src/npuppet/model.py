"""Image-conditioned deformation model.

An encoder maps the target image through three strided convolutions and
three fully connected layers to a 512-dimensional latent code; a decoder
maps the code through three fully connected layers to per-vertex offsets
plus one global 2D bias. Predicted vertices are rest + clamped offsets +
bias, so a zero-parameter model reproduces the rest pose exactly.

All layers run through the differentiation graph; the plain entry points
wrap graph calls on constant leaves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bias_channels,
    clip,
    constant,
    conv2d,
    expand_last,
    leaky_relu,
    matmul,
    mul,
    param,
    reshape,
    sub,
    tslice,
)
from .errors import ShapeError, ValidationError
from .puppet import DeformState, Puppet, make_deform_state

LATENT_DIM = 512
_KERNEL = 5
_STRIDE = 2
_PAD = 2
_SLOPE = 0.2


@dataclass(frozen=True)
class LatentCode:
    """Bottleneck embedding of one image."""

    z: np.ndarray  # (LATENT_DIM,) float64

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if z.shape != (LATENT_DIM,):
            raise ShapeError(f"latent code must have length {LATENT_DIM}, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError("latent code contains non-finite values")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the latent width is fixed."""

    height: int = 256
    width: int = 256
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    enc_fc: tuple[int, int] = (1024, 1024)
    dec_fc: tuple[int, int] = (1024, 1024)
    offset_clamp: float = 2.0

    def __post_init__(self):
        if self.height % 8 != 0 or self.width % 8 != 0 or min(self.height, self.width) < 8:
            raise ValidationError(
                f"model resolution must be a multiple of 8 and at least 8, got "
                f"{self.width}x{self.height}"
            )
        if any(c < 1 for c in (*self.conv_channels, *self.enc_fc, *self.dec_fc)):
            raise ValidationError("all layer widths must be positive")
        if self.offset_clamp <= 0:
            raise ValidationError("offset clamp must be positive")

    @property
    def flat_features(self) -> int:
        return self.conv_channels[2] * (self.height // 8) * (self.width // 8)


def init_params(cfg: ModelConfig, n_vertices: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization (+-sqrt(6/fan_in)), zero biases.

    The final decoder stage starts at zero so the initial prediction is
    exactly the rest pose. A randomly initialized head saturates the
    offset clamp and pushes the character off the raster, where the
    reconstruction term has no gradient to pull it back."""
    if n_vertices < 1:
        raise ValidationError(f"model needs at least one vertex, got {n_vertices}")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = cfg.conv_channels
    f1, f2 = cfg.enc_fc
    d1, d2 = cfg.dec_fc
    out_dim = 2 * n_vertices + 2
    shapes = {
        "enc_conv1_w": (_KERNEL, _KERNEL, 3, c1),
        "enc_conv1_b": (c1,),
        "enc_conv2_w": (_KERNEL, _KERNEL, c1, c2),
        "enc_conv2_b": (c2,),
        "enc_conv3_w": (_KERNEL, _KERNEL, c2, c3),
        "enc_conv3_b": (c3,),
        "enc_fc1_w": (cfg.flat_features, f1),
        "enc_fc1_b": (f1,),
        "enc_fc2_w": (f1, f2),
        "enc_fc2_b": (f2,),
        "enc_fc3_w": (f2, LATENT_DIM),
        "enc_fc3_b": (LATENT_DIM,),
        "dec_fc1_w": (LATENT_DIM, d1),
        "dec_fc1_b": (d1,),
        "dec_fc2_w": (d1, d2),
        "dec_fc2_b": (d2,),
        "dec_fc3_w": (d2, out_dim),
        "dec_fc3_b": (out_dim,),
    }
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith("_b") or name == "dec_fc3_w":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, shape)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


def lift_params(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap every array as a trainable graph leaf."""
    return {k: param(v) for k, v in params.items()}


def _as_tensor_params(params) -> dict[str, Tensor]:
    if all(isinstance(v, Tensor) for v in params.values()):
        return params
    return {k: constant(v) for k, v in params.items()}


def _fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return bias_channels(matmul(x, w), b)


def _prep_image(x, cfg: ModelConfig) -> Tensor:
    """Validate resolution and composite RGBA inputs over white."""
    t = x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))
    shape = t.data.shape
    if len(shape) != 3 or shape[2] not in (3, 4):
        raise ShapeError(f"encoder input must be (H,W,3) or (H,W,4), got {shape}")
    if shape[0] != cfg.height or shape[1] != cfg.width:
        raise ValidationError(
            f"encoder expects {cfg.width}x{cfg.height} input, got {shape[1]}x{shape[0]}"
        )
    if shape[2] == 3:
        return t
    rgb = tslice(t, (Ellipsis, slice(0, 3)))
    a = expand_last(tslice(t, (Ellipsis, 3)), 3)
    white = constant(np.ones((cfg.height, cfg.width, 3)))
    return add(mul(rgb, a), sub(white, a))


def encode_st(x, params, cfg: ModelConfig) -> Tensor:
    """Image -> (1, LATENT_DIM) embedding through the graph."""
    tp = _as_tensor_params(params)
    h = _prep_image(x, cfg)
    for i in (1, 2, 3):
        h = conv2d(h, tp[f"enc_conv{i}_w"], stride=_STRIDE, pad=_PAD)
        h = leaky_relu(bias_channels(h, tp[f"enc_conv{i}_b"]), _SLOPE)
    h = reshape(h, (1, cfg.flat_features))
    h = leaky_relu(_fc(h, tp["enc_fc1_w"], tp["enc_fc1_b"]), _SLOPE)
    h = leaky_relu(_fc(h, tp["enc_fc2_w"], tp["enc_fc2_b"]), _SLOPE)
    return _fc(h, tp["enc_fc3_w"], tp["enc_fc3_b"])


def decoder_features(z, params) -> Tensor:
    """Activations feeding the final decoder stage, shape (1, dec_fc[1])."""
    tp = _as_tensor_params(params)
    t = z if isinstance(z, Tensor) else constant(np.asarray(z, dtype=np.float64).reshape(1, -1))
    if t.data.ndim == 1:
        t = reshape(t, (1, t.data.shape[0]))
    h = leaky_relu(_fc(t, tp["dec_fc1_w"], tp["dec_fc1_b"]), _SLOPE)
    return leaky_relu(_fc(h, tp["dec_fc2_w"], tp["dec_fc2_b"]), _SLOPE)


def decoder_head(h: Tensor, params, p: Puppet, offset_clamp: float) -> Tensor:
    """Final affine stage: features -> rest + clamped offsets + bias."""
    tp = _as_tensor_params(params)
    out_dim = tp["dec_fc3_w"].data.shape[1]
    if out_dim != 2 * p.n_vertices + 2:
        raise ValidationError(
            f"decoder emits {out_dim} values but puppet with {p.n_vertices} vertices "
            f"needs {2 * p.n_vertices + 2}"
        )
    out = _fc(h, tp["dec_fc3_w"], tp["dec_fc3_b"])
    offsets = reshape(tslice(out, (0, slice(0, 2 * p.n_vertices))), (p.n_vertices, 2))
    offsets = clip(offsets, -offset_clamp, offset_clamp)
    bias = reshape(tslice(out, (0, slice(2 * p.n_vertices, out_dim))), (1, 2))
    spread = matmul(constant(np.ones((p.n_vertices, 1))), bias)
    return add(add(constant(p.rest_vertices), offsets), spread)


def decode_st(z, params, p: Puppet, cfg: ModelConfig) -> Tensor:
    """Latent -> (V,2) vertices through the graph."""
    return decoder_head(decoder_features(z, params), params, p, cfg.offset_clamp)


def predict_st(x, params, p: Puppet, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    z = encode_st(x, params, cfg)
    return z, decode_st(z, params, p, cfg)


# ---------------------------------------------------------------- plain API


def encode(x, params: dict[str, np.ndarray], cfg: ModelConfig) -> LatentCode:
    z = encode_st(x, params, cfg)
    return LatentCode(z=z.data.reshape(-1).copy())


def decode(z, params: dict[str, np.ndarray], p: Puppet, cfg: ModelConfig) -> DeformState:
    zv = z.z if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    v = decode_st(zv.reshape(1, -1), params, p, cfg)
    return make_deform_state(p, v.data)


def predict(x, params: dict[str, np.ndarray], p: Puppet, cfg: ModelConfig):
    code = encode(x, params, cfg)
    return code, decode(code, params, p, cfg)
