"""Unsupervised state extraction from frames.

Two networks trained purely from the video loss:

* An encoder that segments each frame into per-object masks with a small
  U-Net, multiplies the frame by each mask, and regresses the object's
  coordinates from the masked image with a location network shared across
  object slots.  For planar scenes the coordinates are squashed into the
  open interval (0, H); for the pendulum the location network emits a
  2-vector whose angle (atan2) is the state, which sidesteps the wraparound
  a bounded scalar output cannot represent.
* A velocity estimator that maps the encoder's coordinates over the input
  frames to a per-object velocity, applied with shared weights to every
  object slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes of the perception networks for one scene.

    ``dim`` is the state dimensionality per object: 2 for planar positions,
    1 for the pendulum angle.  ``n_frames`` is how many consecutive encoded
    frames the velocity estimator consumes.
    """

    size: int
    channels: int
    n_objects: int
    dim: int
    n_frames: int
    loc_hidden: int = 200
    vel_hidden: int = 100
    unet_widths: tuple[int, int, int] = (16, 32, 64)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 (angle) or 2 (planar)")
        if self.size % 4 != 0:
            raise ValueError("frame size must be divisible by 4 (two 2x downsamples)")
        if self.n_frames < 2:
            raise ValueError("velocity estimation needs at least 2 frames")

    @property
    def vel_in(self) -> int:
        return self.dim * self.n_frames


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
            dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _conv_weight(rng, kh, kw, cin, cout, dtype):
    return _glorot(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout, dtype)


def init_encoder_params(store: dc.ParamStore, config: EncoderConfig,
                        rng: np.random.Generator, prefix: str = "enc",
                        dtype=np.float32) -> None:
    """U-Net -> mask heads -> shared location network."""
    c = config.channels
    w1, w2, w3 = config.unet_widths
    n = config.n_objects
    z = lambda *s: np.zeros(s, dtype=dtype)
    store.add(f"{prefix}.conv_in.w", _conv_weight(rng, 3, 3, c, w1, dtype))
    store.add(f"{prefix}.conv_in.b", z(w1))
    store.add(f"{prefix}.down1.w", _conv_weight(rng, 3, 3, w1, w2, dtype))
    store.add(f"{prefix}.down1.b", z(w2))
    store.add(f"{prefix}.down2.w", _conv_weight(rng, 3, 3, w2, w3, dtype))
    store.add(f"{prefix}.down2.b", z(w3))
    store.add(f"{prefix}.up1.w", _conv_weight(rng, 3, 3, w3 + w2, w2, dtype))
    store.add(f"{prefix}.up1.b", z(w2))
    store.add(f"{prefix}.up2.w", _conv_weight(rng, 3, 3, w2 + w1, w1, dtype))
    store.add(f"{prefix}.up2.b", z(w1))
    store.add(f"{prefix}.mask.w", _conv_weight(rng, 1, 1, w1, n, dtype))
    store.add(f"{prefix}.mask.b", z(n))
    store.add(f"{prefix}.bkg", z(config.size, config.size, 1))

    loc_in = config.size * config.size * c
    store.add(f"{prefix}.loc.w1",
              _glorot(rng, (loc_in, config.loc_hidden), loc_in, config.loc_hidden, dtype))
    store.add(f"{prefix}.loc.b1", z(config.loc_hidden))
    store.add(f"{prefix}.loc.w2",
              _glorot(rng, (config.loc_hidden, 2), config.loc_hidden, 2, dtype))
    # the angle head starts at atan2(0, 1) = 0 with a well-conditioned
    # denominator; the planar head starts at the frame center
    b2 = np.array([0.0, 1.0], dtype=dtype) if config.dim == 1 else z(2)
    store.add(f"{prefix}.loc.b2", b2)


def init_velocity_params(store: dc.ParamStore, config: EncoderConfig,
                         rng: np.random.Generator, prefix: str = "vel",
                         dtype=np.float32) -> None:
    """Object-wise MLP: dim*n_frames -> 3 x 100 tanh -> dim."""
    h = config.vel_hidden
    dims = [config.vel_in, h, h, h, config.dim]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        store.add(f"{prefix}.w{i}", _glorot(rng, (a, b), a, b, dtype))
        store.add(f"{prefix}.b{i}", np.zeros(b, dtype=dtype))


def _p(store: dc.ParamStore, prefix: str, name: str) -> dc.Tensor:
    return store[f"{prefix}.{name}"]


def mask_images(frames: dc.Tensor, store: dc.ParamStore, config: EncoderConfig,
                prefix: str = "enc") -> dc.Tensor:
    """Per-pixel soft assignment over N object channels + background.

    Returns (B, H, H, N+1) with the background last; channels sum to 1 at
    every pixel.
    """
    B, H, W, C = frames.shape
    if (H, W, C) != (config.size, config.size, config.channels):
        raise ValueError(
            f"frame shape {(H, W, C)} does not match configured "
            f"{(config.size, config.size, config.channels)}"
        )
    g = lambda n: _p(store, prefix, n)
    h1 = dc.tanh(dc.conv2d(frames, g("conv_in.w")) + g("conv_in.b"))
    h2 = dc.tanh(dc.conv2d(h1, g("down1.w"), stride=2) + g("down1.b"))
    h3 = dc.tanh(dc.conv2d(h2, g("down2.w"), stride=2) + g("down2.b"))
    u1 = dc.tanh(dc.conv2d(dc.concat([dc.upsample2x(h3), h2], axis=-1),
                           g("up1.w")) + g("up1.b"))
    u2 = dc.tanh(dc.conv2d(dc.concat([dc.upsample2x(u1), h1], axis=-1),
                           g("up2.w")) + g("up2.b"))
    logits = dc.conv2d(u2, g("mask.w"), pad=0) + g("mask.b")
    zeros_b = dc.Tensor(np.zeros((B, H, W, 1), dtype=frames.data.dtype))
    bkg = zeros_b + g("bkg")
    return dc.softmax(dc.concat([logits, bkg], axis=-1), axis=-1)


def encode(frames: dc.Tensor, store: dc.ParamStore, config: EncoderConfig,
           prefix: str = "enc") -> dc.Tensor:
    """Frames (B, H, H, C) in [0, 1] -> per-object coordinates (B, N, D)."""
    frames = dc.as_tensor(frames)
    masks = mask_images(frames, store, config, prefix)
    B, H, W, C = frames.shape
    N = config.n_objects

    obj_masks = masks[..., :N].reshape(B, H, W, N, 1)
    masked = frames.reshape(B, H, W, 1, C) * obj_masks        # (B,H,W,N,C)
    per_slot = masked.transpose((0, 3, 1, 2, 4)).reshape(B * N, H * W * C)

    g = lambda n: _p(store, prefix, n)
    hid = dc.tanh(dc.matmul(per_slot, g("loc.w1")) + g("loc.b1"))
    raw = dc.matmul(hid, g("loc.w2")) + g("loc.b2")           # (B*N, 2)

    if config.dim == 2:
        half = config.size / 2.0
        coords = dc.affine(dc.tanh(raw), half, half)
        return coords.reshape(B, N, 2)
    theta = dc.atan2(raw[:, 0:1], raw[:, 1:2])
    return theta.reshape(B, N, 1)


def unwrap_angles(theta: dc.Tensor, axis: int) -> dc.Tensor:
    """Remove 2-pi jumps along ``axis``; the integer corrections carry no
    gradient, so this is the identity map for backpropagation."""
    data = theta.data
    jumps = np.round(np.diff(data, axis=axis) / TWO_PI)
    corr = np.cumsum(jumps, axis=axis) * TWO_PI
    pad = [(0, 0)] * data.ndim
    pad[axis] = (1, 0)
    corr = np.pad(corr, pad).astype(data.dtype)
    return theta - dc.Tensor(corr)


def estimate_velocity(positions: dc.Tensor, store: dc.ParamStore,
                      config: EncoderConfig, prefix: str = "vel") -> dc.Tensor:
    """Encoded positions (B, L, N, D) -> velocity at the last frame (B, N, D).

    Planar coordinates are rescaled to [-1, 1] before the MLP; angles are
    unwrapped along the frame axis and anchored to the last frame, so a
    constant sequence maps to the zero input vector either way.
    """
    positions = dc.as_tensor(positions)
    B, L, N, D = positions.shape
    if L != config.n_frames:
        raise ValueError(f"expected {config.n_frames} frames, got {L}")
    if (N, D) != (config.n_objects, config.dim):
        raise ValueError(f"positions shaped {(N, D)} do not match config")

    if config.dim == 1:
        x = unwrap_angles(positions, axis=1)
        x = x - x[:, L - 1 : L]
    else:
        x = dc.affine(positions, 2.0 / config.size, -1.0)
    per_slot = x.transpose((0, 2, 1, 3)).reshape(B * N, L * D)

    g = lambda n: _p(store, prefix, n)
    h = per_slot
    for i in (1, 2, 3):
        h = dc.tanh(dc.matmul(h, g(f"w{i}")) + g(f"b{i}"))
    out = dc.matmul(h, g("w4")) + g("b4")
    return out.reshape(B, N, D)
