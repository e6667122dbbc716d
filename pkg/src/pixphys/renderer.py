"""Coordinate-consistent graphics decoder.

The decoder turns object coordinates into images through learnable templates
and an inverse-parameter spatial transformer.  The point of the construction
is that the map from coordinates to pixels is *fixed by design*: input
``(x, y)`` places the center of a template's writing window at pixel
``(x, y)``, and an input angle rotates the window.  If a position estimate
moves by one pixel the rendered object moves by exactly one pixel, which is
what lets an encoder, velocity estimator and physics engine train against
pixel losses without any position labels.

Each object owns a content image (bounded to [0, 1]) and an unbounded mask
logit image; a background pair is never spatially transformed.  Warped object
logits and the background logit compete through a per-pixel softmax, giving a
partition of unity that models occlusion and z-order.  Contents and logits
are produced by a small generator network from a constant input rather than
stored as free variables, which trains more reliably.

A deliberately unconstrained MLP decoder (``blackbox_decode``) is included
for ablation comparisons only; it has no coordinate structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class AffinePose:
    """Writing-window pose in pixel units: center (x, y), rotation, scale."""

    x: float
    y: float
    theta: float = 0.0
    s: float = 1.0


@dataclass
class TemplateBank:
    """Rendering state for N objects plus background.

    ``contents`` (N, H, H, C) in [0, 1]; ``mask_logits`` (N, H, H, 1)
    unbounded; background pair untransformed; ``scale`` the shared positive
    ST scale.
    """

    contents: dc.Tensor
    mask_logits: dc.Tensor
    bkg_content: dc.Tensor
    bkg_logit: dc.Tensor
    scale: dc.Tensor

    @property
    def n_objects(self) -> int:
        return self.contents.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        n, h, w, c = self.contents.shape
        return h, w, c


def inverse_affine(pose: AffinePose, size: int) -> np.ndarray:
    """2x3 source-coordinate matrix for ``grid_sample``, normalized units.

    Maps normalized output coordinates (x_o, y_o, 1) to normalized source
    coordinates: rotation by theta and scale 1/s, with the translation chosen
    so that template pixel (size/2, size/2) lands on output pixel
    (pose.x, pose.y).  With the align-corners convention the linear block is
    exactly [[cos, -sin], [sin, cos]] / s; only the offset column carries the
    pixel-to-normalized bookkeeping.
    """
    if pose.s <= 0:
        raise ValueError("pose scale must be positive")
    c, s_ = np.cos(pose.theta), np.sin(pose.theta)
    inv = 1.0 / pose.s
    half = (size - 1) / 2.0
    # source pixel coords of the output-center pixel (x_o = y_o = half)
    xs0 = (c * (half - pose.x) - s_ * (half - pose.y)) * inv + size / 2.0
    ys0 = (s_ * (half - pose.x) + c * (half - pose.y)) * inv + size / 2.0
    return np.array(
        [
            [c * inv, -s_ * inv, xs0 / half - 1.0],
            [s_ * inv, c * inv, ys0 / half - 1.0],
        ]
    )


def init_template_params(
    store: dc.ParamStore,
    n_objects: int,
    size: int,
    channels: int,
    scale_init: float,
    rng: np.random.Generator,
    hidden: int = 200,
    prefix: str = "tpl",
    dtype=np.float32,
) -> None:
    """Add the template-generator weights and the shared ST scale."""
    per_obj = size * size * (channels + 1)
    out_dim = (n_objects + 1) * per_obj
    store.add(f"{prefix}.w1", rng.normal(0.0, 1.0, size=(1, hidden)).astype(dtype))
    store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
    store.add(f"{prefix}.w2", rng.normal(0.0, 0.01, size=(hidden, out_dim)).astype(dtype))
    store.add(f"{prefix}.b2", np.zeros(out_dim, dtype=dtype))
    store.add(f"{prefix}.scale", np.asarray(scale_init, dtype=dtype))


def make_templates(
    store: dc.ParamStore,
    n_objects: int,
    size: int,
    channels: int,
    prefix: str = "tpl",
) -> TemplateBank:
    """Generate the current TemplateBank from the generator network.

    A constant scalar 1 feeds one hidden tanh layer; the output vector is
    split into per-object content (sigmoid-squashed to [0, 1]) and raw mask
    logits, then the background pair.
    """
    w1 = store[f"{prefix}.w1"]
    ones = dc.Tensor(np.ones((1, 1), dtype=w1.data.dtype))
    h = dc.tanh(ones @ w1 + store[f"{prefix}.b1"])
    flat = (h @ store[f"{prefix}.w2"] + store[f"{prefix}.b2"]).reshape(
        (n_objects + 1, size, size, channels + 1)
    )
    contents = dc.sigmoid(flat[:n_objects, :, :, :channels])
    mask_logits = flat[:n_objects, :, :, channels:]
    bkg_content = dc.sigmoid(flat[n_objects, :, :, :channels])
    bkg_logit = flat[n_objects, :, :, channels:]
    return TemplateBank(contents, mask_logits, bkg_content, bkg_logit, store[f"{prefix}.scale"])


def _pose_grid(positions: dc.Tensor, scale: dc.Tensor, size: int) -> dc.Tensor:
    """Normalized sampling grid (B, N, size, size, 2) for a batch of poses.

    ``positions`` is (B, N, 2) pixel centers (theta = 0) or (B, N, 1) angles
    (center fixed to size/2, as for the pendulum).
    """
    B, N, D = positions.shape
    dtype = positions.data.dtype
    if float(scale.data) <= 0:
        raise ValueError("template scale must be positive")
    axis = np.arange(size, dtype=dtype)
    xo = dc.Tensor(np.broadcast_to(axis[None, :], (size, size)).reshape(1, 1, size, size).copy())
    yo = dc.Tensor(np.broadcast_to(axis[:, None], (size, size)).reshape(1, 1, size, size).copy())
    half_px = size / 2.0

    if D == 2:
        x = positions[:, :, 0].reshape((B, N, 1, 1))
        y = positions[:, :, 1].reshape((B, N, 1, 1))
        dx = xo - x
        dy = yo - y
        xs = dx
        ys = dy
    elif D == 1:
        th = positions[:, :, 0].reshape((B, N, 1, 1))
        ct, st = dc.cos(th), dc.sin(th)
        dx = xo - half_px
        dy = yo - half_px
        xs = ct * dx - st * dy
        ys = st * dx + ct * dy
    else:
        raise ValueError(f"positions must have 1 or 2 coordinates, got {D}")

    inv_s = dc.power(scale, -1.0)
    to_norm = 2.0 / (size - 1)
    u = (xs * inv_s + half_px) * to_norm - 1.0
    v = (ys * inv_s + half_px) * to_norm - 1.0
    return dc.stack([u, v], axis=-1)


def decode(positions: dc.Tensor, bank: TemplateBank) -> dc.Tensor:
    """Render (B, N, D) coordinates to a (B, H, H, C) image in [0, 1].

    Contents and mask logits are warped together per object; the N warped
    logit maps and the static background logit pass through a per-pixel
    softmax, and the image is the mask-weighted sum of warped contents plus
    background.  Differentiable in both the coordinates and the bank.
    """
    B, N, D = positions.shape
    size, _, C = bank.frame_shape
    if N != bank.n_objects:
        raise ValueError(f"positions carry {N} objects but the bank holds {bank.n_objects}")

    grid = _pose_grid(positions, bank.scale, size)
    zeros_b = dc.Tensor(np.zeros((B, 1, 1, 1), dtype=positions.data.dtype))
    logits = []
    warped_contents = []
    for n in range(N):
        tpl = dc.concat([bank.contents[n], bank.mask_logits[n]], axis=-1)
        warped = dc.grid_sample(tpl, grid[:, n])  # (B, H, H, C+1)
        warped_contents.append(warped[:, :, :, :C])
        logits.append(warped[:, :, :, C:])
    logits.append(bank.bkg_logit + zeros_b)  # broadcast to batch

    weights = dc.softmax(dc.concat(logits, axis=-1), axis=-1)  # (B, H, H, N+1)
    img = weights[:, :, :, N:] * bank.bkg_content
    for n in range(N):
        img = img + weights[:, :, :, n : n + 1] * warped_contents[n]
    return img


def mask_weights(positions: dc.Tensor, bank: TemplateBank) -> dc.Tensor:
    """Post-softmax per-pixel mask channels (B, H, H, N+1), background last."""
    B, N, D = positions.shape
    size, _, C = bank.frame_shape
    grid = _pose_grid(positions, bank.scale, size)
    logits = []
    for n in range(N):
        logits.append(dc.grid_sample(bank.mask_logits[n], grid[:, n]))
    logits.append(bank.bkg_logit + dc.Tensor(np.zeros((B, 1, 1, 1), dtype=positions.data.dtype)))
    return dc.softmax(dc.concat(logits, axis=-1), axis=-1)


# --- ablation decoder --------------------------------------------------------

def init_blackbox_params(
    store: dc.ParamStore,
    n_objects: int,
    dim: int,
    size: int,
    channels: int,
    rng: np.random.Generator,
    hidden: int = 256,
    prefix: str = "bbox",
    dtype=np.float32,
) -> None:
    """Weights for the unconstrained MLP decoder used by the ablation."""
    d_in = n_objects * dim
    out_dim = size * size * channels
    def glorot(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)).astype(dtype)

    store.add(f"{prefix}.w1", glorot(d_in, hidden))
    store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
    store.add(f"{prefix}.w2", glorot(hidden, hidden))
    store.add(f"{prefix}.b2", np.zeros(hidden, dtype=dtype))
    store.add(f"{prefix}.w3", rng.normal(0.0, 0.01, size=(hidden, out_dim)).astype(dtype))
    store.add(f"{prefix}.b3", np.zeros(out_dim, dtype=dtype))


def blackbox_decode(
    positions: dc.Tensor,
    store: dc.ParamStore,
    size: int,
    channels: int,
    prefix: str = "bbox",
) -> dc.Tensor:
    """Two-hidden-layer tanh MLP from flattened coordinates to a sigmoid image.

    Coordinates are scaled to roughly [-1, 1] (pixels divided by half the
    frame, angles by pi) before the MLP so the baseline is not handicapped by
    saturated first-layer units; it remains free of any coordinate structure.
    """
    B, N, D = positions.shape
    norm = size / 2.0 if D == 2 else np.pi
    flat = (positions * (1.0 / norm) - (1.0 if D == 2 else 0.0)).reshape((B, N * D))
    h1 = dc.tanh(flat @ store[f"{prefix}.w1"] + store[f"{prefix}.b1"])
    h2 = dc.tanh(h1 @ store[f"{prefix}.w2"] + store[f"{prefix}.b2"])
    out = dc.sigmoid(h2 @ store[f"{prefix}.w3"] + store[f"{prefix}.b3"])
    return out.reshape((B, size, size, channels))


# --- reporting ---------------------------------------------------------------

def export_bank_pngs(bank: TemplateBank, out_dir, positions: Optional[np.ndarray] = None) -> list:
    """Write template contents, sigmoid masks, and optional composites as PNGs.

    Returns the written paths.  Intended for the human-readable side of eval
    reports; everything quantitative lives elsewhere.
    """
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(arr, name):
        a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
        img = (a * 255.0 + 0.5).astype(np.uint8)
        if img.shape[-1] == 1:
            img = img[..., 0]
        path = out / name
        Image.fromarray(img).save(path)
        written.append(path)

    with dc.no_grad():
        n = bank.n_objects
        for i in range(n):
            save(bank.contents.data[i], f"content_{i}.png")
            save(1.0 / (1.0 + np.exp(-bank.mask_logits.data[i])), f"mask_{i}.png")
        save(bank.bkg_content.data, "background.png")
        if positions is not None:
            img = decode(dc.Tensor(np.asarray(positions, dtype=bank.contents.data.dtype)), bank)
            for b in range(img.shape[0]):
                save(img.data[b], f"composite_{b}.png")
    return written
