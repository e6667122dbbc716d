"""Synthetic video datasets with known equations of motion.

Five scene presets cover the benchmark systems: two bouncing balls, two
spring-coupled balls, three gravitating balls (one preset per trainable
parameter), two sprite objects on a textured background, and an actuated
pendulum.  Sequences are simulated with the *same* integrator the learned
model uses — identical sub-stepping, identical force expressions — so that
recovering the generating parameters from pixels is well-posed rather than an
exercise in matching integrator artifacts.

Ground truth is rendered analytically (antialiased discs / rod) and stored as
lossless 8-bit PNG; the quantized pixels are the dataset, for generation and
training targets alike.  Each sequence directory also records the exact
simulated states, but those are evaluation-only: the training accessor
(`Dataset.train_view`) exposes frames and actions exclusively.

Layout on disk::

    manifest.json
    train/seq_00000/frame_000.png ... states.csv [actions.csv]
    val/...
    test/...
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from . import diffcore as dc
from . import physics
from .physics import PhysParams, StateBatch, SystemKind, SystemSpec

MANIFEST_VERSION = "pixphys-dataset/1"
SPLITS = ("train", "val", "test")
DISC_RADIUS = 3.0
DISC_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))  # paint order
ROD_LENGTH = 20.0
ROD_HALF_WIDTH = 2.0
REJECTION_ROUNDS = 1000
_CANDIDATE_BATCH = 512


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to generate one dataset deterministically."""

    name: str
    system: SystemSpec
    true_params: dict = field(default_factory=dict)
    size: int = 32
    channels: int = 3
    n_input: int = 3       # frames the model will observe
    n_pred: int = 7        # frames scored during training
    n_ext: int = 20        # extra frames for extrapolation scoring
    counts: tuple[int, int, int] = (5000, 500, 500)
    seed: int = 0
    sprite_mode: str = "disc"          # disc | sprites
    background: str = "black"          # black | image
    sprite_dir: Optional[str] = None

    @property
    def seq_len(self) -> int:
        return self.n_input + self.n_pred + self.n_ext

    def params(self) -> PhysParams:
        """Frozen ground-truth parameters."""
        return PhysParams.for_system(self.system, trainable=False, **self.true_params)


def scene_preset(name: str, desk: bool = False, seed: int = 0,
                 sprite_dir: Optional[str] = None) -> SceneConfig:
    """Named dataset configurations.

    ``desk`` shrinks the split sizes to 1000/200/200 for CPU-budget runs;
    every physical constant, time step and horizon stays identical.
    """
    counts = (1000, 200, 200) if desk else (5000, 500, 500)
    common = dict(counts=counts, seed=seed)
    if name == "bounce2":
        return SceneConfig(
            name=name,
            system=SystemSpec(SystemKind.BOUNCE, n_objects=2, dim=2, dt=1.0,
                              bounds=(0.0, 32.0)),
            true_params={},
            size=32, channels=3, n_input=3, n_pred=7, n_ext=20, **common,
        )
    if name == "spring2":
        return SceneConfig(
            name=name,
            system=SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3),
            true_params={"k": 4.0, "l": 6.0},
            size=32, channels=3, n_input=3, n_pred=7, n_ext=20, **common,
        )
    if name in ("gravity3-g", "gravity3-m"):
        return SceneConfig(
            name=name,
            system=SystemSpec(SystemKind.GRAVITY, n_objects=3, dim=2, dt=0.5),
            true_params={"g": 60.0, "m": 1.0},
            size=36, channels=3, n_input=4, n_pred=12, n_ext=24, **common,
        )
    if name == "digits2":
        return SceneConfig(
            name=name,
            system=SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3),
            true_params={"k": 4.0, "l": 6.0},
            size=64, channels=3, n_input=3, n_pred=7, n_ext=20,
            sprite_mode="sprites", background="image", sprite_dir=sprite_dir,
            **common,
        )
    if name == "pendulum":
        return SceneConfig(
            name=name,
            system=SystemSpec(SystemKind.PENDULUM, n_objects=1, dim=1, dt=0.05,
                              actuated=True),
            true_params={"g": 10.0, "a": 1.0},
            size=64, channels=1, n_input=4, n_pred=10, n_ext=0, **common,
        )
    raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = ("bounce2", "spring2", "gravity3-g", "gravity3-m", "digits2", "pendulum")


# --- initial conditions -------------------------------------------------------

def _draw_ball_candidates(config: SceneConfig, rng: np.random.Generator,
                          count: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions in the central region with >= 6 px separation; v ~ U(-2, 2)."""
    n = config.system.n_objects
    h = config.size
    lo, hi = 0.2 * h, 0.8 * h
    p = rng.uniform(lo, hi, size=(count, n, 2))
    for _ in range(200):
        d = np.linalg.norm(p[:, :, None] - p[:, None, :], axis=-1)
        d[:, np.arange(n), np.arange(n)] = np.inf
        bad = (d.min(axis=(1, 2)) < 6.0)
        if not bad.any():
            break
        p[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), n, 2))
    v = rng.uniform(-2.0, 2.0, size=(count, n, 2))
    return p, v


def _trajectory_ok(config: SceneConfig, p_traj: np.ndarray) -> np.ndarray:
    """Acceptance mask over the batch given positions (T, B, N, 2)."""
    h = config.size
    in_frame = ((p_traj >= 0.0) & (p_traj <= h)).all(axis=(0, 2, 3))
    if config.system.kind != SystemKind.GRAVITY:
        return in_frame
    d = np.linalg.norm(p_traj[:, :, :, None] - p_traj[:, :, None, :], axis=-1)
    n = config.system.n_objects
    d[:, :, np.arange(n), np.arange(n)] = np.inf
    # close passes make the inverse-square force effectively unlearnable from
    # 8-bit pixels and were excluded at generation time
    return in_frame & (d.min(axis=(0, 2, 3)) >= 3.0)


def sample_initial_conditions(config: SceneConfig, rng: np.random.Generator,
                              count: int = 1) -> StateBatch:
    """Draw ``count`` accepted initial states (and nothing else from ``rng``
    once filled).

    The pendulum is unconstrained.  Ball systems resample until the whole
    simulated sequence stays inside the frame (and, for gravity, keeps all
    pairs at least 3 px apart).  Raises after REJECTION_ROUNDS batches.
    """
    kind = config.system.kind
    if kind == SystemKind.PENDULUM:
        theta = rng.uniform(-np.pi, np.pi, size=(count, 1, 1))
        omega = rng.uniform(-6.0, 6.0, size=(count, 1, 1))
        return StateBatch.from_arrays(theta, omega)

    needs_rollout = kind in (SystemKind.SPRING, SystemKind.GRAVITY)
    accepted_p, accepted_v = [], []
    have = 0
    for _ in range(REJECTION_ROUNDS):
        m = max(_CANDIDATE_BATCH, count - have) if needs_rollout else (count - have)
        p, v = _draw_ball_candidates(config, rng, m)
        if needs_rollout:
            p_traj, _, _ = simulate_sequence(config, StateBatch.from_arrays(p, v))
            ok = _trajectory_ok(config, p_traj)
        else:
            ok = np.ones(m, dtype=bool)
        accepted_p.append(p[ok])
        accepted_v.append(v[ok])
        have += int(ok.sum())
        if have >= count:
            break
    else:
        raise RuntimeError(
            f"rejection sampling for {config.name} exhausted "
            f"{REJECTION_ROUNDS} rounds ({have}/{count} accepted)"
        )
    p = np.concatenate(accepted_p)[:count]
    v = np.concatenate(accepted_v)[:count]
    return StateBatch.from_arrays(p, v)


def sample_actions(config: SceneConfig, rng: np.random.Generator,
                   count: int) -> Optional[np.ndarray]:
    """Random torques u ~ U(-2, 2), shape (seq_len - 1, count); None if inert."""
    if not config.system.actuated:
        return None
    return rng.uniform(-2.0, 2.0, size=(config.seq_len - 1, count))


def simulate_sequence(config: SceneConfig, initial: StateBatch,
                      actions: Optional[np.ndarray] = None
                      ) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Roll the true dynamics for seq_len frames (the initial state is frame 0).

    Returns positions and velocities of shape (seq_len, B, N, D) plus the
    actions actually used.  Uses the raw force laws (no distance floor): the
    generator must fail loudly rather than clamp.
    """
    steps = config.seq_len - 1
    with dc.no_grad():
        states = physics.rollout(
            config.system, initial, config.params(), steps,
            actions=actions, dist_floor=0.0,
        )
    B, N, D = initial.p.shape
    p = np.empty((config.seq_len, B, N, D))
    v = np.empty_like(p)
    p[0], v[0] = initial.p.data, initial.v.data
    for t, s in enumerate(states, start=1):
        p[t], v[t] = s.p.data, s.v.data
    return p, v, actions


# --- rasterization -------------------------------------------------------------

def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx, yy


def _paint_disc(canvas: np.ndarray, x: float, y: float, color) -> None:
    xx, yy = _pixel_grid(canvas.shape[0])
    dist = np.hypot(xx - x, yy - y)
    cov = np.clip(DISC_RADIUS + 0.5 - dist, 0.0, 1.0)[..., None]
    canvas *= 1.0 - cov
    canvas += cov * np.asarray(color)


def _paint_rod(canvas: np.ndarray, theta: float) -> None:
    """Antialiased rod from the frame center toward (-sin t, -cos t).

    The direction matches the decoder's rotation convention: a template
    feature pointing straight up renders at angle theta along exactly this
    vector, so the true angle and the learned pose angle coincide.
    """
    size = canvas.shape[0]
    cx = cy = size / 2.0
    theta = np.remainder(theta, 2.0 * np.pi)  # +pi and -pi draw the same rod
    dx, dy = -np.sin(theta), -np.cos(theta)
    xx, yy = _pixel_grid(size)
    # distance from each pixel to the center->tip segment
    px, py = xx - cx, yy - cy
    t = np.clip(px * dx + py * dy, 0.0, ROD_LENGTH)
    dist = np.hypot(px - t * dx, py - t * dy)
    cov = np.clip(ROD_HALF_WIDTH + 0.5 - dist, 0.0, 1.0)[..., None]
    np.maximum(canvas, cov, out=canvas)


class _SpriteSet:
    """Lazy-loaded sprite/background images for the sprites mode."""

    def __init__(self, config: SceneConfig):
        if config.sprite_dir is None:
            raise FileNotFoundError("sprite mode requires sprite_dir")
        root = Path(config.sprite_dir)
        self.background = self._load(root / "background.png", config)[..., : config.channels]
        self.sprites = []
        for i in range(config.system.n_objects):
            path = root / f"sprite_{i}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing sprite image {path}")
            self.sprites.append(self._load_rgba(path))

    @staticmethod
    def _load(path: Path, config: SceneConfig) -> np.ndarray:
        if not path.exists():
            raise FileNotFoundError(f"missing background image {path}")
        img = Image.open(path).convert("RGB").resize((config.size, config.size))
        return np.asarray(img, dtype=np.float64) / 255.0

    @staticmethod
    def _load_rgba(path: Path) -> np.ndarray:
        return np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0


def _paint_sprite(canvas: np.ndarray, sprite: np.ndarray, x: float, y: float) -> None:
    """Alpha-composite ``sprite`` (h, w, RGBA) centered at (x, y), bilinear."""
    sh, sw = sprite.shape[:2]
    size = canvas.shape[0]
    xx, yy = _pixel_grid(size)
    # source pixel coordinates under a pure translation pose
    sx = xx - x + sw / 2.0
    sy = yy - y + sh / 2.0
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((size, size, sprite.shape[-1]))
    for dy_ in (0, 1):
        for dx_ in (0, 1):
            xi, yi = x0 + dx_, y0 + dy_
            valid = (xi >= 0) & (xi < sw) & (yi >= 0) & (yi < sh)
            w = np.where(valid, (fx if dx_ else 1 - fx) * (fy if dy_ else 1 - fy), 0.0)
            vals = sprite[np.clip(yi, 0, sh - 1), np.clip(xi, 0, sw - 1)]
            out += vals * (w * valid)[..., None]
    alpha = out[..., -1:]
    rgb = out[..., : canvas.shape[-1]]
    canvas *= 1.0 - alpha
    canvas += rgb * alpha


def render_ground_truth_frame(config: SceneConfig, positions: np.ndarray,
                              sprites: Optional[_SpriteSet] = None) -> np.ndarray:
    """One (H, H, C) float frame in [0, 1] for object positions (N, D)."""
    size, C = config.size, config.channels
    if config.system.kind == SystemKind.PENDULUM:
        canvas = np.zeros((size, size, 1))
        _paint_rod(canvas, float(positions[0, 0]))
        return canvas
    if config.sprite_mode == "sprites":
        sprites = sprites or _SpriteSet(config)
        canvas = sprites.background.copy()
        for n in range(config.system.n_objects):
            _paint_sprite(canvas, sprites.sprites[n], positions[n, 0], positions[n, 1])
        return canvas
    canvas = np.zeros((size, size, C))
    for n in range(config.system.n_objects):
        _paint_disc(canvas, positions[n, 0], positions[n, 1], DISC_COLORS[n])
    return canvas


def _quantize(frame: np.ndarray) -> np.ndarray:
    return (np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _save_png(frame_u8: np.ndarray, path: Path) -> None:
    arr = frame_u8[..., 0] if frame_u8.shape[-1] == 1 else frame_u8
    Image.fromarray(arr).save(path)


# --- dataset writing ------------------------------------------------------------

def _write_states_csv(path: Path, p: np.ndarray, v: np.ndarray) -> None:
    """p, v are (T, N, D); floats stored at full precision."""
    T, N, D = p.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "object"] + [f"p{d}" for d in range(D)] + [f"v{d}" for d in range(D)])
        for t in range(T):
            for n in range(N):
                w.writerow([t, n] + [f"{x:.17g}" for x in p[t, n]] + [f"{x:.17g}" for x in v[t, n]])


def _write_actions_csv(path: Path, u: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u"])
        for t, val in enumerate(u):
            w.writerow([t, f"{val:.17g}"])


def write_dataset(config: SceneConfig, out_dir) -> dict:
    """Generate and write the full dataset; returns the manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    sprites = _SpriteSet(config) if config.sprite_mode == "sprites" else None

    for split, count in zip(SPLITS, config.counts):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, SPLITS.index(split)]))
        initial = sample_initial_conditions(config, rng, count)
        actions = sample_actions(config, rng, count)
        p, v, _ = simulate_sequence(config, initial, actions)
        for i in range(count):
            seq_dir = root / split / f"seq_{i:05d}"
            seq_dir.mkdir(parents=True, exist_ok=True)
            for t in range(config.seq_len):
                frame = render_ground_truth_frame(config, p[t, i], sprites)
                _save_png(_quantize(frame), seq_dir / f"frame_{t:03d}.png")
            _write_states_csv(seq_dir / "states.csv", p[:, i], v[:, i])
            if actions is not None:
                _write_actions_csv(seq_dir / "actions.csv", actions[:, i])

    manifest = scene_manifest(config)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def scene_manifest(config: SceneConfig) -> dict:
    """JSON-ready record of a scene configuration (also embedded in
    checkpoints so a trained model knows its own geometry)."""
    spec = config.system
    return {
        "version": MANIFEST_VERSION,
        "name": config.name,
        "system": {
            "kind": spec.kind.value,
            "n_objects": spec.n_objects,
            "dim": spec.dim,
            "dt": spec.dt,
            "substeps": spec.substeps,
            "actuated": spec.actuated,
            "bounds": list(spec.bounds) if spec.bounds else None,
        },
        "true_params": {k: (float(val) if np.ndim(val) == 0 else list(map(float, np.atleast_1d(val))))
                         for k, val in config.true_params.items()},
        "size": config.size,
        "channels": config.channels,
        "n_input": config.n_input,
        "n_pred": config.n_pred,
        "n_ext": config.n_ext,
        "seq_len": config.seq_len,
        "splits": dict(zip(SPLITS, config.counts)),
        "frame_encoding": "png-u8",
        "seed": config.seed,
        "sprite_mode": config.sprite_mode,
        "background": config.background,
    }


# --- loading --------------------------------------------------------------------

def config_from_manifest(manifest: dict) -> SceneConfig:
    sysd = manifest["system"]
    spec = SystemSpec(
        kind=SystemKind(sysd["kind"]),
        n_objects=sysd["n_objects"],
        dim=sysd["dim"],
        dt=sysd["dt"],
        substeps=sysd["substeps"],
        actuated=sysd["actuated"],
        bounds=tuple(sysd["bounds"]) if sysd.get("bounds") else None,
    )
    return SceneConfig(
        name=manifest["name"],
        system=spec,
        true_params=dict(manifest["true_params"]),
        size=manifest["size"],
        channels=manifest["channels"],
        n_input=manifest["n_input"],
        n_pred=manifest["n_pred"],
        n_ext=manifest["n_ext"],
        counts=tuple(manifest["splits"][s] for s in SPLITS),
        seed=manifest["seed"],
        sprite_mode=manifest["sprite_mode"],
        background=manifest["background"],
    )


class TrainView:
    """Frame/action access for the trainer — deliberately no state access.

    Frames load once as uint8 and normalize per batch; actions (if the system
    is actuated) align so ``actions[:, t]`` drives frame t -> t+1.
    """

    def __init__(self, dataset: "Dataset", split: str):
        assert not hasattr(self, "states"), "training path must not see states"
        self.split = split
        self.seq_len = dataset.manifest["seq_len"]
        self.size = dataset.manifest["size"]
        self.channels = dataset.manifest["channels"]
        n = dataset.manifest["splits"][split]
        self._frames = np.empty(
            (n, self.seq_len, self.size, self.size, self.channels), dtype=np.uint8
        )
        for i in range(n):
            self._frames[i] = dataset.frames(split, i)
        self._actions = None
        if dataset.manifest["system"]["actuated"]:
            self._actions = np.stack([dataset.actions(split, i) for i in range(n)])

    def __len__(self) -> int:
        return self._frames.shape[0]

    def batch(self, indices) -> tuple[np.ndarray, Optional[np.ndarray]]:
        frames = self._frames[indices].astype(np.float32) / np.float32(255.0)
        acts = None if self._actions is None else self._actions[indices].astype(np.float32)
        return frames, acts


class Dataset:
    """Read accessor over a written dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.json") as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(
                f"dataset version {self.manifest.get('version')!r} != {MANIFEST_VERSION!r}"
            )
        for split, count in self.manifest["splits"].items():
            have = len(list((self.root / split).glob("seq_*")))
            if have != count:
                raise ValueError(f"{split}: manifest says {count} sequences, found {have}")

    def _seq_dir(self, split: str, index: int) -> Path:
        return self.root / split / f"seq_{index:05d}"

    def frames(self, split: str, index: int) -> np.ndarray:
        """(T, H, H, C) uint8."""
        seq = self._seq_dir(split, index)
        out = np.empty(
            (self.manifest["seq_len"], self.manifest["size"], self.manifest["size"],
             self.manifest["channels"]), dtype=np.uint8,
        )
        for t in range(self.manifest["seq_len"]):
            arr = np.asarray(Image.open(seq / f"frame_{t:03d}.png"))
            out[t] = arr[..., None] if arr.ndim == 2 else arr
        return out

    def states(self, split: str, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-only ground truth: positions and velocities (T, N, D)."""
        d = self.manifest["system"]["dim"]
        n = self.manifest["system"]["n_objects"]
        p = np.empty((self.manifest["seq_len"], n, d))
        v = np.empty_like(p)
        with open(self._seq_dir(split, index) / "states.csv") as fh:
            for row in csv.DictReader(fh):
                t, obj = int(row["t"]), int(row["object"])
                p[t, obj] = [float(row[f"p{i}"]) for i in range(d)]
                v[t, obj] = [float(row[f"v{i}"]) for i in range(d)]
        return p, v

    def actions(self, split: str, index: int) -> np.ndarray:
        """(T-1,) torques; only present for actuated systems."""
        u = np.empty(self.manifest["seq_len"] - 1)
        with open(self._seq_dir(split, index) / "actions.csv") as fh:
            for row in csv.DictReader(fh):
                u[int(row["t"])] = float(row["u"])
        return u

    def train_view(self, split: str = "train") -> TrainView:
        return TrainView(self, split)

    def scene_config(self) -> SceneConfig:
        return config_from_manifest(self.manifest)


def load_dataset(root) -> Dataset:
    return Dataset(root)
