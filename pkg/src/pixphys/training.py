"""End-to-end training of the perception/physics/rendering stack.

The objective combines two pixel losses: a prediction term that decodes a
physics rollout initialized from the encoder and scores it against future
frames, and a per-frame autoencoding term that keeps the encoder/decoder
pair honest.  Four wiring variants isolate which pieces learn from which
term:

* ``joint`` — everything trains on ``L_pred + alpha * L_rec``.
* ``pred-only`` — the autoencoding term is dropped from the objective.
* ``separate-gradients`` — encoder and decoder weights receive gradients
  only from the reconstruction term; the velocity estimator and physical
  parameters only from the prediction term.
* ``blackbox-decoder`` — joint training, but the template renderer is
  replaced by an unconstrained MLP decoder.

Also here: the RMSProp loop with its step-drop schedule, binary
checkpointing, SSI scoring, rollout evaluation reports, and the four-variant
ablation harness.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from . import datagen, diffcore as dc, perception, physics, renderer

VARIANTS = ("joint", "pred-only", "separate-gradients", "blackbox-decoder")
CHECKPOINT_MAGIC = b"PIXPHYS-CKPT\n"
CHECKPOINT_VERSION = "pixphys-checkpoint/1"
REPORT_VERSION = "pixphys-report/1"

DEFAULT_TRAINABLE = {
    "bounce2": (),
    "spring2": ("k", "l"),
    "digits2": ("k", "l"),
    "gravity3-g": ("g",),
    "gravity3-m": ("m",),
    "pendulum": ("g", "a"),
}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint_path: Optional[str]):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    """Everything the trainer needs beyond the dataset itself."""

    scene: str
    variant: str = "joint"
    n_input: int = 3
    n_pred: int = 7
    n_ext: int = 20
    alpha: float = 2.0
    epochs: int = 200
    lr: float = 3e-4
    lr_drop_epoch: int = 150
    lr_drop_factor: float = 5.0
    batch_size: int = 32
    seed: int = 0
    n_slots: Optional[int] = None
    trainable: tuple = ()
    param_init: dict = field(default_factory=dict)
    phys_lr_scale: float = 100.0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def train_config_for(scene_name: str, desk: bool = True, variant: str = "joint",
                     seed: int = 0, n_slots: Optional[int] = None) -> TrainConfig:
    """Schedule and loss presets per scene.

    Paper scale: 500 epochs with the step drop at 375 for the ball scenes,
    1000 epochs with the drop at 500 for the pendulum.  Desk scale keeps the
    drop at the same fraction of a 200-epoch run.  The pendulum weighs the
    autoencoder term with alpha=3, everything else with alpha=2.

    Physical parameters start at 1 so identification covers a real distance;
    the sole exception is a parameter frozen at its known value (the masses
    when learning g, gravity when learning the masses).
    """
    scene = datagen.scene_preset(scene_name)
    pend = scene.system.kind == physics.SystemKind.PENDULUM
    trainable = DEFAULT_TRAINABLE[scene_name]
    init = {name: 1.0 for name in physics.PhysParams._ACTIVE[scene.system.kind]}
    if scene_name == "gravity3-m":
        init["g"] = 60.0  # known, frozen; the masses are what's estimated
    return TrainConfig(
        scene=scene_name,
        variant=variant,
        n_input=scene.n_input,
        n_pred=scene.n_pred,
        n_ext=scene.n_ext,
        alpha=3.0 if pend else 2.0,
        epochs=200 if desk else (1000 if pend else 500),
        lr_drop_epoch=(100 if pend else 150) if desk else (500 if pend else 375),
        seed=seed,
        n_slots=n_slots,
        trainable=tuple(trainable),
        param_init=init,
        phys_lr_scale=30.0 if pend else 100.0,
    )


# --- model assembly ---------------------------------------------------------------


class Model:
    """A ParamStore plus the glue that runs it as encoder/physics/decoder."""

    def __init__(self, scene: datagen.SceneConfig, config: TrainConfig,
                 store: dc.ParamStore, phys: physics.PhysParams):
        self.scene = scene
        self.config = config
        self.store = store
        self.phys = phys
        self.n_slots = config.n_slots or scene.system.n_objects
        self.enc = perception.EncoderConfig(
            size=scene.size,
            channels=scene.channels,
            n_objects=self.n_slots,
            dim=scene.system.dim,
            n_frames=config.n_input,
        )

    @property
    def blackbox(self) -> bool:
        return self.config.variant == "blackbox-decoder"

    def encode(self, frames: dc.Tensor) -> dc.Tensor:
        return perception.encode(frames, self.store, self.enc)

    def masks(self, frames: dc.Tensor) -> dc.Tensor:
        return perception.mask_images(frames, self.store, self.enc)

    def velocity(self, positions: dc.Tensor) -> dc.Tensor:
        return perception.estimate_velocity(positions, self.store, self.enc)

    def bank(self) -> renderer.TemplateBank:
        if self.blackbox:
            raise ValueError("the blackbox variant has no template bank")
        return renderer.make_templates(self.store, self.n_slots,
                                       self.scene.size, self.scene.channels)

    def decode(self, positions: dc.Tensor, detach_decoder: bool = False) -> dc.Tensor:
        if self.blackbox:
            return renderer.blackbox_decode(positions, self.store,
                                            self.scene.size, self.scene.channels)
        bank = self.bank()
        if detach_decoder:
            bank = _detach_bank(bank)
        return renderer.decode(positions, bank)


def _detach_bank(bank: renderer.TemplateBank) -> renderer.TemplateBank:
    sg = dc.stop_gradient
    return renderer.TemplateBank(
        contents=sg(bank.contents),
        mask_logits=sg(bank.mask_logits),
        bkg_content=sg(bank.bkg_content),
        bkg_logit=sg(bank.bkg_logit),
        scale=sg(bank.scale),
    )


def build_model(scene: datagen.SceneConfig, config: TrainConfig,
                rng: Optional[np.random.Generator] = None) -> Model:
    """Initialize every trainable tensor for one run."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    n_slots = config.n_slots or scene.system.n_objects
    store = dc.ParamStore()
    enc = perception.EncoderConfig(
        size=scene.size, channels=scene.channels, n_objects=n_slots,
        dim=scene.system.dim, n_frames=config.n_input,
    )
    perception.init_encoder_params(store, enc, rng)
    perception.init_velocity_params(store, enc, rng)
    if config.variant == "blackbox-decoder":
        renderer.init_blackbox_params(store, n_slots, scene.system.dim,
                                      scene.size, scene.channels, rng)
    else:
        scale_init = 2.0 if (scene.sprite_mode == "disc"
                             and scene.system.dim == 2) else 1.0
        renderer.init_template_params(store, n_slots, scene.size,
                                      scene.channels, scale_init, rng)

    spec = scene.system
    init = dict(config.param_init)
    for name in physics.PhysParams._ACTIVE[spec.kind]:
        init.setdefault(name, 1.0)
    template = physics.PhysParams.for_system(spec, trainable=set(config.trainable),
                                             dtype=np.float32, **init)
    kwargs = {}
    for name, t in template.active_for(spec.kind).items():
        kwargs[name] = store.add(f"phys.{name}", t.data,
                                 trainable=name in config.trainable)
    phys = physics.PhysParams(**kwargs)
    return Model(scene, config, store, phys)


# --- loss -----------------------------------------------------------------------


def total_loss(frames, model: Model, actions=None) -> tuple[dc.Tensor, dict]:
    """Objective for one batch of sequences.

    ``frames``: (B, T, H, W, C) in [0, 1] with T >= n_input + n_pred;
    ``actions``: (B, T-1) torques for actuated systems (``actions[:, t]``
    drives frame t -> t+1).  Returns the variant's scalar objective and a
    float breakdown {l_pred, l_rec, total}.
    """
    cfg = model.config
    L, Tp, variant = cfg.n_input, cfg.n_pred, cfg.variant
    frames = dc.as_tensor(frames)
    B, T, H, W, C = frames.shape
    if T < L + Tp:
        raise ValueError(f"sequences too short: {T} frames < {L} input + {Tp} predicted")
    spec = model.scene.system
    if spec.actuated and actions is None:
        raise ValueError("actuated system requires actions")

    target = frames[:, : L + Tp]
    coords = model.encode(target.reshape(B * (L + Tp), H, W, C))
    coords = coords.reshape(B, L + Tp, model.n_slots, spec.dim)

    # static autoencoding of every frame the loss sees
    rec = model.decode(coords.reshape(B * (L + Tp), model.n_slots, spec.dim))
    dr = rec.reshape(B, L + Tp, H, W, C) - target
    l_rec = (dr * dr).mean(axis=(0, 2, 3, 4)).sum()

    # physics rollout from the encoded initial conditions
    ic = coords[:, :L]
    if variant == "separate-gradients":
        ic = dc.stop_gradient(ic)
    v0 = model.velocity(ic)
    p0 = ic[:, L - 1]
    act_rows = None
    if spec.actuated:
        act_rows = np.ascontiguousarray(np.asarray(actions)[:, L - 1 : L - 1 + Tp].T)
    states = physics.rollout(spec, physics.StateBatch(p0, v0), model.phys, Tp,
                             actions=act_rows)
    pred_p = dc.stack([s.p for s in states], axis=1)  # (B, Tp, N, D)
    dec = model.decode(pred_p.reshape(B * Tp, model.n_slots, spec.dim),
                       detach_decoder=(variant == "separate-gradients"))
    dp = dec.reshape(B, Tp, H, W, C) - target[:, L:]
    l_pred = (dp * dp).mean(axis=(0, 2, 3, 4)).sum()

    if variant == "pred-only":
        total = l_pred
    else:
        total = l_pred + cfg.alpha * l_rec
    comps = {
        "l_pred": float(l_pred.data),
        "l_rec": float(l_rec.data),
        "total": float(total.data),
    }
    return total, comps


# --- optimizer --------------------------------------------------------------------


class RMSProp:
    """Root-mean-square propagation with a per-name learning-rate scale.

    The physical parameters get a larger scale than the network weights:
    RMSProp normalizes gradient magnitude away, so per-step travel is
    bounded by the learning rate, and a parameter that must move tens of
    units (g: 1 -> 60) would otherwise be unreachable within the schedule.
    """

    def __init__(self, store: dc.ParamStore, decay: float = 0.9,
                 eps: float = 1e-8, scales: Optional[dict] = None):
        self.store = store
        self.decay = decay
        self.eps = eps
        self.scales = scales or {}
        self.sq = {
            name: np.zeros_like(store[name].data)
            for name in store.trainable_names()
        }

    def _scale(self, name: str) -> float:
        for prefix, mult in self.scales.items():
            if name.startswith(prefix):
                return mult
        return 1.0

    def step(self, lr: float) -> None:
        for name in self.store.trainable_names():
            t = self.store[name]
            g = t.grad
            if g is None:
                continue
            sq = self.sq[name]
            sq *= self.decay
            sq += (1.0 - self.decay) * (g * g)
            upd = (lr * self._scale(name)) * g / (np.sqrt(sq) + self.eps)
            self.store.set_value(name, t.data - upd)


def zero_grads(store: dc.ParamStore) -> None:
    for name in store:
        store[name].grad = None


# --- checkpointing -----------------------------------------------------------------


def save_checkpoint(path, model: Model, epoch: int, rng_state: dict) -> None:
    """Binary format: magic, little-endian u64 header length, JSON header,
    then each tensor's raw little-endian float32 bytes in header order."""
    store = model.store
    header = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "rng_state": rng_state,
        "config": asdict(model.config),
        "scene": datagen.scene_manifest(model.scene),
        "tensors": [
            {
                "name": name,
                "shape": list(store[name].data.shape),
                "trainable": store.is_trainable(name),
            }
            for name in store.names()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in store.names():
            fh.write(np.ascontiguousarray(store[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, int, dict]:
    """Rebuild the model; returns (model, epoch, rng_state)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {header.get('version')!r} unsupported")
        store = dc.ParamStore()
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            store.add(rec["name"], arr, trainable=rec["trainable"])

    cdict = dict(header["config"])
    cdict["trainable"] = tuple(cdict.get("trainable", ()))
    config = TrainConfig(**cdict)
    scene = datagen.config_from_manifest(header["scene"])
    kwargs = {
        name: store[f"phys.{name}"]
        for name in physics.PhysParams._ACTIVE[scene.system.kind]
    }
    model = Model(scene, config, store, physics.PhysParams(**kwargs))
    return model, header["epoch"], header["rng_state"]


# --- training loop -----------------------------------------------------------------


def _param_row(model: Model) -> dict:
    vals = model.phys.values()
    row = {}
    for name in ("k", "l", "g", "m", "a"):
        if name in vals:
            row[name] = float(np.mean(vals[name]))
        else:
            row[name] = ""
    return row


def _split_loss(view: datagen.TrainView, model: Model, batch: int = 64) -> dict:
    """Mean loss components over a whole split, gradient-free."""
    sums = {"l_pred": 0.0, "l_rec": 0.0, "total": 0.0}
    count = 0
    with dc.no_grad():
        for start in range(0, len(view), batch):
            idx = np.arange(start, min(start + batch, len(view)))
            frames, actions = view.batch(idx)
            _, comps = total_loss(frames, model, actions)
            for key in sums:
                sums[key] += comps[key] * len(idx)
            count += len(idx)
    return {key: val / count for key, val in sums.items()}


def train(dataset: datagen.Dataset, config: TrainConfig, out_dir,
          log=print) -> tuple[Model, Path]:
    """Run the full schedule; returns the model and the last checkpoint path.

    Writes ``metrics.csv`` (one row per epoch), ``last.ckpt`` /
    ``best.ckpt``, and aborts with TrainingDivergedError on a non-finite
    loss, leaving the last good checkpoint on disk.
    """
    manifest = dataset.manifest
    scene = dataset.scene_config()
    if manifest["system"]["kind"] != datagen.scene_preset(config.scene).system.kind.value:
        raise ValueError(
            f"dataset holds {manifest['system']['kind']!r} dynamics but the "
            f"config expects scene {config.scene!r}"
        )
    if config.n_input + config.n_pred > manifest["seq_len"]:
        raise ValueError("dataset sequences shorter than n_input + n_pred")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss = seq.spawn(2)
    model = build_model(scene, config, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    opt = RMSProp(model.store, scales={"phys.": config.phys_lr_scale})

    train_view = dataset.train_view("train")
    val_view = dataset.train_view("val")
    n_batches = max(1, len(train_view) // config.batch_size)
    last_path = out / "last.ckpt"
    best_path = out / "best.ckpt"
    best_val = np.inf
    fields = ["epoch", "lr", "L_pred", "L_rec", "val_loss", "k", "l", "g", "m", "a"]
    t0 = time.time()

    with open(out / "metrics.csv", "w", newline="") as csv_fh:
        writer = csv.DictWriter(csv_fh, fieldnames=fields)
        writer.writeheader()
        for epoch in range(1, config.epochs + 1):
            lr = config.lr / (config.lr_drop_factor if epoch > config.lr_drop_epoch else 1.0)
            order = shuffle_rng.permutation(len(train_view))
            ep_pred, ep_rec = 0.0, 0.0
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                frames, actions = train_view.batch(idx)
                zero_grads(model.store)
                try:
                    loss, comps = total_loss(frames, model, actions)
                    if not np.isfinite(comps["total"]):
                        raise dc.NonFiniteError("non-finite loss")
                    dc.backward(loss)
                except dc.NonFiniteError as err:
                    raise TrainingDivergedError(
                        f"diverged at epoch {epoch} batch {b}: {err}",
                        str(last_path) if last_path.exists() else None,
                    ) from err
                opt.step(lr)
                ep_pred += comps["l_pred"] / n_batches
                ep_rec += comps["l_rec"] / n_batches

            val = _split_loss(val_view, model)
            row = {
                "epoch": epoch,
                "lr": f"{lr:.3e}",
                "L_pred": f"{ep_pred:.6f}",
                "L_rec": f"{ep_rec:.6f}",
                "val_loss": f"{val['total']:.6f}",
                **{k: (f"{v:.6f}" if v != "" else "") for k, v in _param_row(model).items()},
            }
            writer.writerow(row)
            csv_fh.flush()

            rng_state = shuffle_rng.bit_generator.state
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(last_path, model, epoch, rng_state)
            if val["total"] < best_val:
                best_val = val["total"]
                save_checkpoint(best_path, model, epoch, rng_state)
            if log is not None:
                pr = _param_row(model)
                ps = " ".join(f"{k}={v}" for k, v in pr.items() if v != "")
                log(f"[{config.scene}/{config.variant}] epoch {epoch}/{config.epochs} "
                    f"lr={lr:.1e} L_pred={ep_pred:.4f} L_rec={ep_rec:.4f} "
                    f"val={val['total']:.4f} {ps} ({time.time() - t0:.0f}s)")

    save_checkpoint(last_path, model, config.epochs,
                    shuffle_rng.bit_generator.state)
    return model, last_path


# --- SSI ---------------------------------------------------------------------------


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSI_KERNEL = _gaussian_kernel()
_SSI_C1 = 0.01**2
_SSI_C2 = 0.03**2


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssi(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Structural similarity on unit-range images, in [-1, 1].

    11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2, evaluated where
    the window fits entirely (valid region) and averaged over pixels and
    channels.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("images smaller than the 11x11 SSI window")
    vals = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        mx = _filter_valid(x, _SSI_KERNEL)
        my = _filter_valid(y, _SSI_KERNEL)
        sxx = _filter_valid(x * x, _SSI_KERNEL) - mx * mx
        syy = _filter_valid(y * y, _SSI_KERNEL) - my * my
        sxy = _filter_valid(x * y, _SSI_KERNEL) - mx * my
        num = (2 * mx * my + _SSI_C1) * (2 * sxy + _SSI_C2)
        den = (mx * mx + my * my + _SSI_C1) * (sxx + syy + _SSI_C2)
        vals.append(num / den)
    return float(np.mean(vals))


# --- evaluation --------------------------------------------------------------------


def count_mask_blobs(mask: np.ndarray, threshold: float = 0.5,
                     min_area: int = 3) -> int:
    """Connected components of ``mask > threshold`` with at least
    ``min_area`` pixels (4-connectivity); used for slot-content analysis."""
    binary = np.asarray(mask) > threshold
    seen = np.zeros_like(binary, dtype=bool)
    h, w = binary.shape
    blobs = 0
    for i in range(h):
        for j in range(w):
            if not binary[i, j] or seen[i, j]:
                continue
            area = 0
            stack = [(i, j)]
            seen[i, j] = True
            while stack:
                y, x = stack.pop()
                area += 1
                for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
            if area >= min_area:
                blobs += 1
    return blobs


def rollout_frames(model: Model, frames: np.ndarray, steps: int,
                   actions: Optional[np.ndarray] = None) -> np.ndarray:
    """Encode the first n_input frames, roll physics ``steps`` ahead, decode.

    ``frames``: (B, >=n_input, H, W, C); returns (B, steps, H, W, C) float32.
    """
    L = model.config.n_input
    spec = model.scene.system
    B = frames.shape[0]
    with dc.no_grad():
        flat = dc.Tensor(np.ascontiguousarray(frames[:, :L]).reshape(
            B * L, *frames.shape[2:]))
        coords = model.encode(flat).reshape(B, L, model.n_slots, spec.dim)
        v0 = model.velocity(coords)
        p0 = coords[:, L - 1]
        act_rows = None
        if spec.actuated:
            act_rows = np.ascontiguousarray(np.asarray(actions)[:, L - 1 : L - 1 + steps].T)
        states = physics.rollout(spec, physics.StateBatch(p0, v0), model.phys,
                                 steps, actions=act_rows)
        out = np.empty((B, steps) + frames.shape[2:], dtype=np.float32)
        for t, s in enumerate(states):
            out[:, t] = model.decode(s.p).data
    return out


def evaluate(model: Model, dataset: datagen.Dataset, split: str = "test",
             out_dir=None, n_strips: int = 3, batch: int = 50) -> dict:
    """Score rollouts against ground-truth frames on one split.

    Per-step SSI over the n_pred training horizon plus the n_ext
    extrapolation steps, test loss components, learned vs generating
    parameters, and (template decoder only) per-slot mask statistics.
    Writes ``report.json`` and rollout strip PNGs when ``out_dir`` is given.
    """
    manifest = dataset.manifest
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in dataset")
    cfg = model.config
    L, Tp, Te = cfg.n_input, cfg.n_pred, cfg.n_ext
    steps = Tp + Te
    if L + steps > manifest["seq_len"]:
        raise ValueError("dataset sequences too short for the evaluation horizon")
    n = manifest["splits"][split]
    view = dataset.train_view(split)

    ssi_sums = np.zeros(steps)
    loss = _split_loss(view, model, batch=batch)
    strips_saved = []
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        frames, actions = view.batch(idx)
        pred = rollout_frames(model, frames, steps, actions)
        for b in range(len(idx)):
            for t in range(steps):
                ssi_sums[t] += ssi(pred[b, t], frames[b, L + t])
        if out_dir is not None and len(strips_saved) < n_strips:
            for b in range(min(n_strips - len(strips_saved), len(idx))):
                path = Path(out_dir) / f"rollout_{split}_{start + b:04d}.png"
                _save_strip(frames[b], pred[b], L, path)
                strips_saved.append(str(path))

    ssi_per_step = (ssi_sums / n).tolist()
    report = {
        "version": REPORT_VERSION,
        "scene": manifest["name"],
        "variant": cfg.variant,
        "split": split,
        "n_sequences": n,
        "n_input": L,
        "n_pred": Tp,
        "n_ext": Te,
        "ssi_per_step": ssi_per_step,
        "mean_ssi_pred": float(np.mean(ssi_per_step[:Tp])),
        "mean_ssi_ext": float(np.mean(ssi_per_step[Tp:])) if Te else None,
        "l_pred": loss["l_pred"],
        "l_rec": loss["l_rec"],
        "learned_params": {k: (v.tolist() if np.ndim(v) else float(v))
                            for k, v in model.phys.values().items()},
        "true_params": manifest["true_params"],
        "strips": strips_saved,
    }
    if not model.blackbox:
        with dc.no_grad():
            bank = model.bank()
        masks = 1.0 / (1.0 + np.exp(-bank.mask_logits.data[..., 0]))
        report["template_mask_means"] = [float(m.mean()) for m in masks]
        report["template_blob_counts"] = [count_mask_blobs(m) for m in masks]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"report_{split}.json", "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    return report


def _save_strip(truth: np.ndarray, pred: np.ndarray, L: int, path) -> None:
    """Two rows: ground truth (full sequence) over predictions (from frame L)."""
    T, H, W, C = truth.shape
    steps = pred.shape[0]
    cols = L + steps
    canvas = np.zeros((2 * H + 2, cols * (W + 1), 3), dtype=np.float32)
    for t in range(min(cols, T)):
        canvas[:H, t * (W + 1) : t * (W + 1) + W] = _to_rgb(truth[t])
    for t in range(steps):
        x = (L + t) * (W + 1)
        canvas[H + 2 : 2 * H + 2, x : x + W] = _to_rgb(pred[t])
    img = (np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def _to_rgb(frame: np.ndarray) -> np.ndarray:
    return np.repeat(frame, 3, axis=-1) if frame.shape[-1] == 1 else frame


# --- ablation ---------------------------------------------------------------------


def run_ablation(dataset: datagen.Dataset, base_config: TrainConfig,
                 out_dir, log=print) -> list[dict]:
    """Train all four variants with identical seed/budget; score on test.

    Returns one row per variant: {variant, l_pred, l_rec}; writes
    ``ablation.json`` plus each run under ``out_dir/<variant>/``.
    """
    rows = []
    for variant in VARIANTS:
        cfg_dict = asdict(base_config)
        cfg_dict["variant"] = variant
        cfg_dict["trainable"] = tuple(cfg_dict["trainable"])
        config = TrainConfig(**cfg_dict)
        run_dir = Path(out_dir) / variant
        model, _ = train(dataset, config, run_dir, log=log)
        report = evaluate(model, dataset, "test", out_dir=run_dir, n_strips=1)
        rows.append({"variant": variant, "l_pred": report["l_pred"],
                     "l_rec": report["l_rec"]})
    with open(Path(out_dir) / "ablation.json", "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    return rows
