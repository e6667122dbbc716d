"""Finite-difference batteries over every differentiable pathway.

Each battery builds small 64-bit problems and compares reverse-mode
gradients against central finite differences through ``dc.grad_check``.
Results come back as :class:`CheckResult` rows so the command line and the
test suite can assert or render them identically.  Problem sizes are picked
so the full set finishes in seconds on one core: dynamics run at their real
sizes (they are tiny), image pathways run on 8-16 pixel frames, which
exercises identical code paths at a fraction of the cost.

Readout weights are random (or targets are) wherever a plain sum would be
degenerate — e.g. the summed positions of an isolated spring pair are
conserved, so their gradient with respect to the spring constant is an
exact zero that would verify trivially.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import diffcore as dc
from . import perception, physics, renderer
from .perception import EncoderConfig
from .physics import PhysParams, StateBatch, SystemKind, SystemSpec

DEFAULT_TOL = 1e-4
# conv stacks checked on 8x8 frames accumulate more rounding in the FD
# quotient than the shallow pathways, hence the looser bound
PERCEPTION_TOL = 1e-3

_SPRING = SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3)
_GRAVITY = SystemSpec(SystemKind.GRAVITY, n_objects=3, dim=2, dt=0.5)
_PENDULUM = SystemSpec(SystemKind.PENDULUM, n_objects=1, dim=1, dt=0.05, actuated=True)
_BOUNCE = SystemSpec(SystemKind.BOUNCE, n_objects=1, dim=2, dt=1.0, bounds=(0.0, 32.0))


@dataclass(frozen=True)
class CheckResult:
    """One gradient comparison: worst relative error vs. its tolerance."""

    suite: str
    label: str
    err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.err < self.tol


def _separated_positions(rng: np.random.Generator, n: int, min_sep: float = 8.0,
                         lo: float = 6.0, hi: float = 26.0) -> np.ndarray:
    """Rejection-sample n points that keep pair forces smooth under FD probes."""
    while True:
        p = rng.uniform(lo, hi, size=(n, 2))
        d = np.linalg.norm(p[:, None] - p[None, :], axis=-1)
        if np.all(d[~np.eye(n, dtype=bool)] >= min_sep):
            return p


# --- physics ------------------------------------------------------------------


def physics_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    rows = []

    def add(label, fn, inputs, probe_limit=0):
        err = dc.grad_check(fn, inputs, probe_limit=probe_limit,
                            rng=np.random.default_rng(seed + 1))
        rows.append(CheckResult("physics", label, float(err), DEFAULT_TOL))

    # spring pair: force-law constants through a two-step rollout
    p0 = _separated_positions(rng, 2, min_sep=6.0)[None]
    v0 = rng.normal(size=(1, 2, 2))
    w = dc.Tensor(rng.normal(size=(1, 2, 2)))

    def spring_params(k, l):
        states = physics.rollout(_SPRING, StateBatch.from_arrays(p0, v0),
                                 PhysParams(k=k, l=l), steps=2)
        return (states[-1].p * w).sum()

    add("spring rollout d/d(k,l)", spring_params, [np.asarray(4.0), np.asarray(6.0)])

    def spring_state(p, v):
        states = physics.rollout(_SPRING, StateBatch(p, v), PhysParams(k=4.0, l=6.0), steps=2)
        return (states[-1].p * w).sum()

    add("spring rollout d/d(p0,v0)", spring_state, [p0, v0])

    # three-body gravity: coupling constant and per-object masses
    pg = _separated_positions(rng, 3)[None]
    vg = rng.normal(size=(1, 3, 2)) * 0.5
    wg = dc.Tensor(rng.normal(size=(1, 3, 2)))

    def gravity_g(g):
        params = PhysParams(g=g, m=dc.Tensor(np.ones(3)))
        states = physics.rollout(_GRAVITY, StateBatch.from_arrays(pg, vg), params, steps=2)
        return (states[-1].p * wg).sum()

    add("gravity rollout d/dg", gravity_g, [np.asarray(60.0)])

    def gravity_m(m):
        params = PhysParams(g=dc.Tensor(np.asarray(60.0)), m=m)
        states = physics.rollout(_GRAVITY, StateBatch.from_arrays(pg, vg), params, steps=2)
        return (states[-1].p * wg).sum()

    add("gravity rollout d/dm", gravity_m, [np.ones(3)])

    # actuated pendulum: gravity strength and actuation coefficient
    theta0 = rng.uniform(-np.pi, np.pi, size=(1, 1, 1))
    omega0 = rng.uniform(-6, 6, size=(1, 1, 1))
    actions = rng.uniform(-2, 2, size=(2, 1))

    def pendulum_params(g, a):
        states = physics.rollout(_PENDULUM, StateBatch.from_arrays(theta0, omega0),
                                 PhysParams(g=g, a=a), steps=2, actions=actions)
        return states[-1].p.sum()

    add("pendulum rollout d/d(g,a)", pendulum_params, [np.asarray(10.0), np.asarray(1.0)])

    def pendulum_state(th, om):
        states = physics.rollout(_PENDULUM, StateBatch(th, om),
                                 PhysParams(g=10.0, a=1.0), steps=2, actions=actions)
        return (states[-1].p + states[-1].v).sum()

    add("pendulum rollout d/d(theta0,omega0)", pendulum_state, [theta0, omega0])

    # wall reflection: state gradients must pass through the velocity flip.
    # The object is driven firmly through the wall so no FD probe straddles
    # the reflection kink.
    pb = np.array([[[2.0, 15.0]]])
    vb = np.array([[[-9.7, 1.0]]])

    def bounce_state(p, v):
        out = physics.euler_step(_BOUNCE, StateBatch(p, v), PhysParams())
        return (out.p + out.v).sum()

    add("bounce reflection d/d(p0,v0)", bounce_state, [pb, vb])
    return rows


# --- renderer -----------------------------------------------------------------


def renderer_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    rows = []
    size, channels = 12, 1

    # full template pathway: generator weights, scale and coordinates through
    # warping, mask softmax and compositing into a reconstruction loss
    store = dc.ParamStore()
    renderer.init_template_params(store, 1, size, channels, 2.0, rng, dtype=np.float64)
    names = store.names()
    pos = np.array([[[5.3, 7.6]]])
    target = rng.uniform(size=(1, size, size, channels))

    def decode_full(p, *weights):
        bank = renderer.make_templates(dict(zip(names, weights)), 1, size, channels)
        err = renderer.decode(p, bank) - dc.Tensor(target)
        return (err * err).sum()

    err = dc.grad_check(decode_full, [pos] + [store[n].data for n in names],
                        probe_limit=40, rng=np.random.default_rng(seed + 1))
    rows.append(CheckResult("renderer", "decode d/d(coords,generator)", float(err), DEFAULT_TOL))

    # coordinates alone against a hard-masked template: isolates the bilinear
    # warp with the mask saturated out of the picture
    content = rng.uniform(size=(size, size, channels))
    bank = renderer.TemplateBank(
        dc.Tensor(content[None]),
        dc.Tensor(np.full((1, size, size, 1), 30.0)),
        dc.Tensor(np.zeros((size, size, channels))),
        dc.Tensor(np.full((size, size, 1), -30.0)),
        dc.Tensor(np.asarray(1.0)),
    )

    def decode_pos(p):
        err = renderer.decode(p, bank) - dc.Tensor(target)
        return (err * err).sum()

    err = dc.grad_check(decode_pos, [np.array([[[7.3, 4.6]]])])
    rows.append(CheckResult("renderer", "decode d/dcoords (saturated mask)", float(err), DEFAULT_TOL))

    # mask pathway on its own: post-softmax weights vs. coordinates
    wmask = rng.normal(size=(1, size, size, 2))

    def mask_pos(p):
        return (renderer.mask_weights(p, bank) * dc.Tensor(wmask)).sum()

    err = dc.grad_check(mask_pos, [np.array([[[6.2, 5.4]]])])
    rows.append(CheckResult("renderer", "mask weights d/dcoords", float(err), DEFAULT_TOL))

    # unconstrained MLP decoder used by the ablation
    bstore = dc.ParamStore()
    renderer.init_blackbox_params(bstore, 2, 2, 8, 1, rng, hidden=16, dtype=np.float64)
    bnames = bstore.names()
    bpos = rng.uniform(1.0, 7.0, size=(2, 2, 2))
    btarget = rng.uniform(size=(2, 8, 8, 1))

    def blackbox(p, *weights):
        out = renderer.blackbox_decode(p, dict(zip(bnames, weights)), 8, 1)
        err = out - dc.Tensor(btarget)
        return (err * err).sum()

    err = dc.grad_check(blackbox, [bpos] + [bstore[n].data for n in bnames],
                        probe_limit=40, rng=np.random.default_rng(seed + 2))
    rows.append(CheckResult("renderer", "blackbox decode d/d(coords,weights)", float(err), DEFAULT_TOL))
    return rows


# --- perception ---------------------------------------------------------------


def _encoder_check(config: EncoderConfig, seed: int, label: str) -> CheckResult:
    store = dc.ParamStore()
    rng = np.random.default_rng(seed)
    perception.init_encoder_params(store, config, rng, dtype=np.float64)
    names = store.names()
    frame = np.random.default_rng(seed + 1).uniform(
        0.2, 0.8, (1, config.size, config.size, config.channels)
    )
    readout = np.linspace(0.5, 1.5, config.n_objects * config.dim).reshape(
        1, config.n_objects, config.dim
    )

    def fn(frame_t, *weights):
        coords = perception.encode(frame_t, dict(zip(names, weights)), config)
        return (coords * dc.Tensor(readout)).sum()

    err = dc.grad_check(fn, [frame] + [store[n].data for n in names],
                        probe_limit=25, rng=np.random.default_rng(seed + 2))
    return CheckResult("perception", label, float(err), PERCEPTION_TOL)


def perception_suite(seed: int = 0) -> List[CheckResult]:
    rows = [
        _encoder_check(
            EncoderConfig(size=8, channels=1, n_objects=2, dim=2, n_frames=3),
            seed + 3, "encoder d/d(frame,weights), planar head"),
        _encoder_check(
            EncoderConfig(size=8, channels=1, n_objects=1, dim=1, n_frames=3),
            seed + 4, "encoder d/d(frame,weights), angle head"),
    ]

    cfg = EncoderConfig(size=8, channels=1, n_objects=2, dim=2, n_frames=3)
    store = dc.ParamStore()
    perception.init_velocity_params(store, cfg, np.random.default_rng(seed + 5),
                                    dtype=np.float64)
    names = store.names()
    pos = np.random.default_rng(seed + 6).uniform(1.0, 7.0, (2, 3, 2, 2))
    readout = np.linspace(0.5, 1.5, 8).reshape(2, 2, 2)

    def vel(pos_t, *weights):
        v = perception.estimate_velocity(pos_t, dict(zip(names, weights)), cfg)
        return (v * dc.Tensor(readout)).sum()

    err = dc.grad_check(vel, [pos] + [store[n].data for n in names],
                        probe_limit=30, rng=np.random.default_rng(seed + 7))
    rows.append(CheckResult("perception", "velocity head d/d(coords,weights)",
                            float(err), DEFAULT_TOL))
    return rows


# --- driver -------------------------------------------------------------------

SUITES: Dict[str, Callable[[int], List[CheckResult]]] = {
    "physics": physics_suite,
    "renderer": renderer_suite,
    "perception": perception_suite,
}


def run(suite: str = "all", seed: int = 0) -> List[CheckResult]:
    """Run one named battery, or all of them in a fixed order."""
    if suite == "all":
        names = list(SUITES)
    elif suite in SUITES:
        names = [suite]
    else:
        raise ValueError(f"unknown suite {suite!r}: expected one of "
                         f"{', '.join(SUITES)} or 'all'")
    rows: List[CheckResult] = []
    for name in names:
        rows.extend(SUITES[name](seed))
    return rows


def format_rows(rows: List[CheckResult]) -> str:
    """Fixed-width report, one line per comparison plus a verdict."""
    width = max(len(r.label) for r in rows)
    lines = []
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.suite:<10} {r.label:<{width}}  err {r.err:.3e}"
                     f"  tol {r.tol:.0e}  {status}")
    worst = max(rows, key=lambda r: r.err / r.tol)
    lines.append(f"worst: {worst.label} at {worst.err:.3e} "
                 f"({'all passed' if all(r.ok for r in rows) else 'FAILURES PRESENT'})")
    return "\n".join(lines)
