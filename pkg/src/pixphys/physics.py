"""Differentiable dynamics for the four benchmark systems.

Each system is a small ODE integrated with semi-implicit Euler: within one
frame interval ``dt`` the engine performs ``substeps`` sub-steps, updating the
velocity from the force at the *old* position first and then moving the
position with the *new* velocity.  This order makes the integrator symplectic,
which is what keeps spring orbits and gravity trajectories from spiralling
outward over long rollouts.

Force laws:

* spring    F_ij = -k * (p_i - p_j) - l * (p_i - p_j) / |p_i - p_j|
* gravity   F_ij = -g * m_i * m_j * (p_i - p_j) / max(|p_i - p_j|, eps)^3
* pendulum  F    = -(3/2) * g * sin(theta + pi) + 3 * a * u
* bounce    F    = 0, with specular wall reflection each sub-step

The spring law is intentionally *not* the textbook Hooke-with-rest-length
form ``-k(|d| - l) d̂``: both terms pull the objects together and ``l`` scales
a unit-vector term.  The data generator and the learned engine must share the
exact same expression, otherwise recovering ``(k, l)`` from video would be
ill-posed.

Everything here is written against :mod:`pixphys.diffcore` tensors, so forces
and rollouts are differentiable with respect to positions, velocities and any
trainable physical parameter.  Pure-numpy callers (the data generator, the
planner) wrap their arrays in constant tensors and read ``.data`` back out.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from . import diffcore as dc

# Minimum inter-object distance substituted into denominators by the learned
# engine (pixels).  The data generator passes 0.0 instead: it wants the raw
# law, and a coincident pair should fail loudly (NonFiniteError) rather than
# produce a silently clamped force.
DIST_FLOOR = 1e-3


class SystemKind(str, Enum):
    SPRING = "spring"
    GRAVITY = "gravity"
    PENDULUM = "pendulum"
    BOUNCE = "bounce"


@dataclass(frozen=True)
class SystemSpec:
    """Static description of a dynamical system (no learnable content)."""

    kind: SystemKind
    n_objects: int
    dim: int
    dt: float
    substeps: int = 5
    actuated: bool = False
    bounds: Optional[tuple[float, float]] = None  # wall box per axis (bounce)

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.kind == SystemKind.PENDULUM:
            if self.n_objects != 1 or self.dim != 1 or not self.actuated:
                raise ValueError("pendulum requires n_objects=1, dim=1, actuated=True")
        elif self.kind in (SystemKind.SPRING, SystemKind.GRAVITY):
            if self.dim != 2:
                raise ValueError(f"{self.kind.value} systems are planar (dim=2)")
        if self.bounds is not None:
            if self.kind != SystemKind.BOUNCE:
                raise ValueError("wall bounds only apply to the bounce system")
            lo, hi = self.bounds
            if not hi > lo:
                raise ValueError("bounds must satisfy hi > lo")
        elif self.kind == SystemKind.BOUNCE:
            raise ValueError("bounce system requires wall bounds")


@dataclass
class PhysParams:
    """Physical constants of one system, each either trainable or frozen.

    Fields are diffcore tensors so gradients can flow into whichever subset
    is marked trainable; frozen values are plain constant tensors.  Only the
    parameters of the matching system kind may be present: spring uses
    ``(k, l)``, gravity ``(g, m)``, pendulum ``(g, a)``, bounce none.
    """

    k: Optional[dc.Tensor] = None  # spring constant
    l: Optional[dc.Tensor] = None  # spring equilibrium distance, pixels
    g: Optional[dc.Tensor] = None  # gravity constant
    m: Optional[dc.Tensor] = None  # per-object masses, shape (N,)
    a: Optional[dc.Tensor] = None  # actuation coefficient

    _FIELDS = ("k", "l", "g", "m", "a")
    _ACTIVE = {
        SystemKind.SPRING: ("k", "l"),
        SystemKind.GRAVITY: ("g", "m"),
        SystemKind.PENDULUM: ("g", "a"),
        SystemKind.BOUNCE: (),
    }

    @classmethod
    def for_system(
        cls,
        spec: SystemSpec,
        trainable: Union[bool, Sequence[str]] = False,
        dtype=np.float64,
        **values: float,
    ) -> "PhysParams":
        """Build the parameter set for ``spec`` from plain floats.

        ``trainable`` is either a bool applied to every active parameter or
        the collection of names to mark trainable.  Gravity refuses to train
        ``g`` and ``m`` at once: the force only sees the products g*m_i*m_j,
        so the split is unidentifiable and one of the two must stay frozen.
        """
        active = cls._ACTIVE[spec.kind]
        unknown = set(values) - set(active)
        if unknown:
            raise ValueError(f"{sorted(unknown)} not active for {spec.kind.value}")
        missing = set(active) - set(values)
        if missing:
            raise ValueError(f"missing parameters {sorted(missing)} for {spec.kind.value}")
        if isinstance(trainable, bool):
            train_set = set(active) if trainable else set()
        else:
            train_set = set(trainable)
            if not train_set <= set(active):
                raise ValueError(f"cannot train {sorted(train_set - set(active))}")
        if spec.kind == SystemKind.GRAVITY and {"g", "m"} <= train_set:
            raise ValueError("train either g or m, not both (only their product is identifiable)")

        kwargs = {}
        for name in active:
            raw = np.asarray(values[name], dtype=dtype)
            if name == "m":
                raw = np.broadcast_to(raw, (spec.n_objects,)).copy()
            elif raw.ndim != 0:
                raise ValueError(f"{name} must be a scalar")
            kwargs[name] = dc.Tensor(raw, requires_grad=name in train_set)
        return cls(**kwargs)

    def active_for(self, kind: SystemKind) -> dict[str, dc.Tensor]:
        """The populated parameters, validated against ``kind``."""
        out = {}
        for name in self._FIELDS:
            t = getattr(self, name)
            if t is None:
                continue
            if name not in self._ACTIVE[kind]:
                raise ValueError(f"parameter {name!r} is not active for {kind.value}")
            out[name] = t
        missing = set(self._ACTIVE[kind]) - set(out)
        if missing:
            raise ValueError(f"missing parameters {sorted(missing)} for {kind.value}")
        return out

    def trainable(self) -> dict[str, dc.Tensor]:
        return {
            name: t
            for name in self._FIELDS
            if (t := getattr(self, name)) is not None and t.requires_grad
        }

    def values(self) -> dict[str, np.ndarray]:
        """Current numeric values (copies) of the populated parameters."""
        return {
            name: getattr(self, name).data.copy()
            for name in self._FIELDS
            if getattr(self, name) is not None
        }


@dataclass
class StateBatch:
    """Positions and velocities of a batch of systems: both (B, N, D).

    Pendulum angles live on the real line (unwrapped); callers reduce mod 2pi
    only when rendering or scoring, never inside the dynamics.
    """

    p: dc.Tensor
    v: dc.Tensor

    def __post_init__(self):
        if self.p.shape != self.v.shape or self.p.ndim != 3:
            raise ValueError(f"p and v must share a (B, N, D) shape, got {self.p.shape} vs {self.v.shape}")

    @classmethod
    def from_arrays(cls, p: np.ndarray, v: np.ndarray) -> "StateBatch":
        return cls(dc.Tensor(np.asarray(p)), dc.Tensor(np.asarray(v)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.p.shape

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.p.data.copy(), self.v.data.copy()


def _as_action(u, batch: int, dtype) -> dc.Tensor:
    t = u if isinstance(u, dc.Tensor) else dc.Tensor(np.asarray(u, dtype=dtype))
    if t.shape != (batch,):
        raise ValueError(f"action must have shape ({batch},), got {t.shape}")
    return t


def _pairwise_force(
    p: dc.Tensor, law, dist_floor: float
) -> dc.Tensor:
    """Sum a pairwise central force over j != i.

    ``law(diff, inv_pow)`` maps the (B, N, N, D) displacement tensor and a
    callable giving |d|^(-q) (with the diagonal masked to a safe value and the
    floor applied) to the per-pair force.
    """
    B, N, D = p.shape
    pi = p.reshape((B, N, 1, D))
    pj = p.reshape((B, 1, N, D))
    diff = pi - pj  # (B, N, N, D)
    norm2 = (diff * diff).sum(axis=-1, keepdims=True)  # (B, N, N, 1)
    dtype = p.data.dtype
    eye = np.eye(N, dtype=dtype).reshape(1, N, N, 1)
    # +1 on the diagonal keeps 0^(-q) off the self-pair; the floor guards
    # genuinely close pairs.  floor=0 leaves the raw law: a coincident pair
    # hits 0^(-q) = inf and _check_finite raises.
    norm2_safe = dc.maximum_const(norm2 + dc.Tensor(eye), dist_floor * dist_floor)

    def inv_pow(q: float) -> dc.Tensor:
        return dc.power(norm2_safe, -0.5 * q)

    pair = law(diff, inv_pow)  # (B, N, N, D)
    offdiag = dc.Tensor(np.asarray(1.0, dtype=dtype) - eye)
    return (pair * offdiag).sum(axis=2)  # (B, N, D)


def compute_force(
    spec: SystemSpec,
    state: StateBatch,
    params: PhysParams,
    action=None,
    dist_floor: float = DIST_FLOOR,
) -> dc.Tensor:
    """Net force on each object, shape (B, N, D).

    ``action`` (a length-B array or tensor) is required exactly when
    ``spec.actuated``.  ``dist_floor`` clamps inter-object distances inside
    denominators; pass 0.0 to evaluate the raw law.
    """
    if spec.actuated and action is None:
        raise ValueError(f"{spec.kind.value} is actuated; an action is required")
    if not spec.actuated and action is not None:
        raise ValueError(f"{spec.kind.value} takes no action")
    B, N, D = state.p.shape
    if N != spec.n_objects or D != spec.dim:
        raise ValueError(f"state shape {state.p.shape} does not match spec ({spec.n_objects}, {spec.dim})")
    active = params.active_for(spec.kind)

    if spec.kind == SystemKind.BOUNCE:
        return dc.Tensor(np.zeros_like(state.p.data))

    if spec.kind == SystemKind.SPRING:
        k, l = active["k"], active["l"]

        def law(diff, inv_pow):
            return (-1.0 * k) * diff + (-1.0 * l) * (diff * inv_pow(1.0))

        return _pairwise_force(state.p, law, dist_floor)

    if spec.kind == SystemKind.GRAVITY:
        g, m = active["g"], active["m"]
        mi = m.reshape((1, N, 1, 1))
        mj = m.reshape((1, 1, N, 1))

        def law(diff, inv_pow):
            return (-1.0 * g) * (mi * mj) * (diff * inv_pow(3.0))

        return _pairwise_force(state.p, law, dist_floor)

    # pendulum: theta is the single coordinate; the actuation channel has a
    # fixed gain of 3 (gym convention), and the learnable coefficient a
    # scales it, so the true system corresponds to a = 1
    g, a = active["g"], active["a"]
    u = _as_action(action, B, state.p.data.dtype).reshape((B, 1, 1))
    return (-1.5 * g) * dc.sin(state.p + np.pi) + (3.0 * a) * u


def reflect_walls(state: StateBatch, bounds: tuple[float, float]) -> StateBatch:
    """Specular elastic reflection of every coordinate into [lo, hi].

    Where a position exceeds a wall it is mirrored about that wall and the
    matching velocity component is negated.  States already inside the box
    pass through unchanged, so the operation is idempotent.  Gradients follow
    the active branch; the reflection is piecewise linear and the systems
    that bounce have no trainable force parameters, so no smoothing is needed.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    p, v = state.p, state.v

    below = p.data < lo
    p = dc.where(below, 2.0 * lo - p, p)
    v = dc.where(below, -v, v)
    above = p.data > hi
    p = dc.where(above, 2.0 * hi - p, p)
    v = dc.where(above, -v, v)
    return StateBatch(p, v)


def euler_step(
    spec: SystemSpec,
    state: StateBatch,
    params: PhysParams,
    action=None,
    dist_floor: float = DIST_FLOOR,
) -> StateBatch:
    """Advance one frame interval: ``substeps`` semi-implicit Euler sub-steps.

    Each sub-step evaluates the force at the current (old) position, updates
    the velocity, then moves the position with the *updated* velocity.  The
    bounce system reflects off the walls after every sub-step.
    """
    h = spec.dt / spec.substeps
    out = state
    for _ in range(spec.substeps):
        f = compute_force(spec, out, params, action, dist_floor)
        v = out.v + f * h
        p = out.p + v * h
        out = StateBatch(p, v)
        if spec.kind == SystemKind.BOUNCE:
            out = reflect_walls(out, spec.bounds)
    return out


def rollout(
    spec: SystemSpec,
    initial: StateBatch,
    params: PhysParams,
    steps: int,
    actions=None,
    dist_floor: float = DIST_FLOOR,
) -> list[StateBatch]:
    """Iterate ``euler_step`` for ``steps`` frames (initial state excluded).

    ``actions[t]`` is consumed by step ``t``; required iff the system is
    actuated, in which case it must index ``steps`` length-B rows.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if spec.actuated:
        if actions is None or len(actions) != steps:
            raise ValueError(f"actuated rollout needs one action row per step ({steps})")
    elif actions is not None:
        raise ValueError(f"{spec.kind.value} takes no actions")
    states = []
    cur = initial
    for t in range(steps):
        cur = euler_step(spec, cur, params, actions[t] if spec.actuated else None, dist_floor)
        states.append(cur)
    return states
