"""Dynamics engine tests.

Reference values are computed by deliberately independent means: forces by
explicit pair loops over plain numpy arrays, integration by a hand-written
python recurrence.  A bug in the tensor engine therefore cannot cancel out
of both sides of a comparison.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixphys import diffcore as dc
from pixphys import physics
from pixphys.physics import PhysParams, StateBatch, SystemKind, SystemSpec

SPRING2 = SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3)
GRAVITY3 = SystemSpec(SystemKind.GRAVITY, n_objects=3, dim=2, dt=0.5)
PENDULUM = SystemSpec(SystemKind.PENDULUM, n_objects=1, dim=1, dt=0.05, actuated=True)
BOUNCE2 = SystemSpec(SystemKind.BOUNCE, n_objects=2, dim=2, dt=1.0, bounds=(0.0, 32.0))


# --- independent references -------------------------------------------------

def ref_spring_force(p, k, l):
    """Pair loop over -k*d - l*d/|d|, p shape (N, 2)."""
    f = np.zeros_like(p)
    for i in range(len(p)):
        for j in range(len(p)):
            if i != j:
                d = p[i] - p[j]
                f[i] += -k * d - l * d / np.linalg.norm(d)
    return f


def ref_gravity_force(p, m, g):
    f = np.zeros_like(p)
    for i in range(len(p)):
        for j in range(len(p)):
            if i != j:
                d = p[i] - p[j]
                f[i] += -g * m[i] * m[j] * d / np.linalg.norm(d) ** 3
    return f


def ref_pendulum_force(theta, u, g, a):
    # torque channel gain is 3 (gym convention); a scales it, true a = 1
    return -1.5 * g * np.sin(theta + np.pi) + 3.0 * a * u


def hand_substep_loop(p, v, h, substeps, force):
    """The sub-step recurrence, written as a plain loop; logs sub velocities."""
    sub_vs = []
    for _ in range(substeps):
        f = force(p, v)
        v = v + h * f
        p = p + h * v
        sub_vs.append(v.copy())
    return p, v, sub_vs


def spring_params(k=4.0, l=6.0, **kw):
    return PhysParams.for_system(SPRING2, k=k, l=l, **kw)


def gravity_params(g=60.0, m=1.0, **kw):
    return PhysParams.for_system(GRAVITY3, g=g, m=m, **kw)


def pendulum_params(g=10.0, a=1.0, **kw):
    return PhysParams.for_system(PENDULUM, g=g, a=a, **kw)


def state(p, v):
    return StateBatch.from_arrays(np.asarray(p, dtype=np.float64), np.asarray(v, dtype=np.float64))


def separated_positions(rng, n, low=4.0, high=28.0, min_sep=5.0):
    while True:
        p = rng.uniform(low, high, size=(n, 2))
        d = np.linalg.norm(p[:, None] - p[None, :], axis=-1)
        if np.all(d[~np.eye(n, dtype=bool)] >= min_sep):
            return p


# --- force oracles ----------------------------------------------------------

def test_spring_force_hand_oracle():
    # |d| = 5 for p1 - p2 = (-3, -4):  -4*(-3,-4) - 6*(-3/5,-4/5) = (15.6, 20.8)
    s = state([[[0.0, 0.0], [3.0, 4.0]]], np.zeros((1, 2, 2)))
    f = physics.compute_force(SPRING2, s, spring_params()).data
    np.testing.assert_allclose(f[0, 0], [15.6, 20.8], rtol=1e-12)
    np.testing.assert_allclose(f[0, 1], -f[0, 0], rtol=1e-12)


def test_spring_force_matches_pair_loop():
    rng = np.random.default_rng(7)
    for _ in range(5):
        p = separated_positions(rng, 2)
        s = state(p[None], rng.normal(size=(1, 2, 2)))
        f = physics.compute_force(SPRING2, s, spring_params()).data
        np.testing.assert_allclose(f[0], ref_spring_force(p, 4.0, 6.0), rtol=1e-10)


def test_gravity_force_matches_pair_loop():
    rng = np.random.default_rng(8)
    m = np.array([1.0, 1.5, 0.75])
    params = PhysParams.for_system(GRAVITY3, g=60.0, m=1.0)
    params.m.data[:] = m
    for _ in range(5):
        p = separated_positions(rng, 3)
        s = state(p[None], np.zeros((1, 3, 2)))
        f = physics.compute_force(GRAVITY3, s, params).data
        np.testing.assert_allclose(f[0], ref_gravity_force(p, m, 60.0), rtol=1e-10)


def test_gravity_pair_forces_antisymmetric():
    rng = np.random.default_rng(9)
    spec = SystemSpec(SystemKind.GRAVITY, n_objects=2, dim=2, dt=0.5)
    params = PhysParams.for_system(spec, g=60.0, m=1.0)
    p = separated_positions(rng, 2)
    s = state(p[None], np.zeros((1, 2, 2)))
    f = physics.compute_force(spec, s, params).data
    np.testing.assert_allclose(f[0, 0], -f[0, 1], rtol=1e-12)


def test_pendulum_force_zero_at_upright():
    s = state(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    f = physics.compute_force(PENDULUM, s, pendulum_params(), action=np.zeros(1))
    np.testing.assert_allclose(f.data, 0.0, atol=1e-12)


def test_pendulum_force_formula():
    rng = np.random.default_rng(10)
    theta = rng.uniform(-2 * np.pi, 2 * np.pi, size=(4, 1, 1))
    u = rng.uniform(-2, 2, size=4)
    s = state(theta, np.zeros_like(theta))
    f = physics.compute_force(PENDULUM, s, pendulum_params(g=9.5, a=1.3), action=u)
    np.testing.assert_allclose(
        f.data, ref_pendulum_force(theta, u[:, None, None], 9.5, 1.3), rtol=1e-12
    )


def test_coincident_objects_raise_under_raw_law():
    s = state([[[5.0, 5.0], [5.0, 5.0]]], np.zeros((1, 2, 2)))
    with pytest.raises(dc.NonFiniteError):
        physics.compute_force(SPRING2, s, spring_params(), dist_floor=0.0)
    # the learned engine clamps instead
    f = physics.compute_force(SPRING2, s, spring_params(), dist_floor=1e-3)
    assert np.all(np.isfinite(f.data))


# --- integrator -------------------------------------------------------------

def test_free_motion():
    spec = SystemSpec(SystemKind.BOUNCE, n_objects=1, dim=2, dt=0.3, bounds=(0.0, 32.0))
    s0 = state(np.zeros((1, 1, 2)), np.ones((1, 1, 2)))
    s1 = physics.euler_step(spec, s0, PhysParams())
    np.testing.assert_allclose(s1.p.data, 0.3, rtol=1e-12)
    np.testing.assert_allclose(s1.v.data, 1.0, rtol=1e-12)


@pytest.mark.parametrize("kind", ["spring", "gravity", "pendulum"])
def test_euler_step_matches_hand_loop(kind):
    rng = np.random.default_rng(11)
    if kind == "spring":
        spec, params = SPRING2, spring_params()
        p0 = separated_positions(rng, 2)[None]
        force = lambda p, v: ref_spring_force(p[0], 4.0, 6.0)[None]
        action = None
    elif kind == "gravity":
        spec, params = GRAVITY3, gravity_params()
        p0 = separated_positions(rng, 3)[None]
        force = lambda p, v: ref_gravity_force(p[0], np.ones(3), 60.0)[None]
        action = None
    else:
        spec, params = PENDULUM, pendulum_params()
        p0 = rng.uniform(-np.pi, np.pi, size=(1, 1, 1))
        u = rng.uniform(-2, 2, size=1)
        force = lambda p, v: ref_pendulum_force(p, u[:, None, None], 10.0, 1.0)
        action = u
    v0 = rng.normal(size=p0.shape)

    s1 = physics.euler_step(spec, state(p0, v0), params, action=action)
    h = spec.dt / spec.substeps
    p_ref, v_ref, sub_vs = hand_substep_loop(p0, v0, h, spec.substeps, force)
    np.testing.assert_allclose(s1.p.data, p_ref, rtol=1e-10)
    np.testing.assert_allclose(s1.v.data, v_ref, rtol=1e-10)
    # semi-implicit order: the full-step displacement is h times the sum of
    # the *updated* sub-step velocities
    np.testing.assert_allclose(s1.p.data - p0, h * np.sum(sub_vs, axis=0), rtol=1e-10)


def test_rollout_single_step_equals_euler_step():
    rng = np.random.default_rng(12)
    p0 = separated_positions(rng, 2)[None]
    v0 = rng.normal(size=(1, 2, 2))
    one = physics.rollout(SPRING2, state(p0, v0), spring_params(), steps=1)
    step = physics.euler_step(SPRING2, state(p0, v0), spring_params())
    assert len(one) == 1
    np.testing.assert_allclose(one[0].p.data, step.p.data, rtol=0)
    np.testing.assert_allclose(one[0].v.data, step.v.data, rtol=0)


def test_gravity_momentum_conserved_over_extrapolation_horizon():
    rng = np.random.default_rng(13)
    p0 = np.array([[[10.0, 10.0], [24.0, 12.0], [16.0, 24.0]]])
    v0 = rng.uniform(0.1, 0.9, size=(1, 3, 2))  # nonzero net momentum
    states = physics.rollout(GRAVITY3, state(p0, v0), gravity_params(), steps=27)
    total0 = v0.sum(axis=1)  # equal unit masses
    for s in states:
        total = s.v.data.sum(axis=1)
        assert np.linalg.norm(total - total0) <= 1e-5 * np.linalg.norm(total0)


def test_pendulum_hanging_equilibrium_is_fixed():
    theta0 = np.full((1, 1, 1), np.pi)
    actions = np.zeros((20, 1))
    states = physics.rollout(
        PENDULUM, state(theta0, np.zeros_like(theta0)), pendulum_params(), steps=20, actions=actions
    )
    for s in states:
        np.testing.assert_allclose(s.p.data, np.pi, atol=1e-12)
        np.testing.assert_allclose(s.v.data, 0.0, atol=1e-12)


# --- walls ------------------------------------------------------------------

def test_reflect_walls_examples():
    s = state([[[-1.0, 5.0]]], [[[-2.0, 0.0]]])
    out = physics.reflect_walls(s, (0.0, 32.0))
    np.testing.assert_allclose(out.p.data, [[[1.0, 5.0]]], rtol=0)
    np.testing.assert_allclose(out.v.data, [[[2.0, 0.0]]], rtol=0)

    inside = state([[[3.0, 30.0]]], [[[1.0, -1.0]]])
    out = physics.reflect_walls(inside, (0.0, 32.0))
    np.testing.assert_allclose(out.p.data, inside.p.data, rtol=0)
    np.testing.assert_allclose(out.v.data, inside.v.data, rtol=0)

    # idempotent once inside
    once = physics.reflect_walls(s, (0.0, 32.0))
    twice = physics.reflect_walls(once, (0.0, 32.0))
    np.testing.assert_allclose(twice.p.data, once.p.data, rtol=0)
    np.testing.assert_allclose(twice.v.data, once.v.data, rtol=0)


def test_bounce_rollout_conserves_speed_and_stays_in_box():
    rng = np.random.default_rng(14)
    p0 = rng.uniform(5, 27, size=(2, 2, 2))
    v0 = rng.uniform(-2, 2, size=(2, 2, 2))
    states = physics.rollout(BOUNCE2, state(p0, v0), PhysParams(), steps=50)
    speed0 = np.linalg.norm(v0, axis=-1)
    for s in states:
        np.testing.assert_allclose(np.linalg.norm(s.v.data, axis=-1), speed0, rtol=1e-12)
        assert np.all(s.p.data >= 0.0) and np.all(s.p.data <= 32.0)


# --- invariance properties --------------------------------------------------

@settings(deadline=None, max_examples=25)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_forces_are_translation_invariant(cx, cy):
    rng = np.random.default_rng(15)
    shift = np.array([cx, cy])
    p = separated_positions(rng, 3)
    v = rng.normal(size=(1, 3, 2))
    for spec, params in [(GRAVITY3, gravity_params())]:
        f0 = physics.compute_force(spec, state(p[None], v), params).data
        f1 = physics.compute_force(spec, state((p + shift)[None], v), params).data
        np.testing.assert_allclose(f1, f0, rtol=1e-9, atol=1e-12)
    spec2 = SPRING2
    f0 = physics.compute_force(spec2, state(p[None, :2], v[:, :2]), spring_params()).data
    f1 = physics.compute_force(spec2, state((p[:2] + shift)[None], v[:, :2]), spring_params()).data
    np.testing.assert_allclose(f1, f0, rtol=1e-9, atol=1e-12)


def test_rollout_is_permutation_equivariant():
    rng = np.random.default_rng(16)
    p0 = separated_positions(rng, 3)[None]
    v0 = rng.normal(size=(1, 3, 2))
    masses = np.array([1.0, 1.5, 0.75])

    def run(perm):
        params = PhysParams.for_system(GRAVITY3, g=60.0, m=1.0)
        params.m.data[:] = masses[perm]
        states = physics.rollout(GRAVITY3, state(p0[:, perm], v0[:, perm]), params, steps=5)
        return states[-1].p.data, states[-1].v.data

    base_p, base_v = run(np.arange(3))
    for perm in itertools.permutations(range(3)):
        perm = np.array(perm)
        pp, pv = run(perm)
        np.testing.assert_allclose(pp, base_p[:, perm], rtol=1e-10)
        np.testing.assert_allclose(pv, base_v[:, perm], rtol=1e-10)


# --- differentiability ------------------------------------------------------

def test_gradient_of_step_wrt_spring_constant():
    rng = np.random.default_rng(17)
    p0 = separated_positions(rng, 2)[None]
    v0 = rng.normal(size=(1, 2, 2))
    # a weighted readout: the plain sum of positions is conserved under the
    # internal spring force, so its k-gradient would be degenerate zero
    w = dc.Tensor(rng.normal(size=(1, 2, 2)))

    def fn(k, l):
        out = physics.euler_step(SPRING2, state(p0, v0), PhysParams(k=k, l=l))
        return (out.p * w).sum()

    worst = dc.grad_check(fn, [np.asarray(4.0), np.asarray(6.0)])
    assert worst < 1e-4


@pytest.mark.parametrize("system", ["spring", "gravity-g", "gravity-m", "pendulum"])
def test_parameter_gradients_on_random_states(system):
    rng = np.random.default_rng(18)
    for _ in range(10):
        if system == "spring":
            p0 = separated_positions(rng, 2)[None]
            v0 = rng.normal(size=(1, 2, 2))
            w = dc.Tensor(rng.normal(size=(1, 2, 2)))

            def fn(k, l):
                states = physics.rollout(SPRING2, state(p0, v0), PhysParams(k=k, l=l), steps=2)
                return (states[-1].p * w).sum()

            inputs = [np.asarray(4.0), np.asarray(6.0)]
        elif system.startswith("gravity"):
            p0 = separated_positions(rng, 3, min_sep=8.0)[None]
            v0 = rng.normal(size=(1, 3, 2)) * 0.5
            w = dc.Tensor(rng.normal(size=(1, 3, 2)))

            if system == "gravity-g":
                def fn(g):
                    params = PhysParams(g=g, m=dc.Tensor(np.ones(3)))
                    states = physics.rollout(GRAVITY3, state(p0, v0), params, steps=2)
                    return (states[-1].p * w).sum()

                inputs = [np.asarray(60.0)]
            else:
                def fn(m):
                    params = PhysParams(g=dc.Tensor(np.asarray(60.0)), m=m)
                    states = physics.rollout(GRAVITY3, state(p0, v0), params, steps=2)
                    return (states[-1].p * w).sum()

                inputs = [np.ones(3)]
        else:
            p0 = rng.uniform(-np.pi, np.pi, size=(1, 1, 1))
            v0 = rng.uniform(-6, 6, size=(1, 1, 1))
            actions = rng.uniform(-2, 2, size=(2, 1))

            def fn(g, a):
                params = PhysParams(g=g, a=a)
                states = physics.rollout(PENDULUM, state(p0, v0), params, steps=2, actions=actions)
                return states[-1].p.sum()

            inputs = [np.asarray(10.0), np.asarray(1.0)]
        assert dc.grad_check(fn, inputs) < 1e-4


def test_state_gradients_pass_through_a_reflection():
    # one object driven firmly through the left wall mid-step; every sub-step
    # position stays far from the walls relative to the probe step, so the
    # finite-difference probes never straddle the reflection kink
    spec = SystemSpec(SystemKind.BOUNCE, n_objects=1, dim=2, dt=1.0, bounds=(0.0, 32.0))
    p0 = np.array([[[2.0, 15.0]]])
    v0 = np.array([[[-9.7, 1.0]]])

    def fn(p, v):
        out = physics.euler_step(spec, StateBatch(p, v), PhysParams())
        return (out.p + out.v).sum()

    assert dc.grad_check(fn, [p0, v0]) < 1e-4
    # and the bounce actually happened
    with dc.no_grad():
        out = physics.euler_step(spec, state(p0, v0), PhysParams())
    assert out.v.data[0, 0, 0] > 0


# --- validation -------------------------------------------------------------

def test_action_presence_is_enforced():
    s = state(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        physics.compute_force(PENDULUM, s, pendulum_params())
    s2 = state(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        physics.compute_force(SPRING2, s2, spring_params(), action=np.zeros(1))


def test_param_set_validation():
    with pytest.raises(ValueError):
        PhysParams.for_system(GRAVITY3, trainable=("g", "m"), g=60.0, m=1.0)
    with pytest.raises(ValueError):
        PhysParams.for_system(SPRING2, k=4.0)  # missing l
    with pytest.raises(ValueError):
        PhysParams.for_system(SPRING2, k=4.0, l=6.0, g=60.0)  # g inactive
    with pytest.raises(ValueError):
        physics.compute_force(
            SPRING2, state(np.zeros((1, 2, 2)), np.zeros((1, 2, 2))), gravity_params()
        )


def test_spec_validation():
    with pytest.raises(ValueError):
        SystemSpec(SystemKind.SPRING, n_objects=2, dim=1, dt=0.3)
    with pytest.raises(ValueError):
        SystemSpec(SystemKind.PENDULUM, n_objects=1, dim=1, dt=0.05, actuated=False)
    with pytest.raises(ValueError):
        SystemSpec(SystemKind.BOUNCE, n_objects=2, dim=2, dt=1.0)  # no bounds
    with pytest.raises(ValueError):
        SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3, substeps=0)
    with pytest.raises(ValueError):
        SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=-0.1)


def test_rollout_validation():
    s = state(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        physics.rollout(PENDULUM, s, pendulum_params(), steps=0, actions=np.zeros((0, 1)))
    with pytest.raises(ValueError):
        physics.rollout(PENDULUM, s, pendulum_params(), steps=3, actions=np.zeros((2, 1)))
    rng = np.random.default_rng(19)
    p0 = separated_positions(rng, 2)[None]
    with pytest.raises(ValueError):
        physics.rollout(SPRING2, state(p0, np.zeros((1, 2, 2))), spring_params(), steps=2,
                        actions=np.zeros((2, 1)))


def test_state_batch_shape_validation():
    with pytest.raises(ValueError):
        StateBatch.from_arrays(np.zeros((1, 2, 2)), np.zeros((1, 2, 1)))
    with pytest.raises(ValueError):
        StateBatch.from_arrays(np.zeros((2, 2)), np.zeros((2, 2)))
