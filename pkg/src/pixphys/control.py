"""Vision-actuated model-predictive control of the torque-limited pendulum.

The environment integrates the *true* dynamics and renders the same
ground-truth frames the datasets are made of.  The controller never reads
the environment's state in vision mode: it estimates the angle and angular
velocity from the last few rendered frames with the trained encoder and
velocity networks, then plans a torque sequence by the cross-entropy
method, rolling candidate sequences through the physics engine under the
*learned* parameters.  Because the planner owns its copy of gravity, a
counterfactual world (gravity scaled by some factor) is handled zero-shot
by scaling the learned gravity the same way — no retraining involved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import datagen, diffcore as dc, physics, training

__all__ = [
    "CEMConfig",
    "Goal",
    "PendulumEnv",
    "EpisodeResult",
    "InfeasibleGoalWarning",
    "angdiff",
    "estimate_state",
    "cem_plan",
    "mpc_episode",
]


class InfeasibleGoalWarning(UserWarning):
    """The requested hold angle needs more torque than the limit allows."""


def angdiff(a, b):
    """Wrapped difference a - b reduced into (-pi, pi]."""
    return np.pi - np.mod(np.pi - (np.asarray(a, dtype=float) - b), 2.0 * np.pi)


@dataclass(frozen=True)
class CEMConfig:
    """Cross-entropy planner settings.

    Defaults solve the swing-up reliably on one core: 12-step lookahead,
    1000 candidate sequences per iteration, top-100 refit, 10 iterations,
    sampling from a diagonal Gaussian started at mean 0, std 1.
    """

    horizon: int = 12
    population: int = 1000
    elites: int = 100
    iterations: int = 10
    u_min: float = -2.0
    u_max: float = 2.0
    init_std: float = 1.0

    def __post_init__(self):
        if not 0 < self.elites < self.population:
            raise ValueError("need 0 < elites < population")
        if self.u_min >= self.u_max:
            raise ValueError("empty action interval")
        if min(self.horizon, self.iterations) < 1:
            raise ValueError("horizon and iterations must be >= 1")


@dataclass(frozen=True)
class Goal:
    """Target angle with zero target velocity and quadratic stage costs."""

    angle: float
    w_angle: float = 1.0
    w_vel: float = 0.1
    w_action: float = 0.001

    def stage_cost(self, theta, theta_dot, u):
        return (
            self.w_angle * angdiff(theta, self.angle) ** 2
            + self.w_vel * np.asarray(theta_dot) ** 2
            + self.w_action * np.asarray(u) ** 2
        )

    def hold_feasible(self, g: float, a: float, u_max: float) -> bool:
        """Whether the angle can be held statically within the torque limit.

        Holding balance requires the actuation torque 3*a*u to cancel the
        gravitational torque 1.5*g*sin(theta+pi), so the angle is holdable
        iff |sin(theta + pi)| <= 2*a*u_max / g.
        """
        return abs(np.sin(self.angle + np.pi)) <= 2.0 * a * u_max / g


def _pendulum_scene() -> datagen.SceneConfig:
    return datagen.scene_preset("pendulum")


class PendulumEnv:
    """True-dynamics pendulum that renders the frames the encoder sees.

    State is (theta, theta_dot) with theta on the real line (theta = pi is
    hanging down, 0 is upright).  Each ``step`` clips the torque to
    |u| <= 2, advances one frame interval of the true integrator, and
    returns the new frame quantized to the same 8-bit levels as the
    training data.  ``gravity_mult`` scales true gravity for counterfactual
    worlds; the dynamics parameters are never exposed to vision-mode
    controllers.
    """

    u_max = 2.0

    def __init__(self, gravity_mult: float = 1.0):
        self.scene = _pendulum_scene()
        self.spec = self.scene.system
        self.gravity_mult = float(gravity_mult)
        true = self.scene.true_params
        self.true_g = float(true["g"]) * self.gravity_mult
        self.true_a = float(true["a"])
        self.params = physics.PhysParams.for_system(
            self.spec, dtype=np.float64, g=self.true_g, a=self.true_a
        )
        self.dt = self.spec.dt
        self.reset()

    @property
    def state(self) -> tuple[float, float]:
        return (self._theta, self._theta_dot)

    def reset(self, theta: float = np.pi, theta_dot: float = 0.0) -> np.ndarray:
        self._theta = float(theta)
        self._theta_dot = float(theta_dot)
        return self.render()

    def step(self, u: float) -> np.ndarray:
        u = float(np.clip(u, -self.u_max, self.u_max))
        state = physics.StateBatch.from_arrays(
            np.full((1, 1, 1), self._theta), np.full((1, 1, 1), self._theta_dot)
        )
        with dc.no_grad():
            nxt = physics.euler_step(self.spec, state, self.params, np.array([u]))
        self._theta = float(nxt.p.data[0, 0, 0])
        self._theta_dot = float(nxt.v.data[0, 0, 0])
        return self.render()

    def render(self) -> np.ndarray:
        """Current frame, (H, H, 1) float32 in [0, 1] at 8-bit resolution."""
        raw = datagen.render_ground_truth_frame(
            self.scene, np.array([[self._theta]])
        )
        return datagen._quantize(raw).astype(np.float32) / 255.0


def estimate_state(frames: np.ndarray, model: training.Model) -> tuple[float, float]:
    """(theta, theta_dot) from the last ``n_frames`` rendered frames.

    ``frames``: (L, H, W, C) in [0, 1], oldest first, with L equal to the
    window the velocity network was trained on.  The encoder maps each
    frame to an angle; the velocity network unwraps the angle sequence
    internally and regresses the angular velocity at the newest frame.
    """
    frames = np.asarray(frames, dtype=np.float32)
    L = model.config.n_input
    size, C = model.scene.size, model.scene.channels
    if frames.shape != (L, size, size, C):
        raise ValueError(
            f"expected frames shaped {(L, size, size, C)}, got {frames.shape}"
        )
    with dc.no_grad():
        coords = model.encode(dc.Tensor(frames))  # (L, N, 1)
        vel = model.velocity(coords.reshape(1, L, model.n_slots, 1))
    return float(coords.data[L - 1, 0, 0]), float(vel.data[0, 0, 0])


def _pendulum_dynamics(
    spec: physics.SystemSpec, params: physics.PhysParams
) -> Callable[[tuple[float, float], np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Batch rollout (theta_0, theta_dot_0) under torque rows (T, P)."""

    def dynamics(state, u_rows):
        T, P = u_rows.shape
        p0 = np.full((P, 1, 1), state[0], dtype=np.float64)
        v0 = np.full((P, 1, 1), state[1], dtype=np.float64)
        with dc.no_grad():
            states = physics.rollout(
                spec, physics.StateBatch.from_arrays(p0, v0), params, T,
                actions=u_rows,
            )
        theta = np.stack([s.p.data[:, 0, 0] for s in states])
        theta_dot = np.stack([s.v.data[:, 0, 0] for s in states])
        return theta, theta_dot

    return dynamics


def cem_plan(
    state: tuple[float, float],
    params: physics.PhysParams,
    goal: Goal,
    cfg: Optional[CEMConfig] = None,
    rng=None,
    dynamics=None,
    return_info: bool = False,
):
    """Plan a torque sequence (horizon,) from ``state`` toward ``goal``.

    Samples action sequences from a diagonal Gaussian, scores each by the
    summed stage cost over a rollout of the planning model, refits the
    Gaussian to the lowest-cost elite fraction, and repeats; the final mean
    sequence is returned.  ``params`` are the planner's physics parameters
    (the learned ones, gravity pre-scaled for counterfactual worlds).
    ``dynamics`` may replace the pendulum rollout with any callable
    ``(state, u_rows (T, P)) -> (theta (T, P), theta_dot (T, P))``.

    With ``return_info`` also returns {"elite_costs": per-iteration mean
    elite cost, "first_cost": the full population's best cost at start}.
    """
    cfg = cfg or CEMConfig()
    rng = np.random.default_rng(rng)
    if dynamics is None:
        dynamics = _pendulum_dynamics(_pendulum_scene().system, params)
    mean = np.zeros(cfg.horizon)
    std = np.full(cfg.horizon, cfg.init_std)
    elite_costs = []
    for _ in range(cfg.iterations):
        u = rng.standard_normal((cfg.population, cfg.horizon)) * std + mean
        np.clip(u, cfg.u_min, cfg.u_max, out=u)
        theta, theta_dot = dynamics(state, u.T)
        cost = goal.stage_cost(theta, theta_dot, u.T).sum(axis=0)
        if not np.all(np.isfinite(cost)):
            raise dc.NonFiniteError("non-finite cost in planner rollout")
        elite = np.argpartition(cost, cfg.elites - 1)[: cfg.elites]
        mean = u[elite].mean(axis=0)
        std = u[elite].std(axis=0) + 1e-6
        elite_costs.append(float(cost[elite].mean()))
    if return_info:
        return mean, {"elite_costs": elite_costs}
    return mean


@dataclass
class EpisodeResult:
    """One controlled run: true states, torques, stage costs, success flag.

    ``theta``/``theta_dot`` have ``steps + 1`` entries (initial state
    included); ``u``/``cost`` have ``steps``.  ``theta_est``/
    ``theta_dot_est`` hold the controller's own state estimates (empty in
    oracle mode).  Success means the true state stayed within 0.2 rad of
    the goal angle with |theta_dot| < 0.5 over the final 10 steps.
    """

    goal_angle: float
    theta: np.ndarray
    theta_dot: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    success: bool
    theta_est: np.ndarray
    theta_dot_est: np.ndarray
    frames: list = field(default_factory=list, repr=False)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "theta", "theta_dot", "u", "cost"])
            for t in range(len(self.u)):
                w.writerow(
                    [t, f"{self.theta[t]:.6f}", f"{self.theta_dot[t]:.6f}",
                     f"{self.u[t]:.6f}", f"{self.cost[t]:.6f}"]
                )
            w.writerow([len(self.u), f"{self.theta[-1]:.6f}",
                        f"{self.theta_dot[-1]:.6f}", "", ""])


SUCCESS_ANGLE = 0.2
SUCCESS_VEL = 0.5
SUCCESS_WINDOW = 10


def mpc_episode(
    env: PendulumEnv,
    model=None,
    goal: Goal = Goal(angle=0.0),
    steps: int = 100,
    gravity_mult: Optional[float] = None,
    goal_image: Optional[np.ndarray] = None,
    cem: Optional[CEMConfig] = None,
    seed: int = 0,
    oracle: bool = False,
    reset: bool = True,
    keep_frames: bool = True,
) -> EpisodeResult:
    """Run closed-loop MPC for ``steps`` control intervals.

    ``model`` is a trained pendulum model or a checkpoint path; in vision
    mode every step renders a frame, estimates the state from the last
    ``n_input`` frames, and plans afresh.  ``oracle=True`` bypasses vision
    and plans with the environment's true parameters and state (an upper
    bound on what the learned model can achieve).  ``gravity_mult`` scales
    the planner's gravity; by default it follows ``env.gravity_mult``, so a
    counterfactual world is matched by counterfactual planning.  A
    ``goal_image`` replaces the goal angle with the encoder's estimate on
    that frame.
    """
    if isinstance(model, (str, bytes)) or hasattr(model, "__fspath__"):
        model, _, _ = training.load_checkpoint(model)
    if model is not None and model.scene.system.kind != physics.SystemKind.PENDULUM:
        raise ValueError(
            f"checkpoint holds a {model.scene.system.kind.value!r} model; "
            "mpc_episode drives the pendulum"
        )
    if not oracle and model is None:
        raise ValueError("vision mode needs a trained model or checkpoint")
    cem = cem or CEMConfig()
    if gravity_mult is None:
        gravity_mult = env.gravity_mult

    if goal_image is not None:
        if model is None:
            raise ValueError("a goal image needs the trained encoder")
        frame = np.asarray(goal_image, dtype=np.float32)
        with dc.no_grad():
            coords = model.encode(dc.Tensor(frame[None]))
        goal = replace(goal, angle=float(coords.data[0, 0, 0]))

    if not goal.hold_feasible(env.true_g, env.true_a, env.u_max):
        warnings.warn(
            f"goal angle {goal.angle:.3f} rad cannot be held statically: "
            f"|sin(theta+pi)|={abs(np.sin(goal.angle + np.pi)):.3f} exceeds "
            f"2*a*u_max/g={2.0 * env.true_a * env.u_max / env.true_g:.3f}",
            InfeasibleGoalWarning,
            stacklevel=2,
        )

    if oracle:
        planner_params = physics.PhysParams.for_system(
            env.spec, dtype=np.float64, g=env.true_g, a=env.true_a
        )
    else:
        learned_g = float(model.phys.g.data)
        learned_a = float(model.phys.a.data)
        planner_params = physics.PhysParams.for_system(
            env.spec, dtype=np.float64,
            g=learned_g * gravity_mult, a=learned_a,
        )
    dynamics = _pendulum_dynamics(env.spec, planner_params)
    rng = np.random.default_rng(seed)

    frame = env.reset() if reset else env.render()
    window = [frame] * (model.config.n_input if model is not None else 1)
    theta = [env.state[0]]
    theta_dot = [env.state[1]]
    us, costs, est_t, est_v, frames = [], [], [], [], []
    if keep_frames:
        frames.append(frame)

    for _ in range(steps):
        if oracle:
            state_hat = env.state
        else:
            state_hat = estimate_state(np.stack(window), model)
            est_t.append(state_hat[0])
            est_v.append(state_hat[1])
        plan = cem_plan(state_hat, planner_params, goal, cem, rng=rng,
                        dynamics=dynamics)
        u = float(plan[0])
        costs.append(float(goal.stage_cost(env.state[0], env.state[1], u)))
        frame = env.step(u)
        us.append(u)
        theta.append(env.state[0])
        theta_dot.append(env.state[1])
        if model is not None:
            window = window[1:] + [frame]
        if keep_frames:
            frames.append(frame)

    th = np.asarray(theta)
    om = np.asarray(theta_dot)
    tail = slice(-SUCCESS_WINDOW, None)
    success = bool(
        np.all(np.abs(angdiff(th[tail], goal.angle)) < SUCCESS_ANGLE)
        and np.all(np.abs(om[tail]) < SUCCESS_VEL)
    )
    return EpisodeResult(
        goal_angle=float(goal.angle),
        theta=th,
        theta_dot=om,
        u=np.asarray(us),
        cost=np.asarray(costs),
        success=success,
        theta_est=np.asarray(est_t),
        theta_dot_est=np.asarray(est_v),
        frames=frames,
    )
