"""Scripted expert demonstrator for the planar testbed.

A two-phase state machine drives a hand-designed attractor:

* ``lifting`` - pull the end effector toward a point well above its start
  position; hand off as soon as it clears the table by the lift height.
* ``approaching`` - pull toward a standoff target that descends onto the
  goal along a fixed approach direction as the end effector closes in on
  the approach line (a radial-basis funnel of the orthogonal distance).

The attractor itself is a two-subtask weighted least-squares fusion: an
end-effector pull with soft-saturated magnitude and velocity damping, plus
a small configuration-space damper.  The machine switch makes the expert's
action a discontinuous function of state, which keeps the demonstrations
outside both learnable policy classes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .arm import (
    ArmSpec,
    State,
    TrajMeta,
    Trajectory,
    fk,
    fk_position,
    jacobian,
    jacobian_dot_qd,
    step,
)
from .datasets import Dataset
from .policies import SubtaskEval, rmp_resolve


class GenerationError(RuntimeError):
    """The task sampler rejected too many samples or ran out of attempts."""


@dataclass
class FunnelParams:
    """Standoff-funnel rule: the commanded target backs off the true goal
    by up to ``l`` along the approach direction, with the offset decaying
    as exp(-orthdist^2 / (2 sigma^2)) of the distance to the approach line."""

    v: np.ndarray
    l: float
    sigma: float
    goal: np.ndarray
    paper_rule: bool = False

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if abs(np.linalg.norm(self.v) - 1.0) > 1e-12:
            raise ValueError("approach direction must be a unit vector")
        if self.l <= 0.0 or self.sigma <= 0.0:
            raise ValueError("standoff length and funnel std must be positive")


def standoff_target(x: np.ndarray, funnel: FunnelParams) -> np.ndarray:
    """Commanded target for end-effector position ``x``.

    The default rule is goal - (1 - eta) * l * v, which interpolates from
    the full-standoff point (far from the approach line) to the goal (on
    the line).  ``paper_rule`` switches to the variant eta * goal -
    (1 - eta) * l * v, kept only for comparison: it abandons the goal
    offset far from the line instead of backing off from the goal.
    """
    x = np.asarray(x, dtype=np.float64)
    dx = funnel.goal - x
    orth = dx - funnel.v * (funnel.v @ dx)
    eta = math.exp(-(orth @ orth) / (2.0 * funnel.sigma**2))
    if funnel.paper_rule:
        return eta * funnel.goal - (1.0 - eta) * funnel.l * funnel.v
    return funnel.goal - (1.0 - eta) * funnel.l * funnel.v


@dataclass
class ExpertParams:
    table_y: float = 0.2
    lift_height: float = 0.3
    funnel_sigma: float = 0.2
    kp: float = 16.0
    kd: float = 8.0
    soft_radius: float = 0.1
    res_damping: float = 4.0
    res_weight: float = 0.05
    eps_goal: float = 0.02
    eps_vel: float = 0.05
    t_max: int = 600
    paper_funnel_rule: bool = False


@dataclass
class ExpertTask:
    start_ee: np.ndarray
    goal: np.ndarray


LIFTING = "lifting"
APPROACHING = "approaching"


def _attractor(arm: ArmSpec, state: State, target: np.ndarray, params: ExpertParams) -> np.ndarray:
    """Fused acceleration pulling the end effector toward ``target``."""
    J = jacobian(arm, state.q)
    x = fk_position(arm, state.q)
    xd = J @ state.qd
    curv = jacobian_dot_qd(arm, state.q, state.qd)
    u = target - x
    pull = params.kp * u / math.sqrt(u @ u + params.soft_radius**2) - params.kd * xd
    d = arm.d
    ee = SubtaskEval(a=pull, M=np.eye(2), J=J, curv=curv)
    damper = SubtaskEval(
        a=-params.res_damping * state.qd,
        M=params.res_weight * np.eye(d),
        J=np.eye(d),
        curv=np.zeros(d),
    )
    return rmp_resolve([ee, damper])


def expert_policy(
    state: State,
    machine: str,
    task: ExpertTask,
    arm: ArmSpec,
    params: ExpertParams,
):
    """One expert decision: (acceleration, next machine state).

    The lifting phase hands off the moment the end effector clears
    table_y + lift_height; the handoff is evaluated before computing the
    acceleration, so the returned action already follows the new phase.
    """
    ee_y = fk_position(arm, state.q)[1]
    if machine == LIFTING and ee_y >= params.table_y + params.lift_height:
        machine = APPROACHING
    if machine == LIFTING:
        target = task.start_ee + np.array([0.0, 3.0 * params.lift_height])
    else:
        funnel = FunnelParams(
            v=np.array([0.0, -1.0]),
            l=params.lift_height,
            sigma=params.funnel_sigma,
            goal=task.goal,
            paper_rule=params.paper_funnel_rule,
        )
        target = standoff_target(fk_position(arm, state.q), funnel)
    return _attractor(arm, state, target, params), machine


# ---------------------------------------------------------------------------
# task sampling


@dataclass
class TaskSampler:
    goal_center: np.ndarray = field(default_factory=lambda: np.array([1.2, 0.6]))
    goal_std: float = 0.3
    reach_margin: float = 0.15
    start_x_range: tuple = (0.4, 1.4)
    goal_clearance: float = 0.05

    def __post_init__(self):
        self.goal_center = np.asarray(self.goal_center, dtype=np.float64)


def ik_two_link(arm: ArmSpec, xy: np.ndarray) -> np.ndarray:
    """Closed-form elbow-up inverse kinematics for the two-link arm."""
    if arm.d != 2:
        raise ValueError("analytic inverse kinematics implemented for two links only")
    l1, l2 = arm.link_lengths
    x, y = xy
    r2 = x * x + y * y
    c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ValueError(f"point {xy} outside the reachable annulus")
    q2 = math.acos(c2)
    q1 = math.atan2(y, x) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    return np.array([q1, q2])


def sample_task(
    sampler: TaskSampler, arm: ArmSpec, params: ExpertParams, rng: np.random.Generator
) -> ExpertTask:
    """Draw a start point on the table and a reachable elevated goal."""
    lo = abs(arm.link_lengths[0] - arm.link_lengths[1]) + sampler.reach_margin
    hi = arm.reach - sampler.reach_margin
    for _ in range(1000):
        start_x = rng.uniform(*sampler.start_x_range)
        start = np.array([start_x, params.table_y])
        if not lo <= np.linalg.norm(start) <= hi:
            continue
        goal = sampler.goal_center + sampler.goal_std * rng.standard_normal(2)
        standoff = goal + np.array([0.0, params.lift_height])
        if (
            lo <= np.linalg.norm(goal) <= hi
            and np.linalg.norm(standoff) <= hi
            and goal[1] >= params.table_y + sampler.goal_clearance
        ):
            return ExpertTask(start_ee=start, goal=goal)
    raise GenerationError("could not sample a feasible task in 1000 draws")


# ---------------------------------------------------------------------------
# dataset generation


def _run_expert(arm: ArmSpec, params: ExpertParams, task: ExpertTask, ts: float):
    """Closed-loop run until the goal is reached at rest; None on failure."""
    q0 = ik_two_link(arm, task.start_ee)
    state = State(q=q0, qd=np.zeros(arm.d))
    machine = LIFTING
    qs = [state.q.copy()]
    qds = [state.qd.copy()]
    actions = []
    lifted = False
    for _ in range(params.t_max):
        accel, machine = expert_policy(state, machine, task, arm, params)
        actions.append(accel)
        state = step(state, accel, ts)
        qs.append(state.q.copy())
        qds.append(state.qd.copy())
        ee = fk_position(arm, state.q)
        if ee[1] >= params.table_y + params.lift_height:
            lifted = True
        if (
            np.linalg.norm(ee - task.goal) < params.eps_goal
            and np.linalg.norm(state.qd) < params.eps_vel
        ):
            break
    ee = fk_position(arm, state.q)
    if np.linalg.norm(ee - task.goal) >= params.eps_goal or not lifted:
        return None
    theta_final = fk(arm, state.q)[2]
    meta = TrajMeta(
        start_ee_pose=fk(arm, q0),
        goal_ee_pose=np.array([task.goal[0], task.goal[1], theta_final]),
        features=np.zeros(0),
        source="expert",
    )
    return Trajectory(
        ts=ts, qs=np.array(qs), qds=np.array(qds), actions=np.array(actions), meta=meta
    )


def _config_digest(arm: ArmSpec, sampler: TaskSampler, params: ExpertParams, ts: float) -> str:
    blob = json.dumps(
        {
            "link_lengths": [float(x) for x in arm.link_lengths],
            "sampler": {
                "goal_center": [float(x) for x in sampler.goal_center],
                "goal_std": sampler.goal_std,
                "reach_margin": sampler.reach_margin,
                "start_x_range": list(sampler.start_x_range),
                "goal_clearance": sampler.goal_clearance,
            },
            "expert": asdict(params),
            "ts": ts,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def generate_dataset(
    n: int,
    sampler: TaskSampler,
    arm: ArmSpec,
    params: ExpertParams,
    ts: float = 0.01,
    seed: int = 0,
) -> Dataset:
    """Generate ``n`` verified goal-reaching demonstrations.

    Each attempt runs from its own seed derived from (seed, attempt), so
    output is independent of scheduling.  A failed run (goal not reached
    within the step cap) is rejected and resampled; more than 20% rejects
    abort with a sampler-misconfiguration error.
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    trajectories = []
    attempts = 0
    rejected = 0
    max_attempts = max(2 * n, n + 10)
    while len(trajectories) < n and attempts < max_attempts:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, attempts))))
        attempts += 1
        task = sample_task(sampler, arm, params, rng)
        traj = _run_expert(arm, params, task, ts)
        if traj is None:
            rejected += 1
            continue
        traj.meta.traj_id = len(trajectories)
        trajectories.append(traj)
    if len(trajectories) < n:
        raise GenerationError(
            f"exhausted {max_attempts} attempts with only {len(trajectories)}/{n} successes"
        )
    if rejected > 0.2 * attempts:
        raise GenerationError(
            f"{rejected}/{attempts} samples rejected; task sampler looks misconfigured"
        )
    return Dataset(
        arm=arm,
        ts=ts,
        trajectories=trajectories,
        provenance={
            "generator": "scripted-expert",
            "seed": seed,
            "n": n,
            "attempts": attempts,
            "rejected": rejected,
            "config_digest": _config_digest(arm, sampler, params, ts),
        },
    )
