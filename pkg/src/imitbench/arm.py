"""Planar n-link arm: kinematics, analytic Jacobians, and the discrete
acceleration-driven dynamics used everywhere in the workbench.

Joint angles are absolute-sum: link k points along sum(q[:k+1]).  The
dynamics is the exact semi-explicit Euler pair

    q+  = q  + qd * ts
    qd+ = qd + a * ts

so the one-step state difference between two actions from the same state is
exactly ts * ||a - a'|| in the l2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


class NonFiniteAction(FloatingPointError):
    """Policy produced nan/inf; carries the rollout step index when known."""

    def __init__(self, step: int = -1):
        msg = "non-finite action" if step < 0 else f"non-finite action at rollout step {step}"
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class ArmSpec:
    link_lengths: np.ndarray

    def __post_init__(self):
        lengths = np.asarray(self.link_lengths, dtype=np.float64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise ValueError("link_lengths must be a non-empty 1-d array")
        if not np.all(lengths > 0.0):
            raise ValueError("all link lengths must be positive")
        object.__setattr__(self, "link_lengths", lengths)

    @property
    def d(self) -> int:
        return self.link_lengths.size

    @property
    def reach(self) -> float:
        return float(self.link_lengths.sum())


def default_arm() -> ArmSpec:
    """The two-link desk-scale testbed arm (1.0 m and 0.8 m links)."""
    return ArmSpec(link_lengths=np.array([1.0, 0.8]))


@dataclass
class State:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qd = np.asarray(self.qd, dtype=np.float64)
        if self.q.shape != self.qd.shape or self.q.ndim != 1:
            raise ValueError(f"q {self.q.shape} and qd {self.qd.shape} must be equal-length vectors")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])

    def copy(self) -> "State":
        return State(self.q.copy(), self.qd.copy())


@dataclass
class TrajMeta:
    """Task descriptors recorded with each trajectory."""

    start_ee_pose: np.ndarray = field(default_factory=lambda: np.zeros(3))
    goal_ee_pose: np.ndarray = field(default_factory=lambda: np.zeros(3))
    features: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traj_id: int = -1
    source: str = ""

    def __post_init__(self):
        self.start_ee_pose = np.asarray(self.start_ee_pose, dtype=np.float64)
        self.goal_ee_pose = np.asarray(self.goal_ee_pose, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)

    def copy(self) -> "TrajMeta":
        return TrajMeta(
            start_ee_pose=self.start_ee_pose.copy(),
            goal_ee_pose=self.goal_ee_pose.copy(),
            features=self.features.copy(),
            traj_id=self.traj_id,
            source=self.source,
        )


def task_features(meta: TrajMeta) -> np.ndarray:
    """Policy/task conditioning vector: goal pose plus any extra features."""
    return np.concatenate([meta.goal_ee_pose, meta.features])


@dataclass
class Trajectory:
    """Sampled states (and optionally actions) at a fixed sample time.

    ``qs`` and ``qds`` have T+1 rows; ``actions`` has T rows when present.
    """

    ts: float
    qs: np.ndarray
    qds: np.ndarray
    actions: Optional[np.ndarray] = None
    meta: TrajMeta = field(default_factory=TrajMeta)

    def __post_init__(self):
        self.qs = np.asarray(self.qs, dtype=np.float64)
        self.qds = np.asarray(self.qds, dtype=np.float64)
        if self.qs.shape != self.qds.shape or self.qs.ndim != 2:
            raise ValueError("qs and qds must be equal-shape [T+1, d] arrays")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64)
            if self.actions.shape != (self.qs.shape[0] - 1, self.qs.shape[1]):
                raise ValueError(
                    f"actions shape {self.actions.shape} does not match {self.qs.shape[0] - 1} steps"
                )
        if self.ts <= 0.0:
            raise ValueError("sample time must be positive")

    @property
    def horizon(self) -> int:
        return self.qs.shape[0] - 1

    @property
    def d(self) -> int:
        return self.qs.shape[1]

    def state(self, t: int) -> State:
        return State(self.qs[t].copy(), self.qds[t].copy())

    def states_matrix(self) -> np.ndarray:
        """[T+1, 2d] matrix of concatenated (q, qd) rows."""
        return np.concatenate([self.qs, self.qds], axis=1)

    def copy(self) -> "Trajectory":
        return Trajectory(
            ts=self.ts,
            qs=self.qs.copy(),
            qds=self.qds.copy(),
            actions=None if self.actions is None else self.actions.copy(),
            meta=self.meta.copy(),
        )


def fk(spec: ArmSpec, q: np.ndarray) -> np.ndarray:
    """End-effector pose (x, y, theta) for joint angles ``q``."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (spec.d,):
        raise ValueError(f"expected {spec.d} joint angles, got shape {q.shape}")
    angles = np.cumsum(q)
    x = float(np.sum(spec.link_lengths * np.cos(angles)))
    y = float(np.sum(spec.link_lengths * np.sin(angles)))
    return np.array([x, y, angles[-1]])


def fk_position(spec: ArmSpec, q: np.ndarray) -> np.ndarray:
    return fk(spec, q)[:2]


def jacobian(spec: ArmSpec, q: np.ndarray) -> np.ndarray:
    """Analytic [2, d] position Jacobian of fk."""
    q = np.asarray(q, dtype=np.float64)
    angles = np.cumsum(q)
    ls = spec.link_lengths * np.sin(angles)
    lc = spec.link_lengths * np.cos(angles)
    # d(x)/d(q_k) = -sum_{j>=k} l_j sin(angle_j); suffix sums via reversed cumsum.
    suffix_s = np.cumsum(ls[::-1])[::-1]
    suffix_c = np.cumsum(lc[::-1])[::-1]
    return np.stack([-suffix_s, suffix_c])


def jacobian_dot_qd(spec: ArmSpec, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Curvature term (dJ/dt) qd, the acceleration of fk at zero joint accel."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    angles = np.cumsum(q)
    rates = np.cumsum(qd)
    r2 = rates * rates
    ax = -np.sum(spec.link_lengths * np.cos(angles) * r2)
    ay = -np.sum(spec.link_lengths * np.sin(angles) * r2)
    return np.array([ax, ay])


def step(state: State, action: np.ndarray, ts: float) -> State:
    """One exact step of the acceleration-driven dynamics."""
    if ts <= 0.0:
        raise ValueError("ts must be positive")
    action = np.asarray(action, dtype=np.float64)
    if not np.isfinite(action).all():
        raise NonFiniteAction()
    return State(q=state.q + state.qd * ts, qd=state.qd + action * ts)


def rollout(
    policy: Callable[[State, Optional[TrajMeta]], np.ndarray],
    s0: State,
    horizon: int,
    ts: float,
    meta: Optional[TrajMeta] = None,
) -> Trajectory:
    """Closed-loop rollout of ``policy`` for ``horizon`` steps from ``s0``."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    d = s0.q.size
    qs = np.empty((horizon + 1, d))
    qds = np.empty((horizon + 1, d))
    actions = np.empty((horizon, d))
    s = s0.copy()
    qs[0], qds[0] = s.q, s.qd
    for t in range(horizon):
        a = np.asarray(policy(s, meta), dtype=np.float64)
        if not np.isfinite(a).all():
            raise NonFiniteAction(step=t)
        actions[t] = a
        s = State(q=s.q + s.qd * ts, qd=s.qd + a * ts)
        qs[t + 1], qds[t + 1] = s.q, s.qd
    return Trajectory(ts=ts, qs=qs, qds=qds, actions=actions, meta=meta.copy() if meta else TrajMeta())


def dynamics_residual(traj: Trajectory) -> float:
    """Max per-step violation of the dynamics by (states, actions)."""
    if traj.actions is None:
        raise ValueError("trajectory has no actions to check")
    q_pred = traj.qs[:-1] + traj.qds[:-1] * traj.ts
    qd_pred = traj.qds[:-1] + traj.actions * traj.ts
    err_q = np.abs(traj.qs[1:] - q_pred).max() if traj.horizon else 0.0
    err_qd = np.abs(traj.qds[1:] - qd_pred).max() if traj.horizon else 0.0
    return float(max(err_q, err_qd))


def replay_policy(traj: Trajectory) -> Callable[[State, Optional[TrajMeta]], np.ndarray]:
    """Open-loop policy replaying a trajectory's recorded actions in order."""
    if traj.actions is None:
        raise ValueError("trajectory has no actions to replay")
    counter = {"t": 0}

    def policy(state: State, meta=None) -> np.ndarray:
        t = counter["t"]
        counter["t"] = t + 1
        return traj.actions[min(t, traj.horizon - 1)]

    return policy
