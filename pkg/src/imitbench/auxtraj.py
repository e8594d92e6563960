"""Boundary-anchored continuous-time position trajectories.

Each demonstration i gets a curve rho_i(tau) on tau in [0, D] (D = horizon
times sample time, in seconds) that interpolates the demonstration's
endpoint positions and velocities for *any* residual network output:

    rho(tau) = A(tau) q0 + B(tau) qT + C(tau) qd0 - E(tau) qdT
               + tau^2 (D - tau)^2 psi(tau)

with the cubic blends A, B, C, E pinned so rho(0) = q0, rho(D) = qT,
rho'(0) = qd0, rho'(D) = qdT, and a quartic envelope that zeroes the
residual's value and slope at both ends.  Velocities are extracted by a
central difference with step ``delta`` and actions by a forward difference
of velocities, which makes the velocity row of the discrete dynamics exact
by construction (the position row is only approximate; see
``position_row_residual``).

Residual networks come in two modes: ``joint`` (one net per joint
dimension, conditioned on normalized time, the start end-effector pose,
and task features, shared across demonstrations) and ``independent`` (a
small net per demonstration per dimension, conditioned on normalized time
only).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tape
from .arm import ArmSpec, TrajMeta, Trajectory, fk, task_features
from .nn import Mlp, forward_tape, init_mlp, mlp_forward

MODES = ("joint", "independent")


@dataclass
class Anchors:
    """Per-demonstration boundary data read from the demonstration itself."""

    q0: np.ndarray
    qd0: np.ndarray
    qT: np.ndarray
    qdT: np.ndarray
    duration: float
    index: int = 0
    psi_context: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")


def anchors_from_trajectory(traj: Trajectory, arm: ArmSpec, index: int = 0) -> Anchors:
    ctx = np.concatenate([fk(arm, traj.qs[0]), task_features(traj.meta)])
    return Anchors(
        q0=traj.qs[0].copy(),
        qd0=traj.qds[0].copy(),
        qT=traj.qs[-1].copy(),
        qdT=traj.qds[-1].copy(),
        duration=traj.horizon * traj.ts,
        index=index,
        psi_context=ctx,
    )


def _blend_weights(duration: float, tau: np.ndarray):
    """Cubic blend coefficients (A, B, C, E) and the quartic envelope."""
    D = duration
    u = tau
    w = u * (D - u) * (D - 2.0 * u) / D**3
    A = (D - u) / D + w
    B = u / D - w
    C = u * (D - u) ** 2 / D**2
    E = u**2 * (D - u) / D**2
    env = (u * (D - u)) ** 2
    return A, B, C, E, env


def _anchor_blend(anchors: Anchors, tau: np.ndarray) -> np.ndarray:
    A, B, C, E, _ = _blend_weights(anchors.duration, tau)
    return (
        A[:, None] * anchors.q0
        + B[:, None] * anchors.qT
        + C[:, None] * anchors.qd0
        - E[:, None] * anchors.qdT
    )


def _blend_derivative(anchors: Anchors, tau: np.ndarray) -> np.ndarray:
    """Analytic d/dtau of the blend part (residual part excluded)."""
    D = anchors.duration
    u = tau
    wp = (D * D - 6.0 * D * u + 6.0 * u * u) / D**3
    Ap = -1.0 / D + wp
    Bp = 1.0 / D - wp
    Cp = (D - u) * (D - 3.0 * u) / D**2
    Ep = u * (2.0 * D - 3.0 * u) / D**2
    return (
        Ap[:, None] * anchors.q0
        + Bp[:, None] * anchors.qT
        + Cp[:, None] * anchors.qd0
        - Ep[:, None] * anchors.qdT
    )


@dataclass
class AuxTrajectoryModel:
    """Residual networks plus the finite-difference step.

    ``nets`` holds d networks in joint mode and n_demos * d networks in
    independent mode (demo-major order).  Anchors are never stored here;
    they are read from each demonstration.
    """

    mode: str
    nets: list
    d: int
    delta: float
    n_demos: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        expected = self.d if self.mode == "joint" else self.n_demos * self.d
        if len(self.nets) != expected:
            raise ValueError(f"{self.mode} mode needs {expected} nets, got {len(self.nets)}")

    def demo_nets(self, index: int) -> list:
        if self.mode == "joint":
            return self.nets
        return self.nets[index * self.d : (index + 1) * self.d]

    def param_arrays(self) -> list:
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def with_params(self, arrays: list) -> "AuxTrajectoryModel":
        nets = []
        k = 0
        for net in self.nets:
            n = 2 * len(net.weights)
            nets.append(net.with_params(arrays[k : k + n]))
            k += n
        return AuxTrajectoryModel(
            mode=self.mode, nets=nets, d=self.d, delta=self.delta, n_demos=self.n_demos
        )


def make_aux_model(
    mode: str,
    d: int,
    rng: np.random.Generator,
    ts: float,
    n_demos: int = 0,
    context_dim: int = 0,
    hidden=None,
    delta: Optional[float] = None,
) -> AuxTrajectoryModel:
    """Fresh residual networks; ``context_dim`` = len(fk pose + features).

    Default hidden sizes: (256, 128) for joint mode, (16, 8) for
    independent mode, tanh activations throughout.  ``delta`` defaults to a
    tenth of the sample time.
    """
    if delta is None:
        delta = ts / 10.0
    if mode == "joint":
        sizes = hidden or (256, 128)
        nets = [init_mlp([1 + context_dim, *sizes, 1], "tanh", rng) for _ in range(d)]
        return AuxTrajectoryModel(mode="joint", nets=nets, d=d, delta=delta)
    sizes = hidden or (16, 8)
    nets = [init_mlp([1, *sizes, 1], "tanh", rng) for _ in range(n_demos * d)]
    return AuxTrajectoryModel(mode="independent", nets=nets, d=d, delta=delta, n_demos=n_demos)


def _psi_values(model: AuxTrajectoryModel, anchors: Anchors, tau: np.ndarray) -> np.ndarray:
    u = (tau / anchors.duration)[:, None]
    if model.mode == "joint":
        ctx = np.broadcast_to(anchors.psi_context, (tau.size, anchors.psi_context.size))
        x = np.concatenate([u, ctx], axis=1)
    else:
        x = u
    cols = [mlp_forward(net, x) for net in model.demo_nets(anchors.index)]
    return np.concatenate(cols, axis=1)


def anchored_position(model: AuxTrajectoryModel, anchors: Anchors, tau) -> np.ndarray:
    """rho(tau); scalar tau gives a (d,) vector, array tau a (K, d) matrix.

    tau may sit slightly outside [0, D]: the polynomial blends extend and
    the residual nets evaluate anywhere, which the endpoint central
    differences rely on.
    """
    scalar = np.ndim(tau) == 0
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    _, _, _, _, env = _blend_weights(anchors.duration, tau_arr)
    out = _anchor_blend(anchors, tau_arr) + env[:, None] * _psi_values(model, anchors, tau_arr)
    return out[0] if scalar else out


def sample_aux_state(model: AuxTrajectoryModel, anchors: Anchors, t: int, ts: float):
    """(position, velocity) at step t; velocity by central difference."""
    tau = t * ts
    dlt = model.delta
    pts = anchored_position(model, anchors, np.array([tau, tau + dlt, tau - dlt]))
    return pts[0], (pts[1] - pts[2]) / (2.0 * dlt)


def sample_aux_action(model: AuxTrajectoryModel, anchors: Anchors, t: int, ts: float) -> np.ndarray:
    """Forward difference of sampled velocities: exactly the acceleration
    that reproduces the velocity row of the dynamics between steps t, t+1."""
    _, qd_t = sample_aux_state(model, anchors, t, ts)
    _, qd_next = sample_aux_state(model, anchors, t + 1, ts)
    return (qd_next - qd_t) / ts


def sample_aux_trajectory(
    model: AuxTrajectoryModel,
    anchors: Anchors,
    horizon: int,
    ts: float,
    meta: Optional[TrajMeta] = None,
) -> Trajectory:
    """Materialize all sampled states and actions as a Trajectory."""
    tau = np.arange(horizon + 1) * ts
    dlt = model.delta
    center = anchored_position(model, anchors, tau)
    up = anchored_position(model, anchors, tau + dlt)
    down = anchored_position(model, anchors, tau - dlt)
    qds = (up - down) / (2.0 * dlt)
    actions = (qds[1:] - qds[:-1]) / ts
    out_meta = meta.copy() if meta is not None else TrajMeta()
    out_meta.source = "aux"
    return Trajectory(ts=ts, qs=center, qds=qds, actions=actions, meta=out_meta)


def boundary_velocity(model: AuxTrajectoryModel, anchors: Anchors, at_end: bool) -> np.ndarray:
    """Analytic endpoint derivative of rho (the envelope kills the residual
    value and slope at both ends, so only the blend derivative survives)."""
    tau = np.array([anchors.duration if at_end else 0.0])
    return _blend_derivative(anchors, tau)[0]


def position_row_residual(
    model: AuxTrajectoryModel, anchors: Anchors, horizon: int, ts: float
) -> float:
    """Max violation of q_{t+1} = q_t + ts * qd_t by the sampled trajectory.

    The sampled states satisfy the velocity row of the dynamics exactly but
    the position row only approximately; this diagnostic reports the gap
    and is never part of any training loss.
    """
    traj = sample_aux_trajectory(model, anchors, horizon, ts)
    pred = traj.qs[:-1] + ts * traj.qds[:-1]
    return float(np.abs(traj.qs[1:] - pred).max())


# ---------------------------------------------------------------------------
# graph path for training

_SHIFTS = ("c0", "c+", "c-", "n+", "n-")


@dataclass
class AuxBatch:
    """Constant factors for a mini-batch of (demo, step) sample rows.

    Rows are sorted demo-major so independent-mode nets see contiguous
    slices.  ``blend``/``env`` hold the anchor polynomial values on five
    time grids: c0 = t*ts, c+/- = t*ts +- delta (velocity at t), and
    n+/- = (t+1)*ts +- delta (velocity at t+1).
    """

    demo_index: np.ndarray
    t_index: np.ndarray
    tau_norm: dict
    blend: dict
    env: dict
    psi_ctx: np.ndarray
    group_slices: list


def _runs(sorted_idx: np.ndarray):
    """Yield (slice, value) for each contiguous run of a sorted int array."""
    start = 0
    n = sorted_idx.size
    for i in range(1, n + 1):
        if i == n or sorted_idx[i] != sorted_idx[start]:
            yield slice(start, i), int(sorted_idx[start])
            start = i


def build_aux_batch(
    model: AuxTrajectoryModel,
    anchors_list: list,
    demo_idx: np.ndarray,
    t_idx: np.ndarray,
    ts: float,
) -> AuxBatch:
    """Sort rows demo-major and precompute blends, envelopes, and inputs."""
    order = np.lexsort((t_idx, demo_idx))
    demo_idx = np.asarray(demo_idx)[order]
    t_idx = np.asarray(t_idx)[order]
    tau = t_idx * ts
    dlt = model.delta
    grids = {
        "c0": tau,
        "c+": tau + dlt,
        "c-": tau - dlt,
        "n+": tau + ts + dlt,
        "n-": tau + ts - dlt,
    }
    B = tau.size
    d = model.d
    durations = np.array([anchors_list[i].duration for i in demo_idx])
    blend = {}
    env = {}
    tau_norm = {}
    for tag, grid in grids.items():
        bl = np.empty((B, d))
        ev = np.empty((B, 1))
        for sl, demo in _runs(demo_idx):
            anc = anchors_list[demo]
            bl[sl] = _anchor_blend(anc, grid[sl])
            ev[sl, 0] = _blend_weights(anc.duration, grid[sl])[4]
        blend[tag] = bl
        env[tag] = ev
        tau_norm[tag] = (grid / durations)[:, None]
    if model.mode == "joint":
        ctx_dim = anchors_list[0].psi_context.size
        psi_ctx = np.empty((B, ctx_dim))
        for sl, demo in _runs(demo_idx):
            psi_ctx[sl] = anchors_list[demo].psi_context
    else:
        psi_ctx = np.zeros((B, 0))
    group_slices = list(_runs(demo_idx))
    return AuxBatch(
        demo_index=demo_idx,
        t_index=t_idx,
        tau_norm=tau_norm,
        blend=blend,
        env=env,
        psi_ctx=psi_ctx,
        group_slices=group_slices,
    )


def _psi_graph(
    model: AuxTrajectoryModel, ptensors_per_net: list, batch: AuxBatch, tag: str
) -> tape.Tensor:
    """[B, d] residual values for one shifted grid, on the graph."""
    u = batch.tau_norm[tag]
    if model.mode == "joint":
        x = tape.const(np.concatenate([u, batch.psi_ctx], axis=1))
        cols = [
            forward_tape(ptensors_per_net[j], model.nets[j].activation, x)
            for j in range(model.d)
        ]
        return tape.concat(cols, axis=-1)
    pieces = []
    for sl, demo in batch.group_slices:
        x = tape.const(u[sl])
        cols = []
        for j in range(model.d):
            net_i = demo * model.d + j
            cols.append(forward_tape(ptensors_per_net[net_i], model.nets[net_i].activation, x))
        pieces.append(tape.concat(cols, axis=-1))
    return pieces[0] if len(pieces) == 1 else tape.concat(pieces, axis=0)


def aux_graph_samples(
    model: AuxTrajectoryModel, ptensors_per_net: list, batch: AuxBatch, ts: float
):
    """Graph tensors (position, velocity, action), each [B, d], for the batch.

    ``ptensors_per_net`` holds one parameter-tensor list per residual net,
    ordered as ``model.nets``.
    """

    def rho(tag: str) -> tape.Tensor:
        psi = _psi_graph(model, ptensors_per_net, batch, tag)
        return tape.const(batch.blend[tag]) + tape.const(batch.env[tag]) * psi

    q = rho("c0")
    qd = (rho("c+") - rho("c-")) * (1.0 / (2.0 * model.delta))
    qd_next = (rho("n+") - rho("n-")) * (1.0 / (2.0 * model.delta))
    action = (qd_next - qd) * (1.0 / ts)
    return q, qd, action


# ---------------------------------------------------------------------------
# persistence

AUX_SCHEMA = 1


def save_aux_model(path, model: AuxTrajectoryModel) -> None:
    from .checkpoint import save_checkpoint

    manifest = {
        "schema": AUX_SCHEMA,
        "class": "aux",
        "mode": model.mode,
        "d": model.d,
        "delta": model.delta,
        "n_demos": model.n_demos,
    }
    nets = {f"psi{i}": net for i, net in enumerate(model.nets)}
    save_checkpoint(path, nets, manifest)


def load_aux_model(path) -> AuxTrajectoryModel:
    from .checkpoint import CheckpointError, load_checkpoint

    nets, manifest = load_checkpoint(path)
    if manifest.get("class") != "aux" or manifest.get("schema") != AUX_SCHEMA:
        raise CheckpointError(f"{path}: not an auxiliary-trajectory checkpoint")
    ordered = [nets[f"psi{i}"] for i in range(len(nets))]
    return AuxTrajectoryModel(
        mode=manifest["mode"],
        nets=ordered,
        d=manifest["d"],
        delta=manifest["delta"],
        n_demos=manifest["n_demos"],
    )
