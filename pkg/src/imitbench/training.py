"""Training objectives and the mini-batch optimization loop.

Three methods share one loop:

* ``bc`` - regress recorded actions on recorded states.
* ``bc_noise`` - same, after augmenting the dataset with input-noise copies
  whose regression targets stay clean.
* ``code`` - collocation: jointly fit anchored auxiliary trajectories to the
  demonstrations (state term) and the policy to the auxiliary trajectory's
  own finite-difference actions (action term), weighted by ``nu``.

Batches are sampled over time steps across all demonstrations.  The learning
rate decays multiplicatively whenever the batch loss fails to improve on its
running best for ``plateau_patience`` consecutive epochs, and training stops
at ``max_epochs`` or on a plateau once the rate has reached ``lr_min``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tape
from .arm import State, Trajectory, task_features
from .auxtraj import (
    AuxTrajectoryModel,
    anchors_from_trajectory,
    aux_graph_samples,
    build_aux_batch,
)
from .datasets import Dataset
from .optim import adam_init, adam_step

METHODS = ("bc", "bc_noise", "code")


class TrainingDiverged(FloatingPointError):
    """Loss went non-finite; carries the epoch and last finite parameters."""

    def __init__(self, epoch: int, snapshot: list):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    method: str = "bc"
    nu: float = 1.0
    lr0: float = 5e-3
    weight_decay: float = 1e-10
    lr_decay: float = 0.9
    plateau_patience: int = 500
    lr_min: float = 1e-6
    max_epochs: int = 50_000
    batch_size: Optional[int] = None
    noise_sigma: float = 0.05
    noise_fraction: float = 0.2
    seed: int = 0
    decoupled_weight_decay: bool = True
    alternating_updates: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "code" and self.nu <= 0.0:
            raise ValueError("nu must be positive for collocation training")
        if not (0.0 < self.lr_min <= self.lr0):
            raise ValueError("need 0 < lr_min <= lr0")
        if not (0.0 < self.noise_fraction <= 1.0):
            raise ValueError("noise_fraction must be in (0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class TrainHistory:
    total: np.ndarray
    state_term: np.ndarray
    action_term: np.ndarray
    lr: np.ndarray
    stop_reason: str = ""

    @property
    def n_epochs(self) -> int:
        return self.total.size

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,total,state_term,action_term,lr\n")
            for e in range(self.n_epochs):
                f.write(
                    f"{e},{float(self.total[e])!r},{float(self.state_term[e])!r},"
                    f"{float(self.action_term[e])!r},{float(self.lr[e])!r}\n"
                )


def auto_batch_size(n_trajectories: int) -> int:
    return 500 if n_trajectories < 50 else 2000


# ---------------------------------------------------------------------------
# exact losses (full dataset, numeric)


def _policy_batch_eval(policy, q, qd, feats, goal) -> np.ndarray:
    """Numeric batched policy evaluation via the graph path on constants."""
    ptensors = [tape.const(p) for p in policy.param_arrays()]
    out = policy.batch_graph(
        ptensors, tape.const(q), tape.const(qd), tape.const(feats), tape.const(goal)
    )
    return out.value


def _stack_rows(trajectories, with_actions: bool):
    """Flatten (traj, step) action rows into contiguous arrays."""
    qs, qds, feats, goals, acts = [], [], [], [], []
    for traj in trajectories:
        if with_actions and traj.actions is None:
            raise ValueError(f"trajectory id={traj.meta.traj_id} has no recorded actions")
        qs.append(traj.qs[:-1])
        qds.append(traj.qds[:-1])
        f = task_features(traj.meta)
        feats.append(np.broadcast_to(f, (traj.horizon, f.size)))
        goals.append(np.broadcast_to(traj.meta.goal_ee_pose[:2], (traj.horizon, 2)))
        if with_actions:
            acts.append(traj.actions)
    return (
        np.concatenate(qs),
        np.concatenate(qds),
        np.concatenate(feats),
        np.concatenate(goals),
        np.concatenate(acts) if with_actions else None,
    )


def bc_loss(policy, trajectories) -> float:
    """Mean squared action regression error, normalized by 2 * total steps."""
    trajectories = list(trajectories)
    q, qd, feats, goal, acts = _stack_rows(trajectories, with_actions=True)
    pred = _policy_batch_eval(policy, q, qd, feats, goal)
    total_steps = sum(t.horizon for t in trajectories)
    return float(np.sum((acts - pred) ** 2) / (2.0 * total_steps))


def code_loss(policy, aux_model: AuxTrajectoryModel, dataset: Dataset, nu: float):
    """Exact collocation objective over the whole dataset.

    Returns (total, state_term, action_term).  The state term runs over all
    T_i + 1 samples per demonstration, the action term over the T_i steps,
    both normalized by 2 * sum(T_i).
    """
    from .auxtraj import sample_aux_trajectory

    if nu <= 0.0:
        raise ValueError("nu must be positive")
    total_steps = sum(t.horizon for t in dataset.trajectories)
    state_sum = 0.0
    action_sum = 0.0
    for i, traj in enumerate(dataset.trajectories):
        anchors = anchors_from_trajectory(traj, dataset.arm, index=i)
        aux = sample_aux_trajectory(aux_model, anchors, traj.horizon, dataset.ts, traj.meta)
        state_sum += float(np.sum((traj.qs - aux.qs) ** 2) + np.sum((traj.qds - aux.qds) ** 2))
        f = task_features(traj.meta)
        feats = np.broadcast_to(f, (traj.horizon, f.size))
        goals = np.broadcast_to(traj.meta.goal_ee_pose[:2], (traj.horizon, 2))
        pred = _policy_batch_eval(policy, aux.qs[:-1], aux.qds[:-1], feats, goals)
        action_sum += float(np.sum((aux.actions - pred) ** 2))
    state_term = state_sum / (2.0 * total_steps)
    action_term = action_sum / (2.0 * total_steps)
    return state_term + nu * action_term, state_term, action_term


# ---------------------------------------------------------------------------
# noise augmentation


def inject_noise(dataset: Dataset, sigma: float, fraction: float, seed: int) -> Dataset:
    """Append input-noise copies of ceil(fraction * N) seeded-chosen demos.

    Noise is i.i.d. zero-mean Gaussian on every position and velocity entry
    (the policy inputs); the regression targets stay the original actions.
    The originals are retained alongside the noisy copies.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(dataset.trajectories)
    k = math.ceil(fraction * n)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    augmented = [t.copy() for t in dataset.trajectories]
    for i in chosen:
        src = dataset.trajectories[int(i)]
        noisy = src.copy()
        noisy.qs = noisy.qs + rng.normal(0.0, sigma, size=noisy.qs.shape) if sigma > 0 else noisy.qs
        noisy.qds = (
            noisy.qds + rng.normal(0.0, sigma, size=noisy.qds.shape) if sigma > 0 else noisy.qds
        )
        noisy.meta.source = "noisy"
        augmented.append(noisy)
    prov = dict(dataset.provenance)
    prov["noise"] = {"sigma": sigma, "fraction": fraction, "seed": seed}
    return Dataset(arm=dataset.arm, ts=dataset.ts, trajectories=augmented, provenance=prov)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    policy: object
    aux_model: Optional[AuxTrajectoryModel]
    history: TrainHistory


def _per_net_tensors(models, leaves):
    """Split a flat leaf list back into per-net sublists for aux models."""
    out = []
    k = 0
    for net in models:
        n = 2 * len(net.weights)
        out.append(leaves[k : k + n])
        k += n
    return out


def train(
    dataset: Dataset,
    policy,
    config: TrainConfig,
    aux_model: Optional[AuxTrajectoryModel] = None,
) -> TrainResult:
    """Run the configured method; returns trained copies plus history.

    The optimizer updates policy parameters (and, for collocation, the
    auxiliary-trajectory parameters jointly, unless alternating updates are
    requested).  Raises TrainingDiverged on a non-finite loss with the last
    finite parameter snapshot attached.
    """
    if not dataset.trajectories:
        raise ValueError("dataset is empty")
    method = config.method
    work = dataset
    if method == "bc_noise":
        work = inject_noise(dataset, config.noise_sigma, config.noise_fraction, config.seed)

    trajs = work.trajectories
    batch_size = config.batch_size or auto_batch_size(len(trajs))
    rng = np.random.Generator(np.random.PCG64(config.seed))

    policy_params = [p.copy() for p in policy.param_arrays()]
    n_policy = len(policy_params)
    if method == "code":
        if aux_model is None:
            raise ValueError("collocation training needs an auxiliary trajectory model")
        aux_params = [p.copy() for p in aux_model.param_arrays()]
        anchors = [anchors_from_trajectory(t, work.arm, index=i) for i, t in enumerate(trajs)]
        # sampling universe: all (demo, t) state rows, t = 0 .. T_i inclusive
        demo_idx_all = np.concatenate(
            [np.full(t.horizon + 1, i, dtype=np.int64) for i, t in enumerate(trajs)]
        )
        t_idx_all = np.concatenate([np.arange(t.horizon + 1) for t in trajs])
        # row_offset[i] + t indexes the stacked state arrays below
        row_offset = np.concatenate([[0], np.cumsum([t.horizon + 1 for t in trajs])])[:-1]
        sq = np.concatenate([t.qs for t in trajs])
        sqd = np.concatenate([t.qds for t in trajs])
        horizons = np.array([t.horizon for t in trajs])
        feats_per = [task_features(t.meta) for t in trajs]
        goals_per = [t.meta.goal_ee_pose[:2] for t in trajs]
    else:
        aux_params = []
        q_all, qd_all, feat_all, goal_all, act_all = _stack_rows(trajs, with_actions=True)
        n_rows = q_all.shape[0]

    params = policy_params + aux_params
    opt_state = adam_init(params)
    lr = config.lr0
    best = np.inf
    streak = 0
    hist_total, hist_state, hist_action, hist_lr = [], [], [], []
    stop_reason = "max_epochs"
    snapshot = [p.copy() for p in params]

    for epoch in range(config.max_epochs):
        leaves = [tape.leaf(p) for p in params]
        if method == "code":
            pick = rng.integers(0, demo_idx_all.size, size=batch_size)
            bdemo = demo_idx_all[pick]
            bt = t_idx_all[pick]
            batch = build_aux_batch(aux_model, anchors, bdemo, bt, work.ts)
            rows = row_offset[batch.demo_index] + batch.t_index
            aux_leaves = _per_net_tensors(aux_model.nets, leaves[n_policy:])
            q_t, qd_t, a_t = aux_graph_samples(aux_model, aux_leaves, batch, work.ts)
            state_res = tape.sum_all(tape.square(q_t - tape.const(sq[rows]))) + tape.sum_all(
                tape.square(qd_t - tape.const(sqd[rows]))
            )
            state_term = state_res * (1.0 / (2.0 * batch_size))
            mask = (batch.t_index < horizons[batch.demo_index]).astype(np.float64)
            n_act = max(mask.sum(), 1.0)
            feats_rows = np.stack([feats_per[i] for i in batch.demo_index])
            goals_rows = np.stack([goals_per[i] for i in batch.demo_index])
            pred = policy.batch_graph(
                leaves[:n_policy], q_t, qd_t, tape.const(feats_rows), tape.const(goals_rows)
            )
            act_res = tape.square(a_t - pred) * tape.const(mask[:, None])
            action_term = tape.sum_all(act_res) * (1.0 / (2.0 * n_act))
            total = state_term + config.nu * action_term
            state_val = float(state_term.value)
            action_val = float(action_term.value)
        else:
            pick = rng.integers(0, n_rows, size=batch_size)
            pred = policy.batch_graph(
                leaves,
                tape.const(q_all[pick]),
                tape.const(qd_all[pick]),
                tape.const(feat_all[pick]),
                tape.const(goal_all[pick]),
            )
            total = tape.sum_all(tape.square(pred - tape.const(act_all[pick]))) * (
                1.0 / (2.0 * batch_size)
            )
            state_val = 0.0
            action_val = float(total.value)

        total_val = float(total.value)
        if not np.isfinite(total_val):
            raise TrainingDiverged(epoch, snapshot)
        snapshot = [p.copy() for p in params]

        grads = tape.gradients(total, leaves)
        if config.alternating_updates and method == "code":
            if epoch % 2 == 0:
                for j in range(n_policy, len(grads)):
                    grads[j] = np.zeros_like(grads[j])
            else:
                for j in range(n_policy):
                    grads[j] = np.zeros_like(grads[j])
        if config.decoupled_weight_decay:
            params, opt_state = adam_step(
                params, grads, opt_state, lr, weight_decay=config.weight_decay
            )
        else:
            grads = [g + config.weight_decay * p for g, p in zip(grads, params)]
            params, opt_state = adam_step(params, grads, opt_state, lr, weight_decay=0.0)

        hist_total.append(total_val)
        hist_state.append(state_val)
        hist_action.append(action_val)
        hist_lr.append(lr)

        if total_val > best - 1e-12:
            streak += 1
            if streak >= config.plateau_patience:
                if lr <= config.lr_min * (1.0 + 1e-12):
                    stop_reason = "plateau_at_lr_min"
                    break
                lr = max(lr * config.lr_decay, config.lr_min)
                streak = 0
        else:
            best = total_val
            streak = 0

    history = TrainHistory(
        total=np.array(hist_total),
        state_term=np.array(hist_state),
        action_term=np.array(hist_action),
        lr=np.array(hist_lr),
        stop_reason=stop_reason,
    )
    trained_policy = policy.with_params(params[:n_policy])
    trained_aux = aux_model.with_params(params[n_policy:]) if method == "code" else None
    return TrainResult(policy=trained_policy, aux_model=trained_aux, history=history)
