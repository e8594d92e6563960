"""Acceleration policy classes.

Two families share one callable contract ``policy(state, meta) -> accel``:

* ``NnPolicy`` - a single network on [q, qd, task features].
* ``RmpPolicy`` - a structured class: per-subtask acceleration and
  Cholesky-factor weight networks, fused in the configuration space by a
  weighted least-squares solve over the subtask maps.

Both expose ``param_arrays``/``with_params``/``batch_graph`` so the trainer
can treat them uniformly, and both have a numeric path (used in rollouts)
that matches the graph path bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tape
from .arm import ArmSpec, State, TrajMeta, fk_position, jacobian, jacobian_dot_qd, task_features
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import Mlp, forward_tape, init_mlp, mlp_forward, spectral_bound

MAP_TAGS = ("ee_goal", "cspace_residual")

PINV_REL_CUTOFF = 1e-10


# ---------------------------------------------------------------------------
# unstructured network policy


@dataclass
class NnPolicy:
    net: Mlp
    d: int
    n_features: int

    def __post_init__(self):
        expected = 2 * self.d + self.n_features
        if self.net.in_dim != expected:
            raise ValueError(f"net expects {self.net.in_dim} inputs, layout needs {expected}")
        if self.net.out_dim != self.d:
            raise ValueError(f"net outputs {self.net.out_dim}, need {self.d} accelerations")

    def action(self, state: State, features: np.ndarray) -> np.ndarray:
        x = np.concatenate([state.q, state.qd, features])
        return mlp_forward(self.net, x)

    def __call__(self, state: State, meta: Optional[TrajMeta]) -> np.ndarray:
        return self.action(state, task_features(meta))

    def param_arrays(self) -> list:
        return self.net.params()

    def with_params(self, arrays: list) -> "NnPolicy":
        return NnPolicy(net=self.net.with_params(arrays), d=self.d, n_features=self.n_features)

    def batch_graph(self, ptensors, q, qd, feats, goal_xy=None) -> tape.Tensor:
        """[B, d] accelerations; q/qd/feats are [B, ...] graph tensors."""
        x = tape.concat([q, qd, feats], axis=-1)
        return forward_tape(ptensors, self.net.activation, x)


def make_nn_policy(
    d: int,
    n_features: int,
    rng: np.random.Generator,
    hidden=(256, 128),
    activation: str = "elu",
) -> NnPolicy:
    net = init_mlp([2 * d + n_features, *hidden, d], activation, rng)
    return NnPolicy(net=net, d=d, n_features=n_features)


# ---------------------------------------------------------------------------
# structured policy: subtask accelerations fused by weighted least squares


@dataclass
class RmpSubtask:
    """A subtask map with its acceleration net and importance-weight net.

    The weight net outputs the n(n+1)/2 entries of a lower-triangular factor
    L; the importance weight is M = L L^T after ``diag_offset`` is added to
    L's diagonal, so M stays positive definite wherever L is populated.
    """

    map: str
    accel_net: Mlp
    cholesky_net: Mlp
    diag_offset: float = 1e-5

    def __post_init__(self):
        if self.map not in MAP_TAGS:
            raise ValueError(f"unknown subtask map {self.map!r}; expected one of {MAP_TAGS}")


@dataclass
class SubtaskEval:
    a: np.ndarray
    M: np.ndarray
    J: np.ndarray
    curv: np.ndarray


def _tril_matrix(z: np.ndarray, n: int, diag_offset: float) -> np.ndarray:
    m = n * (n + 1) // 2
    if z.shape != (m,):
        raise ValueError(f"cholesky net produced {z.shape[0]} entries, map dimension {n} needs {m}")
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = z
    L[np.diag_indices(n)] += diag_offset
    return L


def rmp_subtask_eval(
    subtask: RmpSubtask,
    arm: ArmSpec,
    state: State,
    features: np.ndarray,
    goal_xy: np.ndarray,
) -> SubtaskEval:
    """Evaluate one subtask's (a, M, J, curv) tuple at a state."""
    if subtask.map == "ee_goal":
        J = jacobian(arm, state.q)
        x = fk_position(arm, state.q) - goal_xy
        xd = J @ state.qd
        curv = jacobian_dot_qd(arm, state.q, state.qd)
        inp = np.concatenate([x, xd])
        n = 2
    else:  # cspace_residual
        d = arm.d
        J = np.eye(d)
        curv = np.zeros(d)
        inp = np.concatenate([state.q, state.qd, features])
        n = d
    a = mlp_forward(subtask.accel_net, inp)
    z = mlp_forward(subtask.cholesky_net, inp)
    L = _tril_matrix(z, n, subtask.diag_offset)
    return SubtaskEval(a=a, M=L @ L.T, J=J, curv=curv)


def rmp_resolve(rmps, return_info: bool = False):
    """Fuse subtask tuples into a configuration-space acceleration.

    Minimizes sum_k 0.5 * ||J_k qdd + curv_k - a_k||^2_{M_k}; the solution is
    pinv(sum J^T M J) @ (sum J^T M (a - curv)) with the pseudo-inverse taken
    by eigendecomposition and a relative singular-value cutoff.  A fully
    degenerate system (all weights zero) yields the minimum-norm zero
    acceleration and is flagged in the info dict.
    """
    rmps = [r if isinstance(r, SubtaskEval) else SubtaskEval(*r) for r in rmps]
    d = rmps[0].J.shape[1]
    G = np.zeros((d, d))
    h = np.zeros(d)
    for r in rmps:
        JT_M = r.J.T @ r.M
        G += JT_M @ r.J
        h += JT_M @ (r.a - r.curv)
    w, v = np.linalg.eigh(G)
    wmax = max(float(w.max()), 0.0)
    keep = w > PINV_REL_CUTOFF * (wmax if wmax > 0.0 else 1.0)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    qdd = v @ (inv * (v.T @ h))
    if not return_info:
        return qdd
    info = {"rank": int(keep.sum()), "degenerate": bool(not keep.any())}
    return qdd, info


@dataclass
class RmpPolicy:
    arm: ArmSpec
    subtasks: list
    n_features: int

    def __post_init__(self):
        if not self.subtasks:
            raise ValueError("need at least one subtask")
        d = self.arm.d
        for st in self.subtasks:
            n = 2 if st.map == "ee_goal" else d
            if st.accel_net.out_dim != n:
                raise ValueError(f"{st.map}: accel net outputs {st.accel_net.out_dim}, expected {n}")
            if st.cholesky_net.out_dim != n * (n + 1) // 2:
                raise ValueError(
                    f"{st.map}: cholesky net outputs {st.cholesky_net.out_dim}, expected {n * (n + 1) // 2}"
                )

    @property
    def d(self) -> int:
        return self.arm.d

    def action(self, state: State, features: np.ndarray, goal_xy: np.ndarray) -> np.ndarray:
        evals = [rmp_subtask_eval(st, self.arm, state, features, goal_xy) for st in self.subtasks]
        return rmp_resolve(evals)

    def __call__(self, state: State, meta: Optional[TrajMeta]) -> np.ndarray:
        return self.action(state, task_features(meta), meta.goal_ee_pose[:2])

    def param_arrays(self) -> list:
        out = []
        for st in self.subtasks:
            out.extend(st.accel_net.params())
            out.extend(st.cholesky_net.params())
        return out

    def with_params(self, arrays: list) -> "RmpPolicy":
        subtasks = []
        k = 0
        for st in self.subtasks:
            na = 2 * len(st.accel_net.weights)
            nc = 2 * len(st.cholesky_net.weights)
            subtasks.append(
                RmpSubtask(
                    map=st.map,
                    accel_net=st.accel_net.with_params(arrays[k : k + na]),
                    cholesky_net=st.cholesky_net.with_params(arrays[k + na : k + na + nc]),
                    diag_offset=st.diag_offset,
                )
            )
            k += na + nc
        return RmpPolicy(arm=self.arm, subtasks=subtasks, n_features=self.n_features)

    # -- batched graph path -------------------------------------------------

    def batch_graph(self, ptensors, q, qd, feats, goal_xy) -> tape.Tensor:
        """[B, d] fused accelerations with gradients through q and qd.

        ``goal_xy`` is a [B, 2] tensor of goal positions (constant per row).
        """
        d = self.arm.d
        B = q.value.shape[0]
        lengths = self.arm.link_lengths
        suffix = tape.const(np.tril(np.ones((d, d))))  # [j, k] = 1 iff j >= k

        G_total = None
        h_total = None
        k = 0
        for st in self.subtasks:
            na = 2 * len(st.accel_net.weights)
            nc = 2 * len(st.cholesky_net.weights)
            accel_p = ptensors[k : k + na]
            chol_p = ptensors[k + na : k + na + nc]
            k += na + nc

            if st.map == "ee_goal":
                angles = tape.cumsum_last(q)
                ls = tape.sin(angles) * lengths
                lc = tape.cos(angles) * lengths
                jx = -tape.matmul(ls, suffix)
                jy = tape.matmul(lc, suffix)
                J = tape.stack([jx, jy], axis=-2)  # [B, 2, d]
                ee = tape.stack(
                    [tape.sum_axis(lc, -1), tape.sum_axis(ls, -1)], axis=-1
                )  # [B, 2]
                x = ee - goal_xy
                xd = tape.reshape(tape.matmul(J, tape.reshape(qd, (B, d, 1))), (B, 2))
                r2 = tape.square(tape.cumsum_last(qd))
                curv = tape.stack(
                    [-tape.sum_axis(lc * r2, -1), -tape.sum_axis(ls * r2, -1)], axis=-1
                )
                inp = tape.concat([x, xd], axis=-1)
                n = 2
                a = forward_tape(accel_p, st.accel_net.activation, inp)
                b = tape.reshape(a - curv, (B, n, 1))
                z = forward_tape(chol_p, st.cholesky_net.activation, inp)
                L = tape.tril_from_vec(z, n, st.diag_offset)
                M = tape.matmul(L, tape.transpose_last(L))
                JT = tape.transpose_last(J)
                Gk = tape.matmul(JT, tape.matmul(M, J))
                hk = tape.matmul(JT, tape.matmul(M, b))
            else:  # cspace_residual: J = I, curv = 0
                inp = tape.concat([q, qd, feats], axis=-1)
                a = forward_tape(accel_p, st.accel_net.activation, inp)
                z = forward_tape(chol_p, st.cholesky_net.activation, inp)
                L = tape.tril_from_vec(z, d, st.diag_offset)
                M = tape.matmul(L, tape.transpose_last(L))
                Gk = M
                hk = tape.matmul(M, tape.reshape(a, (B, d, 1)))

            G_total = Gk if G_total is None else G_total + Gk
            h_total = hk if h_total is None else h_total + hk

        qdd = tape.sym_pinv_solve(G_total, h_total, rel_cutoff=PINV_REL_CUTOFF)
        return tape.reshape(qdd, (B, d))


def make_rmp_policy(
    arm: ArmSpec,
    n_features: int,
    rng: np.random.Generator,
    hidden=(128, 64),
    activation: str = "elu",
    diag_offset: float = 1e-5,
) -> RmpPolicy:
    d = arm.d
    subtasks = []
    for map_tag, n, in_dim in (
        ("ee_goal", 2, 4),
        ("cspace_residual", d, 2 * d + n_features),
    ):
        accel = init_mlp([in_dim, *hidden, n], activation, rng)
        chol = init_mlp([in_dim, *hidden, n * (n + 1) // 2], activation, rng)
        subtasks.append(RmpSubtask(map=map_tag, accel_net=accel, cholesky_net=chol, diag_offset=diag_offset))
    return RmpPolicy(arm=arm, subtasks=subtasks, n_features=n_features)


# ---------------------------------------------------------------------------
# closed-loop Lipschitz certificate


def policy_lipschitz(policy, ts: float) -> float:
    """Certified closed-loop Lipschitz constant sqrt(2(1+(1+beta^2) ts^2)).

    ``beta`` is the spectral-norm product bound of the policy network, an
    upper bound on its Lipschitz constant with respect to the full input
    (and therefore to the state, since task features are held fixed along a
    rollout).  Only the unstructured class admits this certificate; the
    least-squares fusion of the structured class is not globally Lipschitz,
    so audits of it must use an empirical estimate instead.
    """
    if not isinstance(policy, NnPolicy):
        raise TypeError("certified Lipschitz constant is only available for NnPolicy")
    beta = spectral_bound(policy.net)
    return float(np.sqrt(2.0 * (1.0 + (1.0 + beta * beta) * ts * ts)))


# ---------------------------------------------------------------------------
# persistence


POLICY_SCHEMA = 1


def save_policy(path, policy) -> None:
    if isinstance(policy, NnPolicy):
        manifest = {
            "schema": POLICY_SCHEMA,
            "class": "nn",
            "d": policy.d,
            "n_features": policy.n_features,
        }
        save_checkpoint(path, {"policy": policy.net}, manifest)
    elif isinstance(policy, RmpPolicy):
        manifest = {
            "schema": POLICY_SCHEMA,
            "class": "rmp",
            "n_features": policy.n_features,
            "link_lengths": [float(x) for x in policy.arm.link_lengths],
            "subtasks": [{"map": st.map, "diag_offset": st.diag_offset} for st in policy.subtasks],
        }
        nets = {}
        for i, st in enumerate(policy.subtasks):
            nets[f"subtask{i}_accel"] = st.accel_net
            nets[f"subtask{i}_cholesky"] = st.cholesky_net
        save_checkpoint(path, nets, manifest)
    else:
        raise TypeError(f"cannot save policy of type {type(policy).__name__}")


def load_policy(path):
    nets, manifest = load_checkpoint(path)
    if manifest.get("schema") != POLICY_SCHEMA:
        raise CheckpointError(f"{path}: unsupported policy schema {manifest.get('schema')}")
    if manifest["class"] == "nn":
        return NnPolicy(net=nets["policy"], d=manifest["d"], n_features=manifest["n_features"])
    if manifest["class"] == "rmp":
        arm = ArmSpec(link_lengths=np.array(manifest["link_lengths"]))
        subtasks = [
            RmpSubtask(
                map=entry["map"],
                accel_net=nets[f"subtask{i}_accel"],
                cholesky_net=nets[f"subtask{i}_cholesky"],
                diag_offset=entry["diag_offset"],
            )
            for i, entry in enumerate(manifest["subtasks"])
        ]
        return RmpPolicy(arm=arm, subtasks=subtasks, n_features=manifest["n_features"])
    raise CheckpointError(f"{path}: unknown policy class {manifest['class']!r}")
