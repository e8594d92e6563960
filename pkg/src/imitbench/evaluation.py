"""Rollout-based diagnostics: deviation curves, RMSE, success rate, and
empirical audits of the error-propagation bounds.

All evaluations are read-only over policies and datasets.  Deviations are
measured in the full-state l2 norm (positions and velocities concatenated),
matching the norm of the bound statements; position-only curves and the
per-joint RMSE are reported alongside.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arm import ArmSpec, NonFiniteAction, State, Trajectory, fk_position, rollout
from .auxtraj import AuxTrajectoryModel, anchors_from_trajectory, sample_aux_trajectory
from .datasets import Dataset
from .policies import NnPolicy, policy_lipschitz


def policy_rollout(policy, traj: Trajectory, arm: ArmSpec) -> tuple:
    """Roll the policy from the demo's start for its horizon.

    Returns (rollout trajectory | None, divergence step | None); a
    divergent policy yields the step at which it went non-finite.
    """
    try:
        out = rollout(policy, traj.state(0), traj.horizon, traj.ts, traj.meta)
        return out, None
    except NonFiniteAction as exc:
        return None, exc.step


def state_deviations(rolled: Optional[Trajectory], ref: Trajectory) -> np.ndarray:
    """Per-step full-state deviation; inf past a divergence point."""
    T = ref.horizon
    if rolled is None:
        return np.full(T + 1, np.inf)
    diff = rolled.states_matrix() - ref.states_matrix()
    return np.linalg.norm(diff, axis=1)


def position_deviations(rolled: Optional[Trajectory], ref: Trajectory) -> np.ndarray:
    T = ref.horizon
    if rolled is None:
        return np.full(T + 1, np.inf)
    return np.linalg.norm(rolled.qs - ref.qs, axis=1)


def rollout_rmse(policy, traj: Trajectory, arm: ArmSpec) -> float:
    """Root-mean-square per-joint position deviation over the rollout, in
    radians: sqrt(mean_t ||q_hat - q||^2 / d).  Divergence reports inf."""
    rolled, _ = policy_rollout(policy, traj, arm)
    if rolled is None:
        return float("inf")
    dev = position_deviations(rolled, traj)
    if not np.isfinite(dev).all():
        return float("inf")
    return float(np.sqrt(np.mean(dev**2) / traj.d))


@dataclass
class DeviationCurves:
    """25/50/75% quantiles of per-step deviation across trajectories."""

    steps: np.ndarray
    state_q25: np.ndarray
    state_q50: np.ndarray
    state_q75: np.ndarray
    pos_q25: np.ndarray
    pos_q50: np.ndarray
    pos_q75: np.ndarray
    n_alive: np.ndarray


def deviation_curve(policy, dataset: Dataset, arm: ArmSpec) -> DeviationCurves:
    """Quantile curves over the evaluation set; shorter trajectories drop
    out past their horizon."""
    trajs = dataset.trajectories
    per_state = []
    per_pos = []
    for traj in trajs:
        rolled, _ = policy_rollout(policy, traj, arm)
        per_state.append(state_deviations(rolled, traj))
        per_pos.append(position_deviations(rolled, traj))
    max_T = max(t.horizon for t in trajs)
    steps = np.arange(max_T + 1)
    shape = (max_T + 1, 3)
    qs = np.empty(shape)
    qp = np.empty(shape)
    alive = np.empty(max_T + 1, dtype=np.int64)
    for t in range(max_T + 1):
        vals_s = [dev[t] for dev in per_state if dev.size > t]
        vals_p = [dev[t] for dev in per_pos if dev.size > t]
        alive[t] = len(vals_s)
        qs[t] = np.percentile(vals_s, [25.0, 50.0, 75.0])
        qp[t] = np.percentile(vals_p, [25.0, 50.0, 75.0])
    return DeviationCurves(
        steps=steps,
        state_q25=qs[:, 0],
        state_q50=qs[:, 1],
        state_q75=qs[:, 2],
        pos_q25=qp[:, 0],
        pos_q50=qp[:, 1],
        pos_q75=qp[:, 2],
        n_alive=alive,
    )


def success_rate(policy, dataset: Dataset, arm: ArmSpec, radius: float = 0.02) -> float:
    """Fraction of rollouts whose final end effector lands within ``radius``
    of the recorded goal position."""
    wins = 0
    for traj in dataset.trajectories:
        rolled, _ = policy_rollout(policy, traj, arm)
        if rolled is None:
            continue
        ee = fk_position(arm, rolled.qs[-1])
        if np.linalg.norm(ee - traj.meta.goal_ee_pose[:2]) < radius:
            wins += 1
    return wins / len(dataset.trajectories)


# ---------------------------------------------------------------------------
# bound audits


def one_step_errors(policy, ref: Trajectory, arm: ArmSpec) -> np.ndarray:
    """||s_{t+1} - f(s_t, pi(s_t))|| along a reference trajectory."""
    T = ref.horizon
    out = np.empty(T)
    for t in range(T):
        s = ref.state(t)
        a = policy(s, ref.meta)
        nxt = np.concatenate([s.q + s.qd * ref.ts, s.qd + a * ref.ts])
        out[t] = np.linalg.norm(ref.states_matrix()[t + 1] - nxt)
    return out


def estimate_closed_loop_lipschitz(
    policy,
    dataset: Dataset,
    arm: ArmSpec,
    n_pairs: int = 10_000,
    scale: float = 1e-3,
    seed: int = 0,
) -> float:
    """Empirical local Lipschitz estimate of s -> f(s, pi(s)).

    Max deviation ratio over random perturbation pairs anchored at states
    visited by the dataset.  An estimate, not a certificate: it can only
    under-report the true constant.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    trajs = dataset.trajectories
    pool = np.concatenate([t.states_matrix() for t in trajs])
    owners = np.concatenate(
        [np.full(t.horizon + 1, i, dtype=np.int64) for i, t in enumerate(trajs)]
    )
    d = arm.d
    ts = dataset.ts
    best = 0.0
    idx = rng.integers(0, pool.shape[0], size=n_pairs)
    deltas = rng.standard_normal((n_pairs, 2 * d))
    deltas *= scale / np.linalg.norm(deltas, axis=1, keepdims=True)
    for k in range(n_pairs):
        base = pool[idx[k]]
        meta = trajs[int(owners[idx[k]])].meta
        s1 = State(base[:d], base[d:])
        pert = base + deltas[k]
        s2 = State(pert[:d], pert[d:])
        a1 = policy(s1, meta)
        a2 = policy(s2, meta)
        f1 = np.concatenate([s1.q + s1.qd * ts, s1.qd + a1 * ts])
        f2 = np.concatenate([s2.q + s2.qd * ts, s2.qd + a2 * ts])
        ratio = np.linalg.norm(f1 - f2) / np.linalg.norm(base - pert)
        if ratio > best:
            best = ratio
    return float(best)


@dataclass
class BoundAudit:
    """Measured quantities and margins for the error-propagation bounds.

    ``epsilon`` is the max one-step error along the reference trajectories
    (the demonstrations, or the auxiliary trajectories when supplied, in
    which case it plays the role of the auxiliary one-step error and
    ``kappa`` is the max demo-auxiliary deviation).  Margins are min(RHS -
    LHS) over all checks; non-negative means the bound held.
    """

    L: float
    L_source: str
    epsilon: float
    kappa: Optional[float]
    recursion_margin: float
    cumulative_margin: float
    triangle_margin: Optional[float]
    thm2_margin: Optional[float]
    n_trajectories: int

    @property
    def recursion_ok(self) -> bool:
        return self.recursion_margin >= -1e-9

    @property
    def triangle_ok(self) -> bool:
        return self.triangle_margin is None or self.triangle_margin >= -1e-9

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "L_source": self.L_source,
            "epsilon": self.epsilon,
            "kappa": self.kappa,
            "recursion_margin": self.recursion_margin,
            "cumulative_margin": self.cumulative_margin,
            "triangle_margin": self.triangle_margin,
            "thm2_margin": self.thm2_margin,
            "n_trajectories": self.n_trajectories,
        }


def theorem_audit(
    policy,
    dataset: Dataset,
    arm: ArmSpec,
    L_source: str = "certified",
    aux_model: Optional[AuxTrajectoryModel] = None,
    lipschitz_seed: int = 0,
) -> BoundAudit:
    """Audit the one-step recursion and cumulative deviation bounds.

    With ``L_source='certified'`` the constant comes from the closed-loop
    formula on the policy network's spectral bound and the recursion
    inequality must hold up to float rounding; 'estimated' uses a sampled
    local estimate and is flagged as such.  Supplying ``aux_model`` audits
    against the auxiliary trajectories: one-step errors become the
    auxiliary one-step error, ``kappa`` is measured, and the triangle
    split of the demo-deviation sum is checked.
    """
    if L_source == "certified":
        L = policy_lipschitz(policy, dataset.ts)
    elif L_source == "estimated":
        L = estimate_closed_loop_lipschitz(policy, dataset, arm, seed=lipschitz_seed)
    else:
        raise ValueError("L_source must be 'certified' or 'estimated'")

    refs = []
    demos = dataset.trajectories
    if aux_model is not None:
        for i, traj in enumerate(demos):
            anchors = anchors_from_trajectory(traj, arm, index=i)
            refs.append(sample_aux_trajectory(aux_model, anchors, traj.horizon, traj.ts, traj.meta))
    else:
        refs = demos

    eps = 0.0
    kappa = None
    if aux_model is not None:
        kappa = 0.0
        for demo, ref in zip(demos, refs):
            kappa = max(kappa, float(np.linalg.norm(demo.states_matrix() - ref.states_matrix(), axis=1).max()))

    recursion_margin = np.inf
    cumulative_margin = np.inf
    triangle_margin = np.inf if aux_model is not None else None
    thm2_margin = np.inf if aux_model is not None else None

    per_traj_eps = []
    rollouts = []
    for ref in refs:
        per_traj_eps.append(one_step_errors(policy, ref, arm))
    eps = float(max(e.max() for e in per_traj_eps))

    for i, (demo, ref) in enumerate(zip(demos, refs)):
        rolled, _ = policy_rollout(policy, demo, arm)
        rollouts.append(rolled)
        dev_ref = state_deviations(rolled, ref)
        # per-step recursion: dev_{t+1} <= eps + L * dev_t
        lhs = dev_ref[1:]
        rhs = eps + L * dev_ref[:-1]
        recursion_margin = min(recursion_margin, float((rhs - lhs).min()))
        # unrolled form: dev_t <= L^t dev_0 + sum_{tau<t} L^tau eps.  The
        # dev_0 term covers auxiliary references, whose sampled start
        # velocity matches the demo's only to the finite-difference order.
        T = demo.horizon
        powers = L ** np.arange(T + 1)
        geo = powers * dev_ref[0] + eps * np.concatenate([[0.0], np.cumsum(powers[:T])])
        cumulative_margin = min(cumulative_margin, float((geo - dev_ref).min()))
        if aux_model is not None:
            dev_demo = state_deviations(rolled, demo)
            dev_aux_demo = np.linalg.norm(demo.states_matrix() - ref.states_matrix(), axis=1)
            split = float(dev_aux_demo.sum() + dev_ref.sum() - dev_demo.sum())
            triangle_margin = min(triangle_margin, split)
            bound2 = kappa * (T + 1) + float(geo.sum())
            thm2_margin = min(thm2_margin, bound2 - float(dev_demo.sum()))

    return BoundAudit(
        L=L,
        L_source=L_source,
        epsilon=eps,
        kappa=kappa,
        recursion_margin=float(recursion_margin),
        cumulative_margin=float(cumulative_margin),
        triangle_margin=None if triangle_margin is None else float(triangle_margin),
        thm2_margin=None if thm2_margin is None else float(thm2_margin),
        n_trajectories=len(demos),
    )


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    rmse: np.ndarray
    rmse_state: np.ndarray
    curves: DeviationCurves
    success: float
    audit: Optional[BoundAudit]
    metadata: dict

    def to_json(self) -> str:
        payload = {
            "metadata": self.metadata,
            "success_rate": self.success,
            "rmse_per_trajectory": [float(x) for x in self.rmse],
            "rmse_state_per_trajectory": [float(x) for x in self.rmse_state],
            "audit": self.audit.to_dict() if self.audit else None,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def evaluate(
    policy,
    dataset: Dataset,
    arm: ArmSpec,
    success_radius: float = 0.02,
    audit: Optional[str] = None,
    aux_model: Optional[AuxTrajectoryModel] = None,
) -> EvalReport:
    """Full evaluation pass; ``audit`` is None, 'certified', or 'estimated'."""
    rmse = []
    rmse_state = []
    for traj in dataset.trajectories:
        rolled, _ = policy_rollout(policy, traj, arm)
        dev_p = position_deviations(rolled, traj)
        dev_s = state_deviations(rolled, traj)
        rmse.append(
            float(np.sqrt(np.mean(dev_p**2) / traj.d)) if np.isfinite(dev_p).all() else float("inf")
        )
        rmse_state.append(
            float(np.sqrt(np.mean(dev_s**2))) if np.isfinite(dev_s).all() else float("inf")
        )
    curves = deviation_curve(policy, dataset, arm)
    succ = success_rate(policy, dataset, arm, radius=success_radius)
    audit_out = None
    if audit is not None:
        audit_out = theorem_audit(policy, dataset, arm, L_source=audit, aux_model=aux_model)
    metadata = {
        "rmse_normalization": "sqrt(mean_t |q_hat - q|^2 / d), radians, position only",
        "rmse_state_normalization": "sqrt(mean_t |s_hat - s|^2), full state",
        "deviation_norm": "l2 over concatenated (q, qd); position-only curves also emitted",
        "success_radius_m": success_radius,
        "n_trajectories": len(dataset.trajectories),
    }
    return EvalReport(
        rmse=np.array(rmse),
        rmse_state=np.array(rmse_state),
        curves=curves,
        success=succ,
        audit=audit_out,
        metadata=metadata,
    )


def curves_to_csv(curves: DeviationCurves, path) -> None:
    with open(path, "w") as f:
        f.write("step,n_alive,state_q25,state_q50,state_q75,pos_q25,pos_q50,pos_q75\n")
        for t in range(curves.steps.size):
            f.write(
                f"{curves.steps[t]},{curves.n_alive[t]},{float(curves.state_q25[t])!r},"
                f"{float(curves.state_q50[t])!r},{float(curves.state_q75[t])!r},"
                f"{float(curves.pos_q25[t])!r},{float(curves.pos_q50[t])!r},"
                f"{float(curves.pos_q75[t])!r}\n"
            )


def report_to_csv(report: EvalReport, dataset: Dataset, path) -> None:
    with open(path, "w") as f:
        f.write("traj_id,rmse_pos,rmse_state\n")
        for traj, r, rs in zip(dataset.trajectories, report.rmse, report.rmse_state):
            f.write(f"{traj.meta.traj_id},{float(r)!r},{float(rs)!r}\n")


# ---------------------------------------------------------------------------
# data-efficiency sweep

METHOD_CODE = {"bc": 0, "bc_noise": 1, "code": 2}
CLASS_CODE = {"nn": 0, "rmp": 1}

SWEEP_COLUMNS = [
    "method",
    "policy_class",
    "size",
    "seed",
    "status",
    "median_rmse",
    "q25_rmse",
    "q75_rmse",
    "success_rate",
    "final_dev_median",
    "quarter_dev_median",
    "n_epochs",
    "stop_reason",
    "checkpoint",
]


def split_dataset(dataset: Dataset, n_validation: int):
    """Deterministic split: the last ``n_validation`` ids are held out."""
    if n_validation >= len(dataset):
        raise ValueError("validation split would consume the whole dataset")
    train = dataset.subset(range(len(dataset) - n_validation))
    val = dataset.subset(range(len(dataset) - n_validation, len(dataset)))
    return train, val


def _assert_disjoint(train: Dataset, val: Dataset) -> None:
    train_ids = {t.meta.traj_id for t in train.trajectories}
    val_ids = {t.meta.traj_id for t in val.trajectories}
    if train_ids & val_ids:
        raise AssertionError(f"validation ids leak into training: {sorted(train_ids & val_ids)}")


def run_sweep_cell(
    dataset: Dataset,
    method: str,
    policy_class: str,
    size: int,
    seed: int,
    base_config,
    arch: dict,
    n_validation: int,
    outdir=None,
):
    """Train and evaluate one sweep cell; returns a result row dict.

    The training subset is a seeded draw of ``size`` trajectories from the
    training pool; the validation split is fixed across all cells.
    """
    from dataclasses import replace as dc_replace
    from pathlib import Path

    from .auxtraj import make_aux_model
    from .policies import make_nn_policy, make_rmp_policy, save_policy
    from .training import train

    train_pool, val = split_dataset(dataset, n_validation)
    if size > len(train_pool):
        raise ValueError(f"size {size} exceeds training pool {len(train_pool)}")
    pick_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, size, 0xDA7A))))
    subset_idx = np.sort(pick_rng.choice(len(train_pool), size=size, replace=False))
    subset = train_pool.subset(subset_idx)
    _assert_disjoint(subset, val)

    arm = dataset.arm
    m = subset.trajectories[0].meta
    n_features = m.goal_ee_pose.size + m.features.size
    init_seed = np.random.SeedSequence(
        (seed, size, METHOD_CODE[method], CLASS_CODE[policy_class])
    )
    init_rng = np.random.Generator(np.random.PCG64(init_seed))
    if policy_class == "nn":
        policy = make_nn_policy(arm.d, n_features, init_rng, hidden=tuple(arch["nn_hidden"]))
    else:
        policy = make_rmp_policy(arm, n_features, init_rng, hidden=tuple(arch["rmp_hidden"]))
    aux = None
    if method == "code":
        mode = arch.get("aux_mode", "joint")
        aux = make_aux_model(
            mode,
            arm.d,
            init_rng,
            dataset.ts,
            n_demos=len(subset.trajectories),
            context_dim=3 + n_features,
            hidden=tuple(arch["aux_hidden"]),
        )
    config = dc_replace(base_config, method=method, seed=seed)
    result = train(subset, policy, config, aux_model=aux)

    report = evaluate(result.policy, val, arm)
    finite = report.rmse[np.isfinite(report.rmse)]
    if finite.size:
        q25, q50, q75 = np.percentile(report.rmse, [25.0, 50.0, 75.0])
    else:
        q25 = q50 = q75 = float("inf")
    T4 = report.curves.steps.size // 4
    row = {
        "method": method,
        "policy_class": policy_class,
        "size": size,
        "seed": seed,
        "status": "ok",
        "median_rmse": float(q50),
        "q25_rmse": float(q25),
        "q75_rmse": float(q75),
        "success_rate": report.success,
        "final_dev_median": float(report.curves.state_q50[-1]),
        "quarter_dev_median": float(report.curves.state_q50[T4]),
        "n_epochs": result.history.n_epochs,
        "stop_reason": result.history.stop_reason,
        "checkpoint": "",
    }
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        name = f"{method}_{policy_class}_n{size}_s{seed}"
        ckpt = outdir / f"{name}.policy.ckpt"
        save_policy(ckpt, result.policy)
        result.history.to_csv(outdir / f"{name}.history.csv")
        row["checkpoint"] = ckpt.name
    return row


def _failure_row(method, policy_class, size, seed, exc) -> dict:
    return {
        "method": method,
        "policy_class": policy_class,
        "size": size,
        "seed": seed,
        "status": f"failed: {type(exc).__name__}: {exc}",
        "median_rmse": float("nan"),
        "q25_rmse": float("nan"),
        "q75_rmse": float("nan"),
        "success_rate": float("nan"),
        "final_dev_median": float("nan"),
        "quarter_dev_median": float("nan"),
        "n_epochs": 0,
        "stop_reason": "",
        "checkpoint": "",
    }


def sweep_worker(payload) -> dict:
    """One sweep cell, failure-safe; top-level so worker pools can pickle it."""
    dataset, method, policy_class, size, seed, base_config, arch, n_validation, outdir = payload
    try:
        return run_sweep_cell(
            dataset, method, policy_class, size, seed, base_config, arch, n_validation, outdir
        )
    except Exception as exc:  # recorded, sweep continues
        return _failure_row(method, policy_class, size, seed, exc)


def data_efficiency_sweep(
    dataset: Dataset,
    methods: list,
    policy_classes: list,
    sizes: list,
    seeds: list,
    base_config,
    arch: dict,
    n_validation: int = 20,
    outdir=None,
    jobs: int = 1,
) -> list:
    """Grid of training runs; failures are recorded and the sweep continues.

    Rows come back sorted by (method, class, size, seed) so output is
    independent of execution order, including under parallel workers.
    """
    cells = [
        (dataset, method, policy_class, size, seed, base_config, arch, n_validation, outdir)
        for method in methods
        for policy_class in policy_classes
        for size in sizes
        for seed in seeds
    ]
    if jobs > 1:
        import multiprocessing

        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(sweep_worker, cells)
    else:
        rows = [sweep_worker(cell) for cell in cells]
    rows.sort(
        key=lambda r: (
            METHOD_CODE[r["method"]],
            CLASS_CODE[r["policy_class"]],
            r["size"],
            r["seed"],
        )
    )
    return rows


def sweep_to_csv(rows: list, path) -> None:
    with open(path, "w") as f:
        f.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in SWEEP_COLUMNS:
                v = row[col]
                if isinstance(v, float):
                    cells.append(repr(float(v)))
                else:
                    cells.append(str(v).replace(",", ";"))
            f.write(",".join(cells) + "\n")
