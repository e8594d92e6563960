"""Dense multilayer perceptrons over float64 numpy arrays.

Hidden layers share one activation (elu, tanh, or identity); the output
layer is always affine.  Numeric forward passes are pure and allocation
light; ``forward_tape`` builds the same computation on the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape

ACTIVATIONS = ("elu", "tanh", "identity")


class DimensionError(ValueError):
    """Layer or input dimensions do not chain."""


def _elu(x):
    return np.where(x > 0.0, x, np.exp(np.minimum(x, 0.0)) - 1.0)


_NUMERIC_ACT = {
    "elu": _elu,
    "tanh": np.tanh,
    "identity": lambda x: x,
}

_TAPE_ACT = {
    "elu": tape.elu,
    "tanh": tape.tanh,
    "identity": lambda t: t,
}


@dataclass
class Mlp:
    """Weights ``[out, in]`` and biases ``[out]`` per layer, plus activation tag."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "elu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} do not agree")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"layer {k}: in-dim {w.shape[1]} does not chain from layer {k - 1} out-dim "
                    f"{self.weights[k - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k}: non-finite parameter entry")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        """Flat parameter list [W0, b0, W1, b1, ...] (the arrays themselves)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: list) -> "Mlp":
        """Rebuild an Mlp of identical structure from a flat parameter list."""
        n = len(self.weights)
        if len(params) != 2 * n:
            raise DimensionError(f"expected {2 * n} arrays, got {len(params)}")
        return Mlp(
            weights=[np.asarray(params[2 * k]) for k in range(n)],
            biases=[np.asarray(params[2 * k + 1]) for k in range(n)],
            activation=self.activation,
        )

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )


def init_mlp(sizes, activation: str, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform initialization: entries in +-sqrt(6/(fan_in+fan_out))."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise DimensionError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases, activation=activation)


def mlp_forward(mlp: Mlp, x) -> np.ndarray:
    """Evaluate the network on a single input vector or a [B, in] batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != mlp.in_dim:
        raise DimensionError(f"layer 0 expects input dim {mlp.in_dim}, got {h.shape[-1]}")
    act = _NUMERIC_ACT[mlp.activation]
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if k != last:
            h = act(h)
    return h[0] if single else h


def forward_tape(param_tensors: list, activation: str, x: tape.Tensor) -> tape.Tensor:
    """Graph-building forward; ``param_tensors`` is [W0, b0, W1, b1, ...]."""
    act = _TAPE_ACT[activation]
    n_layers = len(param_tensors) // 2
    h = x
    for k in range(n_layers):
        w = param_tensors[2 * k]
        b = param_tensors[2 * k + 1]
        h = tape.matmul(h, tape.transpose_last(w)) + b
        if k != n_layers - 1:
            h = act(h)
    return h


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge within the iteration cap."""


def _spectral_norm(w: np.ndarray, rel_tol: float, max_iter: int) -> float:
    if not np.any(w):
        return 0.0
    rng = np.random.Generator(np.random.PCG64(0x5EED))
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    gram = w.T @ w
    sigma = 0.0
    for it in range(max_iter):
        v_new = gram @ v
        norm = np.linalg.norm(v_new)
        if norm == 0.0:
            return 0.0
        v = v_new / norm
        sigma_new = np.sqrt(norm)
        if sigma > 0.0 and abs(sigma_new - sigma) <= rel_tol * sigma_new:
            return float(sigma_new)
        sigma = sigma_new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} iterations")


def spectral_bound(mlp: Mlp, rel_tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Upper bound on the network's l2 Lipschitz constant.

    Product of per-layer spectral norms; valid because every supported
    activation is 1-Lipschitz.  Norms come from power iteration on W^T W,
    stopped at relative tolerance ``rel_tol`` on the singular-value estimate.
    """
    beta = 1.0
    for w in mlp.weights:
        beta *= _spectral_norm(w, rel_tol, max_iter)
    return beta
