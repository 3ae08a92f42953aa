"""Curve fitting of grid data for the continuous-state backward recursion.

Two methods: a small feedforward network (rectifier hidden layers, logistic
output for bounded targets) trained full-batch with a fixed epoch budget,
and inverse-distance interpolation as the dependency-free fallback (also the
default for one-dimensional states, where it is exact at the grid points).
Both are deterministic given the configuration seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

D_CLAMP_LO = 1e-6
D_CLAMP_HI = 1.0


class FitError(RuntimeError):
    """Training diverged or inputs are unusable."""


@dataclass(frozen=True)
class FitConfig:
    """Settings for function fitting.

    ``method`` may be "feedforward-net", "inverse-distance", or "auto"
    (net for multi-dimensional inputs, inverse-distance for 1-d).
    """

    method: str = "auto"
    widths: tuple[int, ...] = (8, 16, 8)
    epochs: int = 5000
    learning_rate: float = 0.01
    validation_split: float = 0.2
    seed: int = 0
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.method not in ("auto", "feedforward-net", "inverse-distance"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if not 0.0 < self.validation_split <= 0.5:
            raise ValueError("validation split must lie in (0, 0.5]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    def resolve_method(self, input_dim: int) -> str:
        if self.method != "auto":
            return self.method
        return "inverse-distance" if input_dim == 1 else "feedforward-net"

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "widths": list(self.widths),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "validation_split": self.validation_split,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_json_dict(cls, spec: dict) -> "FitConfig":
        return cls(
            method=spec.get("method", "auto"),
            widths=tuple(spec.get("widths", (8, 16, 8))),
            epochs=int(spec.get("epochs", 5000)),
            learning_rate=float(spec.get("learning_rate", 0.01)),
            validation_split=float(spec.get("validation_split", 0.2)),
            seed=int(spec.get("seed", 0)),
            weight_decay=float(spec.get("weight_decay", 1e-5)),
        )


@dataclass
class FittedFunction:
    """A fitted map from states to targets; evaluation is deterministic.

    Bounded outputs (the opportunity processes) are clamped to
    [1e-6, 1] regardless of the query point.
    """

    method: str
    input_dim: int
    output_dim: int
    bounded: bool
    x_mean: np.ndarray
    x_scale: np.ndarray
    params: dict = field(default_factory=dict)
    training_error: float = float("nan")
    validation_error: float = float("nan")

    def evaluate(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float).ravel()
        if s.shape != (self.input_dim,):
            raise ValueError(f"input has shape {s.shape}, expected ({self.input_dim},)")
        return self.evaluate_batch(s[None, :])[0]

    def evaluate_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != self.input_dim:
            raise ValueError(
                f"inputs have dimension {states.shape[1]}, expected {self.input_dim}"
            )
        z = (states - self.x_mean) / self.x_scale
        if self.method == "feedforward-net":
            out = _net_forward(z, self.params["weights"], self.params["biases"], self.bounded)
        else:
            out = _idw_eval(z, self.params["nodes"], self.params["values"])
        if self.bounded:
            out = np.clip(out, D_CLAMP_LO, D_CLAMP_HI)
        return out

    def to_json_dict(self) -> dict:
        out = {
            "method": self.method,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "bounded": self.bounded,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "training_error": self.training_error,
            "validation_error": self.validation_error,
        }
        if self.method == "feedforward-net":
            out["weights"] = [w.tolist() for w in self.params["weights"]]
            out["biases"] = [b.tolist() for b in self.params["biases"]]
        else:
            out["nodes"] = self.params["nodes"].tolist()
            out["values"] = self.params["values"].tolist()
        return out

    @classmethod
    def from_json_dict(cls, spec: dict) -> "FittedFunction":
        if spec["method"] == "feedforward-net":
            params = {
                "weights": [np.asarray(w, dtype=float) for w in spec["weights"]],
                "biases": [np.asarray(b, dtype=float) for b in spec["biases"]],
            }
        else:
            params = {
                "nodes": np.asarray(spec["nodes"], dtype=float),
                "values": np.asarray(spec["values"], dtype=float),
            }
        return cls(
            method=spec["method"],
            input_dim=int(spec["input_dim"]),
            output_dim=int(spec["output_dim"]),
            bounded=bool(spec["bounded"]),
            x_mean=np.asarray(spec["x_mean"], dtype=float),
            x_scale=np.asarray(spec["x_scale"], dtype=float),
            params=params,
            training_error=float(spec.get("training_error", float("nan"))),
            validation_error=float(spec.get("validation_error", float("nan"))),
        )


def fit(
    states: np.ndarray,
    targets: np.ndarray,
    config: Optional[FitConfig] = None,
    bounded: bool = True,
) -> FittedFunction:
    """Fit a function through (state, target) pairs.

    Inputs are standardized per dimension before fitting.  The recorded
    validation error is the mean-squared error on a held-out split (for the
    interpolation method, the leave-out split is evaluated the same way).
    """
    config = config or FitConfig()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(states) != len(targets):
        raise ValueError("states and targets must have the same length")
    if len(states) < 2:
        raise ValueError("need at least two points to fit")
    x_mean = states.mean(axis=0)
    x_scale = states.std(axis=0)
    x_scale = np.where(x_scale > 1e-12, x_scale, 1.0)
    z = (states - x_mean) / x_scale

    method = config.resolve_method(states.shape[1])
    rng = np.random.default_rng(config.seed)
    n = len(states)
    n_val = max(1, int(round(n * config.validation_split)))
    n_val = min(n_val, n - 1)
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    if method == "inverse-distance":
        fitted = FittedFunction(
            method=method,
            input_dim=states.shape[1],
            output_dim=targets.shape[1],
            bounded=bounded,
            x_mean=x_mean,
            x_scale=x_scale,
            params={"nodes": z.copy(), "values": targets.copy()},
        )
        # Validation via leave-out re-interpolation from the training subset.
        holdout = _idw_eval(z[val_idx], z[train_idx], targets[train_idx])
        fitted.validation_error = float(np.mean((holdout - targets[val_idx]) ** 2))
        fitted.training_error = 0.0
        return fitted

    weights, biases, train_err, val_err = _train_net(
        z[train_idx], targets[train_idx], z[val_idx], targets[val_idx], config, bounded, rng
    )
    return FittedFunction(
        method=method,
        input_dim=states.shape[1],
        output_dim=targets.shape[1],
        bounded=bounded,
        x_mean=x_mean,
        x_scale=x_scale,
        params={"weights": weights, "biases": biases},
        training_error=train_err,
        validation_error=val_err,
    )


def evaluate(fitted: FittedFunction, s: np.ndarray) -> np.ndarray:
    return fitted.evaluate(s)


# ---------------------------------------------------------------------------
# Feedforward net (numpy, full batch, Adam steps, fixed epoch budget)
# ---------------------------------------------------------------------------


def _net_forward(z, weights, biases, bounded):
    h = z
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
    out = h @ weights[-1] + biases[-1]
    if bounded:
        out = 1.0 / (1.0 + np.exp(-out))
    return out


def _train_net(z_train, y_train, z_val, y_val, config, bounded, rng):
    dims = [z_train.shape[1], *config.widths, y_train.shape[1]]
    weights = [
        rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(2.0 / dims[i])
        for i in range(len(dims) - 1)
    ]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(z_train)

    for epoch in range(1, config.epochs + 1):
        # Cosine decay to 1% of the initial rate stops step dithering near
        # the optimum while keeping the epoch budget fixed and deterministic.
        lr = config.learning_rate * (
            0.01 + 0.495 * (1.0 + np.cos(np.pi * (epoch - 1) / config.epochs))
        )
        # Forward pass, keeping activations for the backward sweep.
        acts = [z_train]
        h = z_train
        for w, b in zip(weights[:-1], biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        logits = h @ weights[-1] + biases[-1]
        out = 1.0 / (1.0 + np.exp(-logits)) if bounded else logits
        err = out - y_train
        loss = float(np.mean(err**2))
        if not np.isfinite(loss):
            raise FitError(
                f"training diverged at epoch {epoch} (loss is not finite); "
                "try a lower learning rate"
            )
        grad_out = 2.0 * err / (n * y_train.shape[1])
        if bounded:
            grad_out = grad_out * out * (1.0 - out)

        grads_w = [None] * len(weights)
        grads_b = [None] * len(biases)
        delta = grad_out
        for layer in range(len(weights) - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ weights[layer].T) * (acts[layer] > 0)

        corr1 = 1.0 - beta1**epoch
        corr2 = 1.0 - beta2**epoch
        for i in range(len(weights)):
            grads_w[i] = grads_w[i] + config.weight_decay * weights[i]
            m_w[i] = beta1 * m_w[i] + (1 - beta1) * grads_w[i]
            v_w[i] = beta2 * v_w[i] + (1 - beta2) * grads_w[i] ** 2
            weights[i] -= lr * (m_w[i] / corr1) / (np.sqrt(v_w[i] / corr2) + eps)
            m_b[i] = beta1 * m_b[i] + (1 - beta1) * grads_b[i]
            v_b[i] = beta2 * v_b[i] + (1 - beta2) * grads_b[i] ** 2
            biases[i] -= lr * (m_b[i] / corr1) / (np.sqrt(v_b[i] / corr2) + eps)

    train_err = float(np.mean((_net_forward(z_train, weights, biases, bounded) - y_train) ** 2))
    val_err = float(np.mean((_net_forward(z_val, weights, biases, bounded) - y_val) ** 2))
    return weights, biases, train_err, val_err


# ---------------------------------------------------------------------------
# Inverse-distance interpolation (local Shepard, power 2; exact at the nodes,
# weights restricted to the nearest neighbors so far-away nodes cannot drag
# steep curves toward the global mean)
# ---------------------------------------------------------------------------


def _idw_neighbors(n_nodes: int, input_dim: int) -> int:
    return min(n_nodes, max(4, 2 * input_dim))


def _idw_eval(z_query, nodes, values):
    out = np.empty((len(z_query), values.shape[1]))
    k = _idw_neighbors(len(nodes), nodes.shape[1])
    for i, q in enumerate(z_query):
        d2 = ((nodes - q) ** 2).sum(axis=1)
        hit = np.argmin(d2)
        if d2[hit] < 1e-24:
            out[i] = values[hit]
            continue
        near = np.argpartition(d2, k - 1)[:k]
        w = 1.0 / d2[near]
        out[i] = (w @ values[near]) / w.sum()
    return out
