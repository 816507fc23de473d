"""Feed-forward nets with hand-written forward/backward passes.

Two model shapes share one MLP core:

* structured nuisance net: covariates -> rectified trunk -> K+1 linear heads,
  giving the coefficient vector theta_hat(x) of the sigmoid-polynomial link
  sigmoid(theta_hat(x) . (1, t, ..., t^K));
* plain response net: (covariates, treatment) -> rectified trunk -> sigmoid
  scalar, a fully flexible response surface.

All gradients are analytic and checked against central finite differences in
the test suite; nothing here depends on an autodiff framework.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Dataset,
    DivergenceError,
    IdentifiabilityError,
    InvalidInputError,
    poly_features_batch,
    substream,
    write_text_atomic,
)

LOSS_KINDS = ("bce", "squared")
_PROB_CLIP = 1e-12


def sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MLP:
    """Dense layers with rectifier activations on all but the last layer."""

    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]  # each (fan_out,)

    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def check_finite(self) -> None:
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise InvalidInputError("net parameters must be finite")


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> MLP:
    """Uniform fan-in/fan-out init on +-sqrt(6 / (fan_in + fan_out))."""
    weights, biases = [], []
    for fi, fo in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return MLP(weights, biases)


def mlp_raw(mlp: MLP, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Pre-output activations plus the cache needed for the backward pass."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != mlp.weights[0].shape[0]:
        raise InvalidInputError(
            f"input has shape {x.shape}, expected (n, {mlp.weights[0].shape[0]})"
        )
    cache = []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        cache.append((h, z))
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def mlp_backward(mlp: MLP, cache: list, d_raw: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Backprop an upstream gradient on the raw output; returns (dW, db, dX)."""
    grads_w = [np.empty(0)] * len(mlp.weights)
    grads_b = [np.empty(0)] * len(mlp.biases)
    delta = np.asarray(d_raw, dtype=float)
    for i in range(len(mlp.weights) - 1, -1, -1):
        h_in, z = cache[i]
        if i != len(mlp.weights) - 1:
            delta = delta * (z > 0)
        grads_w[i] = h_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        delta = delta @ mlp.weights[i].T
    return grads_w, grads_b, delta


@dataclass
class StructuredNet:
    """Trunk + K+1 linear heads realizing x -> theta_hat(x).

    The final MLP layer is the head bank: its rows map the last rectified
    hidden vector to the K+1 polynomial coefficients, with no output squash
    (coefficients are sign-unrestricted).
    """

    mlp: MLP
    k: int

    @property
    def d(self) -> int:
        return self.mlp.weights[0].shape[0]

    def copy(self) -> "StructuredNet":
        return StructuredNet(self.mlp.copy(), self.k)


@dataclass
class PlainNet:
    """Unstructured response surface (x, t) -> sigmoid scalar."""

    mlp: MLP  # input dim d+1, output dim 1

    @property
    def d(self) -> int:
        return self.mlp.weights[0].shape[0] - 1

    def copy(self) -> "PlainNet":
        return PlainNet(self.mlp.copy())


def init_structured(d: int, k: int, hidden: Sequence[int] = (64, 32, 8), seed: int = 0) -> StructuredNet:
    rng = substream(seed, "nets", "init", "structured", d, k, tuple(hidden))
    return StructuredNet(init_mlp([d, *hidden, k + 1], rng), k)


def init_plain(d: int, hidden: Sequence[int] = (64, 32, 8), seed: int = 0) -> PlainNet:
    rng = substream(seed, "nets", "init", "plain", d, tuple(hidden))
    return PlainNet(init_mlp([d + 1, *hidden, 1], rng))


def theta_forward(net: StructuredNet, x: np.ndarray) -> np.ndarray:
    """theta_hat(x) for a single covariate vector; length K+1."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != net.d:
        raise InvalidInputError(f"expected covariate vector of length {net.d}, got shape {x.shape}")
    return theta_batch(net, x[None, :])[0]


def theta_batch(net: StructuredNet, x: np.ndarray) -> np.ndarray:
    raw, _ = mlp_raw(net.mlp, x)
    return raw


def prob_forward(net: StructuredNet, x: np.ndarray, t: float) -> float:
    """sigmoid(theta_hat(x) . (1, t, ..., t^K))."""
    theta = theta_forward(net, x)
    tf = poly_features_batch(np.array([t]), net.k)[0]
    return float(sigmoid(np.array([theta @ tf]))[0])


def prob_batch(net: StructuredNet, x: np.ndarray, ts: np.ndarray) -> np.ndarray:
    theta = theta_batch(net, x)
    tf = poly_features_batch(ts, net.k)
    return sigmoid(np.einsum("ij,ij->i", theta, tf))


def plain_forward(net: PlainNet, x: np.ndarray, t: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(plain_prob_batch(net, x[None, :], np.array([t]))[0])


def plain_prob_batch(net: PlainNet, x: np.ndarray, ts: np.ndarray) -> np.ndarray:
    z = np.column_stack([x, np.asarray(ts, dtype=float)])
    raw, _ = mlp_raw(net.mlp, z)
    return sigmoid(raw[:, 0])


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "bce"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    val_fraction: float = 0.1
    patience: int = 5
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    hidden: tuple[int, ...] = (64, 32, 8)

    def __post_init__(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise InvalidInputError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning rate must be > 0")
        if not (0.0 <= self.val_fraction < 1.0):
            raise InvalidInputError("val_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


def loss_values(p: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    """Per-sample loss against predicted probabilities.

    Squared loss carries the 1/2 factor so its theta-gradient is
    (G - y) * dG/dtheta with no stray 2.
    """
    if loss == "bce":
        pc = np.clip(p, _PROB_CLIP, 1.0 - _PROB_CLIP)
        return -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return 0.5 * (p - y) ** 2


def _d_loss_d_prob_times(p: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    """dloss/du for u the pre-sigmoid latent, given p = sigmoid(u)."""
    if loss == "bce":
        return p - y
    return (p - y) * p * (1.0 - p)


class _Adam:
    def __init__(self, shapes: list[tuple[int, ...]], lr: float):
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _SGD:
    def __init__(self, shapes: list[tuple[int, ...]], lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


def make_optimizer(kind: str, shapes: list[tuple[int, ...]], lr: float):
    return _Adam(shapes, lr) if kind == "adam" else _SGD(shapes, lr)


def _structured_batch_grad(
    net: StructuredNet, x: np.ndarray, t: np.ndarray, y: np.ndarray, loss: str
) -> tuple[float, list[np.ndarray]]:
    """Mean loss and its gradient in all net parameters for one batch."""
    theta, cache = mlp_raw(net.mlp, x)
    tf = poly_features_batch(t, net.k)
    p = sigmoid(np.einsum("ij,ij->i", theta, tf))
    n = x.shape[0]
    d_theta = (_d_loss_d_prob_times(p, y, loss) / n)[:, None] * tf
    gw, gb, _ = mlp_backward(net.mlp, cache, d_theta)
    return float(loss_values(p, y, loss).mean()), gw + gb


def _plain_batch_grad(
    net: PlainNet, x: np.ndarray, t: np.ndarray, y: np.ndarray, loss: str
) -> tuple[float, list[np.ndarray]]:
    z = np.column_stack([x, t])
    raw, cache = mlp_raw(net.mlp, z)
    p = sigmoid(raw[:, 0])
    n = x.shape[0]
    d_raw = (_d_loss_d_prob_times(p, y, loss) / n)[:, None]
    gw, gb, _ = mlp_backward(net.mlp, cache, d_raw)
    return float(loss_values(p, y, loss).mean()), gw + gb


def _predict_probs(net, ds_x: np.ndarray, ds_t: np.ndarray) -> np.ndarray:
    if isinstance(net, StructuredNet):
        return prob_batch(net, ds_x, ds_t)
    return plain_prob_batch(net, ds_x, ds_t)


def _mean_loss(net, x, t, y, loss) -> float:
    return float(loss_values(_predict_probs(net, x, t), y, loss).mean())


def train(net, ds: Dataset, cfg: TrainConfig):
    """Fit a net by mini-batch ERM with early stopping on validation loss.

    Returns (fitted_net, history) where history rows are
    (epoch, train_loss, val_loss); epoch 0 records the initial parameters.
    The best validation checkpoint (including the initial one) is returned,
    so the fitted net's validation loss never exceeds the starting one.
    Deterministic for a given (cfg.seed, data).
    """
    if isinstance(net, StructuredNet):
        if ds.design.m < net.k + 1:
            raise IdentifiabilityError(
                f"degree K={net.k} needs at least K+1={net.k + 1} design levels, design has m={ds.design.m}"
            )
        batch_grad = _structured_batch_grad
    elif isinstance(net, PlainNet):
        batch_grad = _plain_batch_grad
    else:
        raise InvalidInputError(f"cannot train object of type {type(net).__name__}")
    net.mlp.check_finite()

    n = ds.n
    n_val = int(round(n * cfg.val_fraction))
    perm = substream(cfg.seed, "nets", "valsplit", n).permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size == 0:
        raise InvalidInputError("validation fraction leaves no training samples")
    if n_val == 0:
        val_idx = tr_idx  # degenerate but defined: validate on the training data
    xt, tt, yt = ds.x[tr_idx], ds.t[tr_idx], ds.y[tr_idx]
    xv, tv, yv = ds.x[val_idx], ds.t[val_idx], ds.y[val_idx]

    fitted = net.copy()
    params = fitted.mlp.params()
    opt = make_optimizer(cfg.optimizer, [p.shape for p in params], cfg.learning_rate)

    history: list[tuple[int, float, float]] = []
    val0 = _mean_loss(fitted, xv, tv, yv, cfg.loss)
    history.append((0, _mean_loss(fitted, xt, tt, yt, cfg.loss), val0))
    best_val = val0
    best_params = [p.copy() for p in params]
    stall = 0

    n_tr = xt.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = substream(cfg.seed, "nets", "shuffle", epoch).permutation(n_tr)
        for start in range(0, n_tr, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss_b, grads = batch_grad(fitted, xt[b], tt[b], yt[b], cfg.loss)
            if not math.isfinite(loss_b):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.step(params, grads)
        tr_loss = _mean_loss(fitted, xt, tt, yt, cfg.loss)
        val_loss = _mean_loss(fitted, xv, tv, yv, cfg.loss)
        if not (math.isfinite(tr_loss) and math.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        history.append((epoch, tr_loss, val_loss))
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_params = [p.copy() for p in params]
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                break

    for p, bp in zip(params, best_params):
        p[...] = bp
    return fitted, history


def plain_train(ds: Dataset, cfg: TrainConfig, hidden: Sequence[int] | None = None):
    """Convenience wrapper: initialize and fit an unstructured response net."""
    net = init_plain(ds.d, hidden or cfg.hidden, seed=cfg.seed)
    return train(net, ds, cfg)


def structured_train(ds: Dataset, k: int, cfg: TrainConfig, hidden: Sequence[int] | None = None):
    """Convenience wrapper: initialize and fit the structured nuisance net."""
    net = init_structured(ds.d, k, hidden or cfg.hidden, seed=cfg.seed)
    return train(net, ds, cfg)


def backprop_check(net, ds: Dataset, cfg: TrainConfig, h: float = 1e-4) -> float:
    """Max relative gap between analytic and central-finite-difference gradients.

    Gradients are of the empirical mean loss over the whole (small) dataset;
    relative error uses |analytic - fd| / (|fd| + 1e-8).
    """
    if ds.n > 64:
        raise InvalidInputError("gradient check is meant for small datasets (n <= 64)")
    batch_grad = _structured_batch_grad if isinstance(net, StructuredNet) else _plain_batch_grad
    _, grads = batch_grad(net, ds.x, ds.t, ds.y, cfg.loss)
    worst = 0.0
    probe = net.copy()
    for p_idx, param in enumerate(probe.mlp.params()):
        flat = param.reshape(-1)
        gflat = grads[p_idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _mean_loss(probe, ds.x, ds.t, ds.y, cfg.loss)
            flat[j] = orig - h
            dn = _mean_loss(probe, ds.x, ds.t, ds.y, cfg.loss)
            flat[j] = orig
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(gflat[j] - fd) / (abs(fd) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _mlp_to_dict(mlp: MLP) -> dict:
    return {
        "dims": mlp.dims(),
        "layers": [
            {"w": w.tolist(), "b": b.tolist()} for w, b in zip(mlp.weights, mlp.biases)
        ],
    }


def _mlp_from_dict(payload: dict) -> MLP:
    weights = [np.asarray(layer["w"], dtype=float) for layer in payload["layers"]]
    biases = [np.asarray(layer["b"], dtype=float) for layer in payload["layers"]]
    return MLP(weights, biases)


def net_to_dict(net) -> dict:
    if isinstance(net, StructuredNet):
        return {"kind": "structured", "k": net.k, "mlp": _mlp_to_dict(net.mlp)}
    if isinstance(net, PlainNet):
        return {"kind": "plain", "mlp": _mlp_to_dict(net.mlp)}
    raise InvalidInputError(f"cannot serialize object of type {type(net).__name__}")


def net_from_dict(payload: dict):
    kind = payload.get("kind")
    if kind == "structured":
        return StructuredNet(_mlp_from_dict(payload["mlp"]), int(payload["k"]))
    if kind == "plain":
        return PlainNet(_mlp_from_dict(payload["mlp"]))
    raise InvalidInputError(f"unknown net kind {kind!r}")


def save_net_json(net, path: str | Path) -> None:
    write_text_atomic(path, json.dumps(net_to_dict(net)) + "\n")


def load_net_json(path: str | Path):
    with open(path) as fh:
        return net_from_dict(json.load(fh))


def save_history_csv(history: list[tuple[int, float, float]], path: str | Path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for epoch, tr, va in history:
        lines.append(f"{epoch},{tr!r},{va!r}")
    write_text_atomic(path, "\n".join(lines) + "\n")
