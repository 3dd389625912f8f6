"""Fully connected ReLU network: forward pass, numpy backprop training with
magnitude pruning and early stopping, and JSON persistence.

The network maps loads [MW] to the non-slack generator dispatch [MW]. Inputs
and outputs are min-max scaled; the scaling lives in the network so that
:func:`folded_layers` can return an equivalent net in physical units.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_text
from .grid import GridCase

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class NetFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpNetwork:
    layers: list[int]
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]
    masks: list[np.ndarray]
    x_offset: np.ndarray
    x_scale: np.ndarray
    y_offset: np.ndarray
    y_scale: np.ndarray

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("need at least input and output sizes")
        for k, (W, b, M) in enumerate(zip(self.weights, self.biases, self.masks)):
            shape = (self.layers[k + 1], self.layers[k])
            if W.shape != shape or M.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {k}: expected weight shape {shape}")
        if len(self.weights) != len(self.layers) - 1:
            raise ValueError("one weight matrix per layer transition")

    @property
    def n_inputs(self) -> int:
        return self.layers[0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1]

    @property
    def hidden(self) -> list[int]:
        return self.layers[1:-1]

    def sparsity(self) -> list[float]:
        return [float(np.mean(W == 0)) for W in self.weights]

    @classmethod
    def identity_scaled(cls, layers, weights, biases, masks=None) -> "MlpNetwork":
        """Net without normalisation (unit scales)."""
        weights = [np.asarray(W, dtype=float) for W in weights]
        masks = masks or [(W != 0).astype(float) for W in weights]
        return cls(
            list(layers), weights, [np.asarray(b, dtype=float) for b in biases],
            [np.asarray(M, dtype=float) for M in masks],
            np.zeros(layers[0]), np.ones(layers[0]), np.zeros(layers[-1]), np.ones(layers[-1]),
        )


def init_network(layers: list[int], seed: int) -> MlpNetwork:
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        lim = math.sqrt(6.0 / fan_in)
        Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpNetwork.identity_scaled(layers, Ws, bs, [np.ones_like(W) for W in Ws])


# -- evaluation ----------------------------------------------------------------

def _forward_norm(weights, biases, xn, keep=False):
    a = xn
    acts = [a]
    pres = []
    for k, (W, b) in enumerate(zip(weights, biases)):
        h = a @ W.T + b
        last = k == len(weights) - 1
        a = h if last else np.maximum(h, 0.0)
        if keep:
            pres.append(h)
            acts.append(a)
    return (a, pres, acts) if keep else a


def forward(net: MlpNetwork, load) -> np.ndarray:
    """Predicted non-slack dispatch [MW]; accepts one load vector or a batch."""
    x = np.asarray(load, dtype=float)
    xn = (x - net.x_offset) / net.x_scale
    yn = _forward_norm(net.weights, net.biases, xn)
    return net.y_offset + net.y_scale * yn


def folded_layers(net: MlpNetwork) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Weights and biases of the equivalent net acting on MW directly."""
    Ws = [W.copy() for W in net.weights]
    bs = [b.copy() for b in net.biases]
    Ws[0] = net.weights[0] / net.x_scale
    bs[0] = net.biases[0] - net.weights[0] @ (net.x_offset / net.x_scale)
    Ws[-1] = net.y_scale[:, None] * Ws[-1]
    bs[-1] = net.y_scale * bs[-1] + net.y_offset
    return Ws, bs


def pre_activations(net: MlpNetwork, load) -> list[np.ndarray]:
    """Hidden-layer pre-activations, per layer, for a batch of loads [MW]."""
    Ws, bs = folded_layers(net)
    _, pres, _ = _forward_norm(Ws, bs, np.atleast_2d(np.asarray(load, dtype=float)), keep=True)
    return pres[:-1]


def complete_dispatch(case: GridCase, pred_nonslack, load) -> np.ndarray:
    """Full dispatch; the slack generator covers total load minus the predictions."""
    pred = np.atleast_2d(np.asarray(pred_nonslack, dtype=float))
    load = np.atleast_2d(np.asarray(load, dtype=float))
    full = np.zeros((pred.shape[0], case.n_gens))
    full[:, case.nonslack_gens] = pred
    full[:, case.slack_gen] = load.sum(axis=1) - pred.sum(axis=1)
    return full


def predict_dispatch(net: MlpNetwork, case: GridCase, load) -> np.ndarray:
    return complete_dispatch(case, forward(net, load), load)


def lipschitz_bound(net: MlpNetwork) -> float:
    """Bound on ``|f(x) - f(y)|_inf / |x - y|_inf`` for the MW-to-MW map."""
    Ws, _ = folded_layers(net)
    return float(np.prod([np.abs(W).sum(axis=1).max() for W in Ws]))


def test_mae_percent(net: MlpNetwork, case: GridCase, inputs, targets) -> float:
    """Mean absolute dispatch error over generators with a nonzero range, in % of range."""
    rng = case.p_max - case.p_min
    keep = rng > 0
    err = np.abs(predict_dispatch(net, case, inputs) - targets)[:, keep] / rng[keep]
    return 100.0 * float(err.mean())


# -- training --------------------------------------------------------------------

def mse_and_gradients(weights, biases, xn, yn):
    """MSE over all output entries and its gradients w.r.t. weights and biases."""
    out, pres, acts = _forward_norm(weights, biases, xn, keep=True)
    diff = out - yn
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ weights[k]) * (pres[k - 1] > 0)
    return loss, gW, gb


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 40
    learning_rate: float = 0.05
    optimizer: str = "sgd"  # "sgd" or "adam"
    prune_start: int = 50
    prune_end: int = 200
    prune_steps: int = 10
    final_sparsity: float = 0.8
    seed: int = 0

    def schedule(self) -> list[tuple[int, float]]:
        if self.final_sparsity <= 0 or self.prune_steps <= 0:
            return []
        span = self.prune_end - self.prune_start
        return [
            (self.prune_start + int(round(span * i / self.prune_steps)), self.final_sparsity * i / self.prune_steps)
            for i in range(1, self.prune_steps + 1)
        ]

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 <= self.final_sparsity < 1:
            raise ValueError("final_sparsity must be in [0, 1)")
        if self.schedule() and self.schedule()[-1][0] > self.epochs:
            raise ValueError("prune schedule ends after the last epoch")


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    test_mse: list[float] = field(default_factory=list)
    sparsity: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        rows = ["epoch,train_mse,test_mse,sparsity"]
        rows += [f"{e},{a:.17g},{b:.17g},{s:.17g}" for e, a, b, s in zip(self.epoch, self.train_mse, self.test_mse, self.sparsity)]
        return "\n".join(rows) + "\n"


def prune(weights, masks, target: float) -> None:
    """Zero the ``ceil(target * size)`` smallest-magnitude entries of each matrix, in place."""
    for W, M in zip(weights, masks):
        k = int(math.ceil(target * W.size - 1e-9))
        if k <= 0:
            continue
        order = np.argsort(np.abs(W * M), axis=None, kind="stable")
        flat = M.reshape(-1)
        flat[order[:k]] = 0.0
        W *= M


def _minmax(a):
    lo = a.min(axis=0)
    span = a.max(axis=0) - lo
    return lo, np.where(span > 0, span, 1.0)


def train(dataset, case: GridCase, hidden: list[int], config: TrainConfig | None = None) -> tuple[MlpNetwork, TrainLog]:
    """Minibatch MSE training on the non-slack dispatch, returning the early-stopped net.

    Snapshots are eligible for early stopping once the final sparsity level
    has been applied, so the returned weights always meet the sparsity target.
    """
    config = config or TrainConfig()
    config.validate()
    if len(dataset.train_idx) == 0:
        raise TrainingError("empty training split")
    ns = case.nonslack_gens
    X_tr, Y_tr = dataset.inputs[dataset.train_idx], dataset.targets[dataset.train_idx][:, ns]
    X_te, Y_te = dataset.inputs[dataset.test_idx], dataset.targets[dataset.test_idx][:, ns]
    if len(X_te) == 0:
        X_te, Y_te = X_tr, Y_tr
    layers = [case.n_loads, *hidden, len(ns)]
    net = init_network(layers, config.seed)
    net.x_offset, net.x_scale = _minmax(X_tr)
    net.y_offset, net.y_scale = _minmax(Y_tr)
    xn_tr, yn_tr = (X_tr - net.x_offset) / net.x_scale, (Y_tr - net.y_offset) / net.y_scale
    xn_te, yn_te = (X_te - net.x_offset) / net.x_scale, (Y_te - net.y_offset) / net.y_scale

    W, b, M = net.weights, net.biases, net.masks
    rng = np.random.default_rng([config.seed, 7])
    schedule = dict(config.schedule())
    eligible_from = max(schedule) if schedule else 0
    adam = [[np.zeros_like(p) for p in W + b], [np.zeros_like(p) for p in W + b], 0]
    log_ = TrainLog()
    best = (math.inf, None)
    lr = config.learning_rate
    n = len(xn_tr)

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, gW, gb = mse_and_gradients(W, b, xn_tr[idx], yn_tr[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            grads = [g * m for g, m in zip(gW, M)] + gb
            params = W + b
            if config.optimizer == "adam":
                m1, m2, t = adam
                t += 1
                adam[2] = t
                for p, g, a1, a2 in zip(params, grads, m1, m2):
                    a1 *= 0.9
                    a1 += 0.1 * g
                    a2 *= 0.999
                    a2 += 0.001 * g * g
                    p -= lr * (a1 / (1 - 0.9**t)) / (np.sqrt(a2 / (1 - 0.999**t)) + 1e-8)
            else:
                for p, g in zip(params, grads):
                    p -= lr * g
            for w, m in zip(W, M):
                w *= m
        if epoch in schedule:
            prune(W, M, schedule[epoch])
        tr = float(np.mean((_forward_norm(W, b, xn_tr) - yn_tr) ** 2))
        te = float(np.mean((_forward_norm(W, b, xn_te) - yn_te) ** 2))
        if not (math.isfinite(tr) and math.isfinite(te)):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        log_.epoch.append(epoch)
        log_.train_mse.append(tr)
        log_.test_mse.append(te)
        log_.sparsity.append(float(np.mean([np.mean(w == 0) for w in W])))
        if epoch >= eligible_from and te < best[0]:
            best = (te, ([w.copy() for w in W], [x.copy() for x in b], [m.copy() for m in M]))
            log_.best_epoch = epoch
    Wb, bb, Mb = best[1]
    out = MlpNetwork(layers, Wb, bb, Mb, net.x_offset, net.x_scale, net.y_offset, net.y_scale)
    log.info("trained %s: best epoch %d, test mse %.3e", layers, log_.best_epoch, best[0])
    return out, log_


# -- persistence -----------------------------------------------------------------

def net_to_dict(net: MlpNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": list(net.layers),
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "mask": [M.astype(int).tolist() for M in net.masks],
        "x_scale": {"offset": net.x_offset.tolist(), "scale": net.x_scale.tolist()},
        "y_scale": {"offset": net.y_offset.tolist(), "scale": net.y_scale.tolist()},
    }


def net_from_dict(d: dict) -> MlpNetwork:
    if d.get("format_version") != FORMAT_VERSION:
        raise NetFormatError(f"unsupported network format version {d.get('format_version')!r}")
    try:
        layers = [int(x) for x in d["layers"]]
        W = [np.array(w, dtype=float).reshape(layers[k + 1], layers[k]) for k, w in enumerate(d["weights"])]
        b = [np.array(x, dtype=float) for x in d["biases"]]
        M = [np.array(m, dtype=float).reshape(w.shape) for m, w in zip(d.get("mask") or [(w != 0) for w in W], W)]
        xs, ys = d.get("x_scale"), d.get("y_scale")
        x_off = np.array(xs["offset"], dtype=float) if xs else np.zeros(layers[0])
        x_sc = np.array(xs["scale"], dtype=float) if xs else np.ones(layers[0])
        y_off = np.array(ys["offset"], dtype=float) if ys else np.zeros(layers[-1])
        y_sc = np.array(ys["scale"], dtype=float) if ys else np.ones(layers[-1])
        net = MlpNetwork(layers, W, b, M, x_off, x_sc, y_off, y_sc)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise NetFormatError(f"malformed network file: {exc}") from exc
    if any(np.any((m == 0) & (w != 0)) for w, m in zip(net.weights, net.masks)):
        raise NetFormatError("weights are nonzero where the mask is zero")
    return net


def save_net(net: MlpNetwork, path) -> None:
    atomic_write_text(path, json.dumps(net_to_dict(net)) + "\n")


def load_net(path) -> MlpNetwork:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetFormatError(f"{path}: not valid JSON ({exc.msg})") from exc
    return net_from_dict(d)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
