"""Dense regression networks with batch normalisation, trained with Adam.

Hidden layers are ``affine -> batch-norm -> ReLU``; the output layer is affine,
optionally followed by a ReLU to keep predictions non-negative.  Everything is
float64 numpy so gradients can be checked against finite differences.

Parameters live in a flat ``dict`` keyed ``W0, b0, gamma0, beta0, W1, ...``; the
Adam moments use the same keys.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_artifact, write_artifact

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericError(RuntimeError):
    pass


@dataclass
class MlpSpec:
    input_dim: int
    hidden_widths: list[int]
    output_dim: int
    batch_norm: bool | list[bool] = True
    output_activation: str = "identity"
    seed: int = 0

    def __post_init__(self):
        self.hidden_widths = [int(w) for w in self.hidden_widths]
        if isinstance(self.batch_norm, bool):
            self.batch_norm = [self.batch_norm] * len(self.hidden_widths)
        self.batch_norm = [bool(b) for b in self.batch_norm]
        if len(self.batch_norm) != len(self.hidden_widths):
            raise ValueError("one batch_norm flag per hidden layer")
        if min([self.input_dim, self.output_dim, *self.hidden_widths]) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.output_activation not in ("identity", "relu"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_widths": self.hidden_widths,
                "output_dim": self.output_dim, "batch_norm": self.batch_norm,
                "output_activation": self.output_activation, "seed": self.seed}


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.01
    batch_size: int = 256
    shuffle_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class MlpModel:
    spec: MlpSpec
    params: dict[str, np.ndarray]
    running_mean: dict[int, np.ndarray]
    running_var: dict[int, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    output_scale: float = 1.0
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM

    def copy(self) -> "MlpModel":
        cp = lambda d: {k: v.copy() for k, v in d.items()}
        return MlpModel(self.spec, cp(self.params), cp(self.running_mean), cp(self.running_var),
                        cp(self.adam_m), cp(self.adam_v), self.adam_step,
                        None if self.input_shift is None else self.input_shift.copy(),
                        None if self.input_scale is None else self.input_scale.copy(),
                        self.output_scale, self.bn_eps, self.bn_momentum)


def mlp_init(spec: MlpSpec) -> MlpModel:
    """He-uniform weights, zero biases, identity batch-norm, fresh running stats."""
    rng = np.random.default_rng(spec.seed)
    dims = [spec.input_dim, *spec.hidden_widths, spec.output_dim]
    params, rmean, rvar = {}, {}, {}
    for l in range(spec.n_layers):
        fan_in, fan_out = dims[l], dims[l + 1]
        lim = np.sqrt(6.0 / fan_in)
        params[f"W{l}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        params[f"b{l}"] = np.zeros(fan_out)
        if l < len(spec.hidden_widths) and spec.batch_norm[l]:
            params[f"gamma{l}"] = np.ones(fan_out)
            params[f"beta{l}"] = np.zeros(fan_out)
            rmean[l] = np.zeros(fan_out)
            rvar[l] = np.ones(fan_out)
    return MlpModel(spec, params, rmean, rvar)


# ----------------------------------------------------------------- internals

def _net_forward(model: MlpModel, X: np.ndarray, train: bool, update_stats: bool = False):
    """Forward pass on already-standardised inputs; returns output and backprop cache."""
    p = model.params
    n_hidden = len(model.spec.hidden_widths)
    cache = []
    h = X
    for l in range(n_hidden):
        z = h @ p[f"W{l}"] + p[f"b{l}"]
        entry = {"in": h}
        if model.spec.batch_norm[l]:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    B = z.shape[0]
                    m = model.bn_momentum
                    model.running_mean[l] = (1 - m) * model.running_mean[l] + m * mu
                    model.running_var[l] = (1 - m) * model.running_var[l] + m * var * B / (B - 1)
            else:
                mu, var = model.running_mean[l], model.running_var[l]
            inv_std = 1.0 / np.sqrt(var + model.bn_eps)
            xhat = (z - mu) * inv_std
            entry.update(xhat=xhat, inv_std=inv_std)
            z = p[f"gamma{l}"] * xhat + p[f"beta{l}"]
        entry["pre"] = z
        h = np.maximum(z, 0.0)
        cache.append(entry)
    L = n_hidden
    out = h @ p[f"W{L}"] + p[f"b{L}"]
    final = {"in": h, "pre": out}
    if model.spec.output_activation == "relu":
        out = np.maximum(out, 0.0)
    cache.append(final)
    return out, cache


def _net_backward(model: MlpModel, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    n_hidden = len(model.spec.hidden_widths)
    grads = {}
    L = n_hidden
    final = cache[L]
    if model.spec.output_activation == "relu":
        dout = dout * (final["pre"] > 0)
    grads[f"W{L}"] = final["in"].T @ dout
    grads[f"b{L}"] = dout.sum(axis=0)
    dh = dout @ p[f"W{L}"].T
    for l in range(n_hidden - 1, -1, -1):
        e = cache[l]
        dz = dh * (e["pre"] > 0)
        if model.spec.batch_norm[l]:
            xhat, inv_std = e["xhat"], e["inv_std"]
            grads[f"gamma{l}"] = (dz * xhat).sum(axis=0)
            grads[f"beta{l}"] = dz.sum(axis=0)
            dxhat = dz * p[f"gamma{l}"]
            B = dxhat.shape[0]
            dz = (inv_std / B) * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        grads[f"W{l}"] = e["in"].T @ dz
        grads[f"b{l}"] = dz.sum(axis=0)
        dh = dz @ p[f"W{l}"].T
    return grads


def _masked_mse(pred: np.ndarray, Y: np.ndarray, mask: np.ndarray | None):
    if mask is None:
        diff = pred - Y
        count = diff.size
    else:
        diff = np.where(mask, pred - np.where(mask, Y, 0.0), 0.0)
        count = int(mask.sum())
    sq = float((diff * diff).sum())
    denom = max(count, 1)
    return sq / denom, 2.0 * diff / denom, sq, count


def _standardize_in(model: MlpModel, X: np.ndarray) -> np.ndarray:
    if model.input_shift is not None:
        X = X - model.input_shift
    if model.input_scale is not None:
        X = X / model.input_scale
    return X


def loss_and_grad(model: MlpModel, X: np.ndarray, Y: np.ndarray, mask: np.ndarray | None = None):
    """Training-mode masked MSE of the raw network and its parameter gradients.

    Inputs and targets are taken as-is (no bundle standardisation); running
    statistics are not touched.
    """
    out, cache = _net_forward(model, np.asarray(X, float), train=True)
    loss, dout, _, _ = _masked_mse(out, np.asarray(Y, float), mask)
    return loss, _net_backward(model, cache, dout)


# ----------------------------------------------------------------- public API

def mlp_forward(model: MlpModel, X: np.ndarray, mode: str = "eval") -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected {model.spec.input_dim} input columns, got {X.shape[1]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and any(model.spec.batch_norm) and X.shape[0] < 2:
        raise ValueError("training-mode batch norm needs a batch of at least 2 rows")
    out, _ = _net_forward(model, _standardize_in(model, X), train=train)
    return out * model.output_scale


def mlp_predict(model: MlpModel, X: np.ndarray, chunk: int = 16384) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] <= chunk:
        return mlp_forward(model, X, "eval")
    return np.concatenate([mlp_forward(model, X[i:i + chunk], "eval")
                           for i in range(0, X.shape[0], chunk)], axis=0)


def set_standardization(model: MlpModel, X: np.ndarray, Y: np.ndarray | None = None,
                        mask: np.ndarray | None = None, fixed: np.ndarray | None = None) -> None:
    """Store z-score constants for inputs and a positive scale for targets.

    Columns listed in ``fixed`` are left unscaled (they are pre-normalised by the
    caller, e.g. coordinates and basis values).  Targets are only divided by their
    root-mean-square so a final ReLU still means non-negative outputs.
    """
    X = np.asarray(X, float)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    if fixed is not None:
        shift[fixed] = 0.0
        scale[fixed] = 1.0
    model.input_shift, model.input_scale = shift, scale
    if Y is not None:
        Yv = np.asarray(Y, float)
        vals = Yv[mask] if mask is not None else Yv
        rms = float(np.sqrt(np.mean(vals ** 2))) if vals.size else 1.0
        model.output_scale = rms if rms > 0 else 1.0


def _batches(n: int, batch_size: int, perm: np.ndarray, need_pairs: bool):
    starts = list(range(0, n, batch_size))
    out = [perm[s:s + batch_size] for s in starts]
    # a lone trailing row cannot form batch statistics; fold it into the previous batch
    if need_pairs and len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def mlp_train(model: MlpModel, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
              mask: np.ndarray | None = None) -> tuple[MlpModel, np.ndarray]:
    """Minibatch Adam on masked MSE; returns the trained model and per-epoch loss.

    ``model`` is updated in place (and returned).  The loss trace is the mean
    squared error over all unmasked training entries seen in each epoch, in the
    network's internal (scaled) units.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must have the same number of rows")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(Y.shape)
    Xs = _standardize_in(model, X)
    Ys = Y / model.output_scale
    n = X.shape[0]
    need_pairs = any(model.spec.batch_norm)
    if need_pairs and n < 2:
        raise ValueError("batch-norm training needs at least 2 rows")
    for k, v in model.params.items():
        model.adam_m.setdefault(k, np.zeros_like(v))
        model.adam_v.setdefault(k, np.zeros_like(v))

    rng = np.random.default_rng(cfg.shuffle_seed)
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps
    trace = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sq_tot, cnt_tot = 0.0, 0
        for idx in _batches(n, cfg.batch_size, perm, need_pairs):
            out, cache = _net_forward(model, Xs[idx], train=True, update_stats=True)
            _, dout, sq, cnt = _masked_mse(out, Ys[idx], None if mask is None else mask[idx])
            sq_tot += sq
            cnt_tot += cnt
            grads = _net_backward(model, cache, dout)
            model.adam_step += 1
            t = model.adam_step
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for k, g in grads.items():
                m = model.adam_m[k]
                v = model.adam_v[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                model.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        trace[epoch] = sq_tot / max(cnt_tot, 1)
        if not np.isfinite(trace[epoch]):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.6g", epoch, trace[epoch])
    return model, trace


# ---------------------------------------------------------------- persistence

def save_model(model: MlpModel, path, extra: dict | None = None) -> Path:
    arrays = {}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
    for l, v in model.running_mean.items():
        arrays[f"running_mean/{l}"] = v
    for l, v in model.running_var.items():
        arrays[f"running_var/{l}"] = v
    for k, v in model.adam_m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in model.adam_v.items():
        arrays[f"adam_v/{k}"] = v
    if model.input_shift is not None:
        arrays["input_shift"] = model.input_shift
    if model.input_scale is not None:
        arrays["input_scale"] = model.input_scale
    meta = {"kind": "mlp_model", "spec": model.spec.to_dict(), "adam_step": model.adam_step,
            "output_scale": model.output_scale, "bn_eps": model.bn_eps,
            "bn_momentum": model.bn_momentum, "extra": extra or {}}
    return write_artifact(path, meta, arrays)


def load_model(path) -> tuple[MlpModel, dict]:
    manifest, arrays = read_artifact(path)
    groups: dict[str, dict] = {"param": {}, "running_mean": {}, "running_var": {},
                               "adam_m": {}, "adam_v": {}}
    for name, arr in arrays.items():
        if "/" in name:
            g, k = name.split("/", 1)
            groups[g][int(k) if g.startswith("running") else k] = arr
    model = MlpModel(MlpSpec(**manifest["spec"]), groups["param"], groups["running_mean"],
                     groups["running_var"], groups["adam_m"], groups["adam_v"],
                     manifest["adam_step"], arrays.get("input_shift"), arrays.get("input_scale"),
                     manifest["output_scale"], manifest["bn_eps"], manifest["bn_momentum"])
    return model, manifest.get("extra", {})
