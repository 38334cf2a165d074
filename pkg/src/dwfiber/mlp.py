"""Dense multilayer perceptron written directly against numpy.

Weights are stored (out, in) per layer.  Dropout, when enabled, is applied
to the input of the last dense layer during training only (inverted
scaling, so inference needs no correction).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")
LOSSES = ("mse", "mae")
OPTIMIZERS = ("adam", "rmsprop")

# elements per temporary in the deterministic dense product
_DET_CHUNK = 1 << 22


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpModel:
    weights: list
    biases: list
    activations: list
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValueError("weights, biases and activations must be non-empty and equally long")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.weights[i - 1].shape[0]}")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def hidden_activation(self) -> str:
        return self.activations[0] if len(self.activations) > 1 else "linear"

    @property
    def output_activation(self) -> str:
        return self.activations[-1]

    def params(self) -> list:
        """Flat parameter list [W0, b0, W1, b1, ...] (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "MlpModel":
        return MlpModel([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases],
                        list(self.activations), self.dropout_rate)

    def copy(self) -> "MlpModel":
        return self.astype(self.dtype)


def voxel_layer_dims(n: int, m: int) -> list:
    return [n, 512, 512, 512, 256, 256, m]


def neighborhood_layer_dims(n: int, m: int) -> list:
    return [27 * n, 2048, 1024, 1024, 512, 512, m]


def init_model(layer_dims, hidden_act: str = "relu", output_act: str = "sigmoid", dropout: float = 0.2,
               seed: int = 0, dtype=np.float32) -> MlpModel:
    """Uniform He-style init, W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"bad layer dims {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    acts = [hidden_act] * (len(dims) - 2) + [output_act]
    return MlpModel(weights, biases, acts, dropout)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0, out=z)
    if kind == "sigmoid":
        return expit(z, out=z)
    if kind == "tanh":
        return np.tanh(z, out=z)
    return z


def _activation_grad(a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative expressed through the activation output ``a``."""
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "sigmoid":
        return a * (1 - a)
    if kind == "tanh":
        return 1 - a * a
    return np.ones_like(a)


def _dense(x: np.ndarray, w: np.ndarray, b: np.ndarray, deterministic: bool) -> np.ndarray:
    if not deterministic:
        return x @ w.T + b
    # Row results must not depend on the batch they are computed in, which
    # BLAS does not promise; an explicit product + last-axis sum does.
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.result_type(x, w))
    rows = max(1, _DET_CHUNK // (w.shape[0] * w.shape[1]))
    for s in range(0, x.shape[0], rows):
        out[s : s + rows] = (x[s : s + rows, None, :] * w[None, :, :]).sum(axis=-1)
    out += b
    return out


def _check_input(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != model.layer_dims[0]:
        raise ValueError(f"batch of shape {batch.shape} does not fit input width {model.layer_dims[0]}")
    return batch.astype(model.dtype, copy=False)


def forward(model: MlpModel, batch, train_mode: bool = False, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> np.ndarray:
    """Network output for ``batch`` (B, in) -> (B, out).

    ``train_mode`` enables dropout and needs ``rng``.  ``deterministic``
    computes every row independently of the rest of the batch.
    """
    out, _ = _forward(model, _check_input(model, batch), train_mode, rng, deterministic)
    return out


def _forward(model, x, train_mode, rng, deterministic):
    """Returns the output and a cache (layer inputs, layer outputs, dropout mask)."""
    inputs, outputs = [], []
    mask = None
    n_layers = len(model.weights)
    for i, (w, b, kind) in enumerate(zip(model.weights, model.biases, model.activations)):
        if i == n_layers - 1 and train_mode and model.dropout_rate > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(x.shape, dtype=np.float32) < keep).astype(x.dtype) / x.dtype.type(keep)
            x = x * mask
        inputs.append(x)
        x = _activate(_dense(x, w, b, deterministic), kind)
        outputs.append(x)
    return x, (inputs, outputs, mask)


def _loss(out, targets, kind):
    diff = out - targets
    if kind == "mse":
        return float(np.mean(np.square(diff, dtype=np.float64))), 2.0 * diff / diff.size
    if kind == "mae":
        return float(np.mean(np.abs(diff), dtype=np.float64)), np.sign(diff) / diff.size
    raise ValueError(f"unknown loss {kind!r}")


def loss_and_grad(model: MlpModel, batch, targets, loss_kind: str = "mse",
                  rng: np.random.Generator | None = None, train_mode: bool = True):
    """Loss and gradients [(dW0, db0), (dW1, db1), ...] by reverse-mode chain rule."""
    x = _check_input(model, batch)
    targets = np.asarray(targets, dtype=model.dtype)
    out, (inputs, outputs, mask) = _forward(model, x, train_mode, rng, False)
    if targets.shape != out.shape:
        raise ValueError(f"targets {targets.shape} do not match outputs {out.shape}")
    loss, grad = _loss(out, targets, loss_kind)
    grad = grad.astype(model.dtype, copy=False)
    last = len(model.weights) - 1
    grads = [None] * len(model.weights)
    for i in range(last, -1, -1):
        delta = grad * _activation_grad(outputs[i], model.activations[i])
        grads[i] = (delta.T @ inputs[i], delta.sum(axis=0))
        if i:
            grad = delta @ model.weights[i]
            if i == last and mask is not None:
                grad *= mask
    return loss, grads


def gradient_check(model: MlpModel, batch, targets, loss_kind: str = "mse", h: float = 1e-5,
                   dropout_seed: int | None = 0, floor: float = 1e-10) -> float:
    """Max relative error between backprop and central differences, in float64.

    The model is copied to float64 first.  With dropout the same mask is
    drawn for every evaluation (generator reseeded from ``dropout_seed``).
    Relative error is |a - n| / max(|a| + |n|, floor).
    """
    m64 = model.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    train_mode = dropout_seed is not None and m64.dropout_rate > 0

    def run():
        rng = np.random.default_rng(dropout_seed) if train_mode else None
        return loss_and_grad(m64, x, y, loss_kind, rng=rng, train_mode=train_mode)

    _, grads = run()
    worst = 0.0
    for p, g in zip(m64.params(), _flat_grads(grads)):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = run()[0]
            flat[i] = old - h
            lm = run()[0]
            flat[i] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(gflat[i] - num) / max(abs(gflat[i]) + abs(num), floor))
    return worst


# -- optimizers ------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list, grads: list, lr_t: float) -> list:
    """In-place bias-corrected Adam update of ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr_t / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class RmspropState:
    v: list
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "RmspropState":
        return cls([np.zeros_like(p) for p in params])


def rmsprop_step(state: RmspropState, params: list, grads: list, lr: float) -> list:
    for p, g, v in zip(params, grads, state.v):
        v *= state.rho
        v += (1.0 - state.rho) * (g * g)
        p -= lr * g / (np.sqrt(v) + state.eps)
    return params


def _flat_grads(grads) -> list:
    out = []
    for gw, gb in grads:
        out += [gw, gb]
    return out


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "mse"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    lr_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


VOXEL_TRAIN = TrainConfig(learning_rate=1e-4, lr_decay=1e-6)
NEIGHBORHOOD_TRAIN = TrainConfig(learning_rate=1e-5, lr_decay=1e-6)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for e, row in enumerate(zip(self.train_loss, self.val_loss, self.seconds), start=1):
                w.writerow([e, *(f"{v:.9g}" for v in row)])


def evaluate_loss(model: MlpModel, x, y, loss_kind: str = "mse", batch_size: int = 4096) -> float:
    """Inference-mode loss over a full set, accumulated in float64."""
    total, count = 0.0, 0
    for s in range(0, x.shape[0], batch_size):
        out = forward(model, x[s : s + batch_size])
        diff = out.astype(np.float64) - np.asarray(y[s : s + batch_size], dtype=np.float64)
        total += np.sum(diff * diff) if loss_kind == "mse" else np.sum(np.abs(diff))
        count += diff.size
    return total / max(count, 1)


def split_indices(count: int, cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, 1])
    perm = rng.permutation(count)
    n_val = int(round(cfg.validation_fraction * count))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model: MlpModel, inputs, targets, cfg: TrainConfig, on_epoch=None):
    """Minibatch training; deterministic for a fixed ``cfg.seed``.

    Returns the trained model (updated in place) and its TrainHistory.
    ``on_epoch(epoch, history)`` is called after every epoch.
    """
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets have different sample counts")
    if inputs.shape[1] != model.layer_dims[0] or targets.shape[1] != model.layer_dims[-1]:
        raise ValueError(f"dataset ({inputs.shape[1]} -> {targets.shape[1]}) does not match model "
                         f"({model.layer_dims[0]} -> {model.layer_dims[-1]})")
    train_idx, val_idx = split_indices(inputs.shape[0], cfg)
    x_val = np.asarray(inputs[val_idx], dtype=model.dtype)
    y_val = np.asarray(targets[val_idx], dtype=model.dtype)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    dropout_rng = np.random.default_rng([cfg.seed, 3])
    params = model.params()
    if cfg.optimizer == "adam":
        state = AdamState.like(params)
    else:
        state = RmspropState.like(params)
    history = TrainHistory()
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        total, seen = 0.0, 0
        for bi, s in enumerate(range(0, order.size, cfg.batch_size)):
            idx = np.sort(order[s : s + cfg.batch_size])
            loss, grads = loss_and_grad(model, inputs[idx], targets[idx], cfg.loss, dropout_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            lr_t = cfg.learning_rate / (1.0 + cfg.lr_decay * iteration)
            if cfg.optimizer == "adam":
                adam_step(state, params, _flat_grads(grads), lr_t)
            else:
                rmsprop_step(state, params, _flat_grads(grads), lr_t)
            iteration += 1
            total += loss * idx.size
            seen += idx.size
        train_loss = total / max(seen, 1)
        val_loss = evaluate_loss(model, x_val, y_val, cfg.loss) if val_idx.size else float("nan")
        if not np.isfinite(train_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d train %.6g val %.6g (%.1fs)", epoch, cfg.epochs, train_loss, val_loss,
                 history.seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch, history)
    return model, history


# -- hyperparameter sweep ----------------------------------------------------

@dataclass
class SweepPreset:
    name: str
    train: TrainConfig
    output_activation: str = "sigmoid"
    layer_dims: list | None = None  # None: voxel preset for the data width


def hyperparameter_grid(base: TrainConfig) -> list:
    """{mse, mae} x {sigmoid, tanh} x {adam, rmsprop} variants of ``base``."""
    presets = []
    for loss in LOSSES:
        for act in ("sigmoid", "tanh"):
            for opt in OPTIMIZERS:
                presets.append(SweepPreset(f"{loss}-{act}-{opt}", replace(base, loss=loss, optimizer=opt), act))
    return presets


def detect_plateau(val_loss, window: int = 10, tol: float = 1e-6) -> bool:
    """True if validation loss moves by less than ``tol`` (relative) over ``window`` epochs."""
    v = np.asarray(val_loss, dtype=np.float64)
    if v.size <= window:
        return False
    before, after = v[:-window], v[window:]
    scale = np.maximum(np.abs(before), np.finfo(float).tiny)
    return bool(np.any(np.abs(after - before) <= tol * scale))


SWEEP_COLUMNS = ["preset", "loss", "output_activation", "optimizer", "learning_rate", "repeat", "seed",
                 "epoch", "train_loss", "val_loss", "seconds", "plateau"]


def sweep(presets, inputs, targets, repeats: int = 5, base_seed: int = 0, hidden_act: str = "relu",
          dropout: float = 0.2):
    """Train every preset ``repeats`` times with distinct seeds.

    Returns (rows, runs): ``rows`` are per-epoch records in SWEEP_COLUMNS
    order, ``runs`` one summary dict per training run.
    """
    if not presets:
        raise ValueError("sweep needs at least one preset")
    rows, runs = [], []
    n, m = inputs.shape[1], targets.shape[1]
    for p_i, preset in enumerate(presets):
        dims = preset.layer_dims or voxel_layer_dims(n, m)
        for r in range(repeats):
            seed = base_seed + 1000 * p_i + r
            model = init_model(dims, hidden_act, preset.output_activation, dropout, seed=seed)
            cfg = replace(preset.train, seed=seed)
            _, hist = train(model, inputs, targets, cfg)
            plateau = detect_plateau(hist.val_loss)
            runs.append({"preset": preset.name, "repeat": r, "seed": seed, "plateau": plateau,
                         "final_val_loss": hist.val_loss[-1], "history": hist})
            for e in range(len(hist)):
                rows.append([preset.name, cfg.loss, preset.output_activation, cfg.optimizer,
                             cfg.learning_rate, r, seed, e + 1, hist.train_loss[e], hist.val_loss[e],
                             hist.seconds[e], int(plateau)])
    return rows, runs


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)


def train_config_from_dict(d: dict) -> TrainConfig:
    known = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
    return TrainConfig(**known)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
