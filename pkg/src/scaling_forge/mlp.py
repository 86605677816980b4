"""Fully-connected regression network, written against plain numpy.

Architecture: the flattened image pair (n_i = 20,000 values) passes through
n_l hidden layers of n_n neurons, GELU after each, then a final affine map to
one scalar.  Training follows a fixed protocol: Adam, learning rate 0.001
decayed by 0.98 every epoch, at most 200 epochs with early stopping after 100
epochs without validation improvement, best-epoch weights restored.

Weights are float32; mean squared errors below PRECISION_FLOOR_MSE are at the
32-bit noise floor and flagged as such.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

PRECISION_FLOOR_MSE = 1.9e-7

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    n_i: int = 20_000    # input width
    n_l: int = 3         # hidden layers
    n_n: int = 16        # neurons per hidden layer

    def __post_init__(self):
        if self.n_i < 1 or self.n_l < 1 or self.n_n < 1:
            raise ValueError(f"spec dimensions must be >= 1, got {self}")

    @property
    def arch_id(self) -> str:
        return f"fcn_nl{self.n_l}_nn{self.n_n}"

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.n_i] + [self.n_n] * self.n_l + [1]
        return list(zip(dims[:-1], dims[1:]))


def param_count(spec: MlpSpec) -> int:
    """Total trainable weights and biases:
    n_n * (n_i + (n_l - 1) n_n + 1 + n_l) + 1."""
    return spec.n_n * (spec.n_i + (spec.n_l - 1) * spec.n_n + 1 + spec.n_l) + 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    lr_decay: float = 0.98
    max_epochs: int = 200
    patience: int = 100
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpModel":
        return MlpModel(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class TrainReport:
    best_val_loss: float
    best_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    epochs_run: int
    stopped_early: bool
    test_mse: float | None = None
    at_precision_floor: bool = False
    wall_time_s: float = 0.0


def init_model(spec: MlpSpec, seed: int, dtype=np.float32) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return MlpModel(spec=spec, weights=weights, biases=biases)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF form x * Phi(x)."""
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    return phi + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _check_inputs(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    if x.shape[1] != model.spec.n_i:
        raise ValueError(f"input width {x.shape[1]} != n_i={model.spec.n_i}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in network input")
    return x


def forward(model: MlpModel, x) -> np.ndarray:
    """Predictions (batch,) for inputs (batch, n_i) or a single n_i-vector."""
    x = _check_inputs(model, x)
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < last:
            h = gelu(h)
    return h[:, 0]


def loss_and_grad(model: MlpModel, x, y) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Batch MSE and its gradients for every weight matrix and bias vector."""
    x = _check_inputs(model, x)
    y = np.asarray(y, dtype=model.dtype).reshape(-1)
    if len(y) != len(x):
        raise ValueError(f"batch size mismatch: {len(x)} inputs, {len(y)} targets")
    if len(x) == 0:
        raise ValueError("empty batch")

    last = len(model.weights) - 1
    acts = [x]          # inputs to each affine layer
    pre = []            # pre-activations of hidden layers
    h = x
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        if k < last:
            pre.append(z)
            h = gelu(z)
            acts.append(h)
        else:
            h = z
    pred = h[:, 0]
    resid = pred - y
    mse = float(np.mean(resid.astype(np.float64) ** 2))

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.weights)
    delta = (2.0 / len(x)) * resid.astype(model.dtype)[:, None]
    for k in range(last, -1, -1):
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ model.weights[k].T) * _gelu_grad(pre[k - 1])
    return mse, grads


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: MlpModel) -> "AdamState":
        zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
        return cls(t=0, m=zeros(model.weights) + zeros(model.biases),
                   v=zeros(model.weights) + zeros(model.biases))


def adam_step(model: MlpModel, state: AdamState,
              grads: list[tuple[np.ndarray, np.ndarray]], lr: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    params = model.weights + model.biases
    flat_grads = [g for g, _ in grads] + [g for _, g in grads]
    for p, g, m, v in zip(params, flat_grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def evaluate(model: MlpModel, x, y, chunk: int = 1024) -> float:
    """Mean squared error over a fixed set; pure."""
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    sq_sum = 0.0
    for lo in range(0, len(x), chunk):
        pred = forward(model, x[lo:lo + chunk]).astype(np.float64)
        sq_sum += float(np.sum((pred - y[lo:lo + chunk]) ** 2))
    return sq_sum / len(x)


def train(spec: MlpSpec, train_x, train_y, val_x, val_y,
          cfg: TrainConfig | None = None,
          test_x=None, test_y=None) -> tuple[MlpModel, TrainReport]:
    """Run the full training protocol; deterministic per cfg.seed.

    Inputs must already be standardized and targets normalized.  Returns the
    best-validation model and the per-epoch history; a non-finite loss aborts
    with :class:`TrainingDiverged`.
    """
    if cfg is None:
        cfg = TrainConfig()
    t0 = time.perf_counter()
    train_x = np.asarray(train_x, dtype=np.float32)
    val_x = np.asarray(val_x, dtype=np.float32)
    train_y = np.asarray(train_y, dtype=np.float32).reshape(-1)
    val_y = np.asarray(val_y, dtype=np.float32).reshape(-1)
    n = len(train_x)
    if n == 0 or len(val_x) == 0:
        raise ValueError("train and validation sets must be non-empty")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(spec, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    state = AdamState.for_model(model)

    best = model.copy()
    best_val = math.inf
    best_epoch = -1
    waited = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    stopped_early = False

    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        sq_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            mse, grads = loss_and_grad(model, train_x[idx], train_y[idx])
            if not math.isfinite(mse):
                raise TrainingDiverged(
                    f"non-finite train loss at epoch {epoch}, lr={lr:.3e}, "
                    f"batch offset {lo}"
                )
            adam_step(model, state, grads, lr, cfg)
            sq_sum += mse * len(idx)
        train_losses.append(sq_sum / n)

        val_mse = evaluate(model, val_x, val_y)
        if not math.isfinite(val_mse):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_mse)

        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best = model.copy()
            waited = 0
        else:
            waited += 1
            if waited >= cfg.patience:
                stopped_early = True
                break

    report = TrainReport(
        best_val_loss=best_val,
        best_epoch=best_epoch,
        train_losses=train_losses,
        val_losses=val_losses,
        epochs_run=len(val_losses),
        stopped_early=stopped_early,
    )
    if test_x is not None:
        report.test_mse = evaluate(best, test_x, test_y)
        report.at_precision_floor = report.test_mse <= PRECISION_FLOOR_MSE
    report.wall_time_s = time.perf_counter() - t0
    return best, report


_CKPT_MAGIC = b"SFCK"
_CKPT_HEADER = struct.Struct("<4sIIII")  # magic, version, n_i, n_l, n_n


def save_model(model: MlpModel, path) -> None:
    """Checkpoint: header with the spec, then all weights and biases as one
    little-endian float32 blob in layer order."""
    with open(path, "wb") as f:
        s = model.spec
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, 1, s.n_i, s.n_l, s.n_n))
        for w, b in zip(model.weights, model.biases):
            f.write(w.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n_i, n_l, n_n = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC or version != 1:
        raise ValueError(f"{path}: not a model checkpoint")
    spec = MlpSpec(n_i=n_i, n_l=n_l, n_n=n_n)
    off = _CKPT_HEADER.size
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes():
        weights.append(
            np.frombuffer(raw, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out).copy()
        )
        off += fan_in * fan_out * 4
        biases.append(np.frombuffer(raw, "<f4", fan_out, off).copy())
        off += fan_out * 4
    if off != len(raw):
        raise ValueError(f"{path}: checkpoint size mismatch")
    return MlpModel(spec=spec, weights=weights, biases=biases)
