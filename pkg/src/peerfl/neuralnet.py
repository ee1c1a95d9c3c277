"""Two-layer LSTM with a dense softmax head, trained by plain SGD.

The model is stored as one flat float64 vector (``ParamVector``) so it can be
averaged and broadcast as-is. Heavy lifting (window forward, BPTT, the SGD
epoch loop) goes through ``peerfl._backend.kernels``; the small per-step
functions here are plain NumPy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._backend import kernels
from .sensing import Dataset

LOG_FLOOR = 1e-12
INIT_SCALE = 0.1
DEFAULT_CLIP = 5.0


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite during SGD."""

    def __init__(self, epoch, metrics):
        super().__init__(f"non-finite loss or gradient in epoch {epoch}")
        self.epoch = epoch
        self.metrics = metrics


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 2
    p_units: int = 5
    q_units: int = 5
    output_dim: int = 2

    def __post_init__(self):
        if self.output_dim != 2:
            raise ValueError("only two-state prediction (output_dim=2) is supported")
        if min(self.input_dim, self.p_units, self.q_units) < 1:
            raise ValueError("architecture dimensions must be positive")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        m, P, Q = self.input_dim, self.p_units, self.q_units
        return [
            ("W1", (4 * P, m + P)),
            ("b1", (4 * P,)),
            ("W2", (4 * Q, P + Q)),
            ("b2", (4 * Q,)),
            ("Wd", (self.output_dim, Q)),
            ("bd", (self.output_dim,)),
        ]

    @property
    def n_params(self) -> int:
        m, P, Q = self.input_dim, self.p_units, self.q_units
        return 4 * (P * (m + P) + P) + 4 * (Q * (P + Q) + Q) + (2 * Q + 2)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.input_dim, self.p_units, self.q_units


T_S = Architecture(2, 5, 5)
T_B = Architecture(2, 60, 120)
ARCHITECTURES = {"t_s": T_S, "t_b": T_B}


@dataclass
class ParamVector:
    arch: Architecture
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.shape[0] != self.arch.n_params:
            raise ValueError(
                f"{v.shape[0]} values for an architecture with {self.arch.n_params} parameters"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter values must be finite")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> ParamVector:
        return ParamVector(self.arch, self.values.copy())

    def tensors(self) -> dict[str, np.ndarray]:
        """Views into ``values`` keyed W1, b1, W2, b2, Wd, bd."""
        out, pos = {}, 0
        for name, shape in self.arch.layout():
            n = int(np.prod(shape))
            out[name] = self.values[pos:pos + n].reshape(shape)
            pos += n
        return out


@dataclass
class LstmState:
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray

    @classmethod
    def zeros(cls, arch: Architecture) -> LstmState:
        P, Q = arch.p_units, arch.q_units
        return cls(np.zeros(P), np.zeros(P), np.zeros(Q), np.zeros(Q))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    wall_time_ms: float


def init_params(arch: Architecture, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    return ParamVector(arch, rng.uniform(-INIT_SCALE, INIT_SCALE, arch.n_params))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell_step(W, b, x, h_prev, c_prev):
    """One LSTM step. ``W`` is (4H, nin+H) with gates ordered f, i, g, o."""
    H = h_prev.shape[0]
    if W.shape != (4 * H, x.shape[0] + H) or b.shape != (4 * H,) or c_prev.shape != (H,):
        raise ValueError("LSTM cell dimension mismatch")
    z = W @ np.concatenate([x, h_prev]) + b
    f = _sigmoid(z[:H])
    i = _sigmoid(z[H:2 * H])
    g = np.tanh(z[2 * H:3 * H])
    o = _sigmoid(z[3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _as_window(params: ParamVector, window) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != params.arch.input_dim:
        raise ValueError(f"window must be (T>0, {params.arch.input_dim}), got {x.shape}")
    return x


def forward(params: ParamVector, window) -> tuple[np.ndarray, LstmState]:
    """Logits (T, 2) for one window starting from a zero state."""
    x = _as_window(params, window)
    w = params.tensors()
    st = LstmState.zeros(params.arch)
    logits = np.empty((x.shape[0], 2))
    for t in range(x.shape[0]):
        st.h1, st.c1 = lstm_cell_step(w["W1"], w["b1"], x[t], st.h1, st.c1)
        st.h2, st.c2 = lstm_cell_step(w["W2"], w["b2"], st.h1, st.h2, st.c2)
        logits[t] = w["Wd"] @ st.h2 + w["bd"]
    return logits, st


def batch_logits(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Logits (B, T, 2) for a stack of windows, through the fast kernels."""
    m, P, Q = params.arch.dims
    return kernels.forward_logits(params.values, m, P, Q, np.ascontiguousarray(inputs, dtype=np.float64))


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("softmax input contains NaN")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(pred, target: int) -> float:
    """``-log pred[target]`` with a 1e-12 floor; ``pred`` must be a PMF."""
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("prediction is not a probability vector")
    if not 0 <= target < p.shape[0]:
        raise ValueError("target out of range")
    return float(-np.log(max(p[target], LOG_FLOOR)))


def backward(params: ParamVector, window, targets) -> ParamVector:
    """Exact gradient of the mean per-step cross-entropy.

    ``window`` may be one window (T, m) or a batch (B, T, m); for a batch the
    result is the mean of the per-window gradients.
    """
    x = np.asarray(window, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3 or y.shape != x.shape[:2] or x.shape[2] != params.arch.input_dim:
        raise ValueError("window/targets shape mismatch")
    m, P, Q = params.arch.dims
    total = np.zeros(params.arch.n_params)
    g = np.empty(params.arch.n_params)
    for xb, yb in zip(x, y):
        kernels.loss_and_grad(params.values, m, P, Q, np.ascontiguousarray(xb), np.ascontiguousarray(yb), g)
        total += g
    return ParamVector(params.arch, total / x.shape[0])


def window_loss(params: ParamVector, window, targets) -> float:
    """Mean per-step cross-entropy of one window."""
    x = _as_window(params, window)
    y = np.ascontiguousarray(targets, dtype=np.int64)
    m, P, Q = params.arch.dims
    loss, _ = kernels.loss_and_grad(params.values, m, P, Q, np.ascontiguousarray(x), y, np.empty(len(params)))
    return float(loss)


def predict(params: ParamVector, window) -> np.ndarray:
    """Class index per step; ties go to class 0 (idle)."""
    x = np.asarray(window, dtype=np.float64)
    logits = batch_logits(params, x[None] if x.ndim == 2 else x)
    pred = (logits[..., 1] > logits[..., 0]).astype(np.int64)
    return pred[0] if x.ndim == 2 else pred


def evaluate(params: ParamVector, data: Dataset) -> float:
    """Per-step prediction accuracy over every window of ``data``."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(params, data.inputs) == data.targets))


def train(
    params: ParamVector,
    dataset: Dataset,
    epochs: int,
    learning_rate: float,
    seed: int,
    val: Optional[Dataset] = None,
    clip: float = DEFAULT_CLIP,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    target_train_acc: Optional[float] = None,
) -> tuple[ParamVector, list[EpochMetrics]]:
    """Plain SGD, one update per window, window order reshuffled every epoch.

    Training accuracy is counted on the fly (prediction before each update).
    ``val_acc`` is NaN when no validation set is given. With
    ``target_train_acc`` set, training stops after the first epoch whose
    training accuracy reaches it.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    theta = params.values.copy()
    m, P, Q = params.arch.dims
    X = np.ascontiguousarray(dataset.inputs, dtype=np.float64)
    Y = np.ascontiguousarray(dataset.targets, dtype=np.int64)
    n_steps = Y.size
    rng = np.random.default_rng(seed)
    history: list[EpochMetrics] = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset)).astype(np.int64)
        loss_sum, correct, ok = kernels.train_epoch(theta, m, P, Q, X, Y, order, learning_rate, clip)
        if not ok:
            raise TrainingDiverged(epoch, history)
        current = ParamVector(params.arch, theta.copy())
        val_acc = evaluate(current, val) if val is not None else float("nan")
        rec = EpochMetrics(
            epoch,
            loss_sum / len(dataset),
            correct / n_steps,
            val_acc,
            (time.perf_counter() - t0) * 1e3,
        )
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if target_train_acc is not None and rec.train_acc >= target_train_acc:
            break
    return ParamVector(params.arch, theta), history
