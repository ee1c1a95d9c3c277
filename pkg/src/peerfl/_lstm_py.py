"""Pure NumPy LSTM kernels.

Fallback for the compiled ``_lstm_ext`` module; both expose the same four
functions with the same signatures and must agree to rounding error.

Parameter layout (flat float64 vector)::

    W1 (4P, m+P)  b1 (4P)  W2 (4Q, P+Q)  b2 (4Q)  Wd (2, Q)  bd (2)

Gate blocks inside each LSTM weight matrix are ordered forget, input,
candidate, output. Columns are ``[layer input, previous hidden]``.
"""

import numpy as np

N_OUT = 2
LOG_FLOOR = 1e-12


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def unpack(theta, m, P, Q):
    sizes = [
        ("W1", (4 * P, m + P)),
        ("b1", (4 * P,)),
        ("W2", (4 * Q, P + Q)),
        ("b2", (4 * Q,)),
        ("Wd", (N_OUT, Q)),
        ("bd", (N_OUT,)),
    ]
    out = {}
    pos = 0
    for name, shape in sizes:
        n = int(np.prod(shape))
        out[name] = theta[pos:pos + n].reshape(shape)
        pos += n
    if pos != theta.shape[0]:
        raise ValueError(f"parameter vector has {theta.shape[0]} values, expected {pos}")
    return out


def _layer_forward(W, b, xs, H):
    """Run one LSTM layer over ``xs`` of shape (B, T, nin)."""
    B, T, nin = xs.shape
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = {
        "hin": np.empty((B, T, nin + H)),
        "gates": np.empty((B, T, 4 * H)),
        "c_prev": np.empty((B, T, H)),
        "tc": np.empty((B, T, H)),
    }
    hs = np.empty((B, T, H))
    for t in range(T):
        hin = np.concatenate([xs[:, t], h], axis=1)
        z = hin @ W.T + b
        a = np.empty_like(z)
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        cache["c_prev"][:, t] = c
        c = a[:, :H] * c + a[:, H:2 * H] * a[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = a[:, 3 * H:] * tc
        cache["hin"][:, t] = hin
        cache["gates"][:, t] = a
        cache["tc"][:, t] = tc
        hs[:, t] = h
    return hs, cache


def _layer_backward(W, cache, dhs, H, dW, db):
    """Backpropagate ``dhs`` (B, T, H) through one layer; returns d(input)."""
    hin, gates, c_prev, tc = cache["hin"], cache["gates"], cache["c_prev"], cache["tc"]
    B, T, _ = dhs.shape
    nin = hin.shape[2] - H
    dxs = np.empty((B, T, nin))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        a = gates[:, t]
        f, i, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc[:, t] ** 2)
        dz = np.empty((B, 4 * H))
        dz[:, :H] = dc * c_prev[:, t] * f * (1.0 - f)
        dz[:, H:2 * H] = dc * g * i * (1.0 - i)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc[:, t] * o * (1.0 - o)
        dW += dz.T @ hin[:, t]
        db += dz.sum(axis=0)
        dhin = dz @ W
        dxs[:, t] = dhin[:, :nin]
        dh_next = dhin[:, nin:]
        dc_next = dc * f
    return dxs


def _forward(theta, m, P, Q, X):
    w = unpack(theta, m, P, Q)
    h1, c1 = _layer_forward(w["W1"], w["b1"], X, P)
    h2, c2 = _layer_forward(w["W2"], w["b2"], h1, Q)
    logits = h2 @ w["Wd"].T + w["bd"]
    return logits, (w, h2, c1, c2)


def forward_logits(theta, m, P, Q, X):
    """Logits of shape (B, T, 2) for a batch of windows ``X`` (B, T, m)."""
    X = np.asarray(X, dtype=np.float64)
    logits, _ = _forward(np.asarray(theta, dtype=np.float64), m, P, Q, X)
    return logits


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(theta, m, P, Q, X, y, grad):
    """Mean cross-entropy over one window and its gradient (written to ``grad``).

    ``X`` is (T, m), ``y`` is (T,) integer targets. Returns ``(loss, n_correct)``.
    """
    X = np.asarray(X, dtype=np.float64)[None]
    y = np.asarray(y)
    T = X.shape[1]
    logits, (w, h2, c1, c2) = _forward(theta, m, P, Q, X)
    prob = _softmax(logits[0])
    rows = np.arange(T)
    loss = -np.log(np.maximum(prob[rows, y], LOG_FLOOR)).mean()
    correct = int(np.count_nonzero((logits[0, :, 1] > logits[0, :, 0]).astype(np.int64) == y))

    g = unpack(grad, m, P, Q)
    grad[:] = 0.0
    dlogit = prob.copy()
    dlogit[rows, y] -= 1.0
    dlogit /= T
    g["Wd"][:] = dlogit.T @ h2[0]
    g["bd"][:] = dlogit.sum(axis=0)
    dh2 = (dlogit @ w["Wd"])[None]
    dh1 = _layer_backward(w["W2"], c2, dh2, Q, g["W2"], g["b2"])
    _layer_backward(w["W1"], c1, dh1, P, g["W1"], g["b1"])
    return float(loss), correct


def train_epoch(theta, m, P, Q, X, Y, order, lr, clip):
    """One SGD pass over windows in ``order``; updates ``theta`` in place.

    Returns ``(loss_sum, n_correct, ok)``; ``ok`` is False as soon as a
    non-finite loss or gradient appears, in which case the pass stops.
    """
    grad = np.empty_like(theta)
    loss_sum = 0.0
    correct = 0
    for k in order:
        loss, c = loss_and_grad(theta, m, P, Q, X[k], Y[k], grad)
        norm = float(np.sqrt(grad @ grad))
        if not (np.isfinite(loss) and np.isfinite(norm)):
            return loss_sum, correct, False
        if clip > 0 and norm > clip:
            grad *= clip / norm
        theta -= lr * grad
        loss_sum += loss
        correct += c
    return loss_sum, correct, True
