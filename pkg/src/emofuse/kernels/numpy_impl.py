"""Pure-NumPy reference implementations of the hot kernels.

Same contracts as `numba_impl`; selected via the EMOFUSE_NUMBA env flag
(see package __init__). All arrays are float64, C-contiguous; labels int64.
"""

import numpy as np


def adapter_forward(x, w_down, b_down, w_up, b_up):
    """Residual bottleneck: y = x + relu(relu(x@w_down + b_down)@w_up + b_up).

    x (B, da) -> (y (B, da), z1 (B, dh), z2 (B, da)); z1/z2 are pre-ReLU.
    """
    z1 = x @ w_down + b_down
    z2 = np.maximum(z1, 0.0) @ w_up + b_up
    y = x + np.maximum(z2, 0.0)
    return y, z1, z2


def adapter_backward(dy, x, z1, z2, w_down, w_up):
    """Backward of adapter_forward. Returns (dx, dw_down, db_down, dw_up, db_up)."""
    dz2 = dy * (z2 > 0.0)
    a1 = np.maximum(z1, 0.0)
    dw_up = a1.T @ dz2
    db_up = dz2.sum(axis=0)
    dz1 = (dz2 @ w_up.T) * (z1 > 0.0)
    dw_down = x.T @ dz1
    db_down = dz1.sum(axis=0)
    dx = dy + dz1 @ w_down.T
    return dx, dw_down, db_down, dw_up, db_up


def mlp2_forward(x, w1, b1, w2, b2, outer_relu):
    """Two affine layers with an interior ReLU; outer ReLU optional.

    x (B, din) -> (y (B, dout), z1 (B, dh), z2 (B, dout)); z1/z2 pre-activation.
    """
    z1 = x @ w1 + b1
    z2 = np.maximum(z1, 0.0) @ w2 + b2
    y = np.maximum(z2, 0.0) if outer_relu else z2
    return y, z1, z2


def mlp2_backward(dy, x, z1, z2, w1, w2, outer_relu):
    """Backward of mlp2_forward. Returns (dx, dw1, db1, dw2, db2)."""
    dz2 = dy * (z2 > 0.0) if outer_relu else dy
    a1 = np.maximum(z1, 0.0)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (z1 > 0.0)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    dx = dz1 @ w1.T
    return dx, dw1, db1, dw2, db2


def softmax_rows(z):
    """Row-wise stable softmax. z (B, K) -> p (B, K), rows sum to 1."""
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over rows plus gradient w.r.t. logits.

    logits (B, K), labels (B,) int64 -> (loss, dlogits (B, K)) with
    dlogits = (softmax - onehot) / B.
    """
    b = logits.shape[0]
    rows = np.arange(b)
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    s = e.sum(axis=1)
    lse = m + np.log(s)
    loss = float(np.mean(lse - logits[rows, labels]))
    d = e / (s[:, None] * b)
    d[rows, labels] -= 1.0 / b
    return loss, d


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay, coupled):
    """One Adam step on flat views, in place.

    Moments with bias correction; weight decay is coupled (added to the
    gradient) or decoupled (applied to the freshly updated parameter).
    """
    if coupled and weight_decay != 0.0:
        g = g + weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
    if not coupled and weight_decay != 0.0:
        p -= lr * weight_decay * p
