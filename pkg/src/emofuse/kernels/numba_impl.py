"""Numba-jitted implementations of the hot kernels.

Same contracts as `numpy_impl`. GEMMs go through np.dot (BLAS); the
elementwise chains around them are fused loops, which is where the JIT
wins at desk-scale batch sizes. Compiled artifacts are disk-cached.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def adapter_forward(x, w_down, b_down, w_up, b_up):
    z1 = x @ w_down
    b, dh = z1.shape
    a1 = np.empty((b, dh))
    for i in range(b):
        for j in range(dh):
            z = z1[i, j] + b_down[j]
            z1[i, j] = z
            a1[i, j] = z if z > 0.0 else 0.0
    z2 = a1 @ w_up
    da = z2.shape[1]
    y = np.empty((b, da))
    for i in range(b):
        for j in range(da):
            z = z2[i, j] + b_up[j]
            z2[i, j] = z
            y[i, j] = x[i, j] + (z if z > 0.0 else 0.0)
    return y, z1, z2


@njit(**_JIT)
def adapter_backward(dy, x, z1, z2, w_down, w_up):
    b, da = dy.shape
    dh = z1.shape[1]
    dz2 = np.empty((b, da))
    db_up = np.zeros(da)
    for i in range(b):
        for j in range(da):
            g = dy[i, j] if z2[i, j] > 0.0 else 0.0
            dz2[i, j] = g
            db_up[j] += g
    a1 = np.empty((b, dh))
    for i in range(b):
        for j in range(dh):
            z = z1[i, j]
            a1[i, j] = z if z > 0.0 else 0.0
    dw_up = a1.T @ dz2
    da1 = dz2 @ w_up.T
    dz1 = np.empty((b, dh))
    db_down = np.zeros(dh)
    for i in range(b):
        for j in range(dh):
            g = da1[i, j] if z1[i, j] > 0.0 else 0.0
            dz1[i, j] = g
            db_down[j] += g
    dw_down = x.T @ dz1
    dx = dy + dz1 @ w_down.T
    return dx, dw_down, db_down, dw_up, db_up


@njit(**_JIT)
def mlp2_forward(x, w1, b1, w2, b2, outer_relu):
    z1 = x @ w1
    b, dh = z1.shape
    a1 = np.empty((b, dh))
    for i in range(b):
        for j in range(dh):
            z = z1[i, j] + b1[j]
            z1[i, j] = z
            a1[i, j] = z if z > 0.0 else 0.0
    z2 = a1 @ w2
    dout = z2.shape[1]
    y = np.empty((b, dout))
    for i in range(b):
        for j in range(dout):
            z = z2[i, j] + b2[j]
            z2[i, j] = z
            if outer_relu:
                y[i, j] = z if z > 0.0 else 0.0
            else:
                y[i, j] = z
    return y, z1, z2


@njit(**_JIT)
def mlp2_backward(dy, x, z1, z2, w1, w2, outer_relu):
    b, dout = dy.shape
    dh = z1.shape[1]
    dz2 = np.empty((b, dout))
    db2 = np.zeros(dout)
    for i in range(b):
        for j in range(dout):
            if outer_relu and z2[i, j] <= 0.0:
                g = 0.0
            else:
                g = dy[i, j]
            dz2[i, j] = g
            db2[j] += g
    a1 = np.empty((b, dh))
    for i in range(b):
        for j in range(dh):
            z = z1[i, j]
            a1[i, j] = z if z > 0.0 else 0.0
    dw2 = a1.T @ dz2
    da1 = dz2 @ w2.T
    dz1 = np.empty((b, dh))
    db1 = np.zeros(dh)
    for i in range(b):
        for j in range(dh):
            g = da1[i, j] if z1[i, j] > 0.0 else 0.0
            dz1[i, j] = g
            db1[j] += g
    dw1 = x.T @ dz1
    dx = dz1 @ w1.T
    return dx, dw1, db1, dw2, db2


@njit(**_JIT)
def softmax_rows(z):
    b, k = z.shape
    p = np.empty((b, k))
    for i in range(b):
        m = z[i, 0]
        for j in range(1, k):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(k):
            e = np.exp(z[i, j] - m)
            p[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(k):
            p[i, j] *= inv
    return p


@njit(**_JIT)
def softmax_xent(logits, labels):
    b, k = logits.shape
    d = np.empty((b, k))
    loss = 0.0
    inv_b = 1.0 / b
    for i in range(b):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            e = np.exp(logits[i, j] - m)
            d[i, j] = e
            s += e
        loss += m + np.log(s) - logits[i, labels[i]]
        inv = inv_b / s
        for j in range(k):
            d[i, j] *= inv
        d[i, labels[i]] -= inv_b
    return loss * inv_b, d


@njit(**_JIT)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay, coupled):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(p.shape[0]):
        gi = g[i]
        if coupled and weight_decay != 0.0:
            gi += weight_decay * p[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        pi = p[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        if not coupled and weight_decay != 0.0:
            pi -= lr * weight_decay * pi
        p[i] = pi
