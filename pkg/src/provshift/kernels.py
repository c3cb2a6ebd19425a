"""Hot numeric kernels for the one-hidden-layer model and optimizers.

Every function here is shape-stable and allocation-light so numba can
compile it; with ``PROVSHIFT_NUMBA=0`` the same code runs as plain numpy.
Activation ids: 0 = tanh, 1 = relu, 2 = linear.
"""

import numpy as np

from .backend import njit


@njit(cache=True)
def hidden_forward(X, W1, b1, act_id):
    """Featurizer pass: returns (pre-activation S1, activation H)."""
    S1 = np.dot(X, W1) + b1
    if act_id == 0:
        H = np.tanh(S1)
    elif act_id == 1:
        H = np.maximum(S1, 0.0)
    else:
        H = S1
    return S1, H


@njit(cache=True)
def linear_forward(H, W2, b2):
    return np.dot(H, W2) + b2


@njit(cache=True)
def softmax2(logits):
    n = logits.shape[0]
    k = logits.shape[1]
    out = np.empty_like(logits)
    for i in range(n):
        m = logits[i, 0]
        for c in range(1, k):
            if logits[i, c] > m:
                m = logits[i, c]
        s = 0.0
        for c in range(k):
            e = np.exp(logits[i, c] - m)
            out[i, c] = e
            s += e
        for c in range(k):
            out[i, c] /= s
    return out


@njit(cache=True)
def activation_grad(S1, H, act_id):
    if act_id == 0:
        return 1.0 - H * H
    elif act_id == 1:
        return np.where(S1 > 0.0, 1.0, 0.0)
    return np.ones_like(S1)


@njit(cache=True)
def dense_backward(inp, dout):
    """Gradients of a dense layer: (gW, gb) for out = inp @ W + b."""
    gW = np.dot(np.ascontiguousarray(inp.T), dout)
    gb = np.sum(dout, axis=0)
    return gW, gb


@njit(cache=True)
def backprop_hidden(X, S1, H, W1, dH, act_id):
    """Featurizer gradients from an upstream gradient on H."""
    dS1 = dH * activation_grad(S1, H, act_id)
    gW1, gb1 = dense_backward(X, dS1)
    return gW1, gb1


@njit(cache=True)
def sgd_update(p, g, lr, wd):
    """Decoupled weight decay SGD, in place on flat arrays."""
    for i in range(p.size):
        p[i] -= lr * wd * p[i] + lr * g[i]


@njit(cache=True)
def adamw_update(p, g, m, v, lr, wd, beta1, beta2, eps, bc1, bc2):
    """Adam with decoupled weight decay, in place on flat arrays.

    bc1/bc2 are the bias-correction denominators 1 - beta^t.
    """
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * wd * p[i] + lr * mhat / (np.sqrt(vhat) + eps)
