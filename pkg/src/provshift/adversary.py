"""Provenance discriminator for adversarial training.

A ReLU MLP (configurable depth/width/dropout) with manual gradients,
including the double-backprop term needed for the input-gradient penalty
mean_i ||d CE_i / d h_i||^2. ReLU and dropout masks are treated as
constants when differentiating the penalty, which is exact almost
everywhere.
"""

import numpy as np

from .rng import rng_from
from .kernels import adamw_update, softmax2


class AdamBuffers:
    """Adam with decoupled weight decay over a flat list of arrays."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            adamw_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                         m.reshape(-1), v.reshape(-1),
                         self.lr, self.weight_decay, self.beta1, self.beta2,
                         self.eps, bc1, bc2)


class Discriminator:
    """MLP h -> z with `depth` hidden layers of `width` units."""

    def __init__(self, d_in, width, depth, dropout, seed):
        rng = rng_from(seed)
        self.depth = depth
        self.dropout = dropout
        dims = [d_in] + [width] * depth
        self.Ws = [rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
                   for i in range(depth)]
        self.bs = [np.zeros(dims[i + 1]) for i in range(depth)]
        self.Wo = rng.standard_normal((dims[-1], 2)) / np.sqrt(dims[-1])
        self.bo = np.zeros(2)
        self._drop_rng = rng

    def parameters(self):
        return self.Ws + self.bs + [self.Wo, self.bo]

    def forward(self, Hin, train=False):
        """Returns (probs, cache). Dropout is active only when train."""
        a = np.ascontiguousarray(Hin, dtype=np.float64)
        acts = [a]
        masks = []
        for W, b in zip(self.Ws, self.bs):
            s = a @ W + b
            m = (s > 0).astype(np.float64)
            if train and self.dropout > 0.0:
                keep = (self._drop_rng.random(s.shape) >= self.dropout)
                m = m * keep / (1.0 - self.dropout)
            a = s * m
            acts.append(a)
            masks.append(m)
        logits = a @ self.Wo + self.bo
        probs = softmax2(np.ascontiguousarray(logits))
        return probs, {"acts": acts, "masks": masks, "probs": probs}

    def _backward_to_input(self, cache, dlogits):
        """Backprop a logit gradient to the input, collecting parameter
        gradients along the way. Returns (dHin, gWs, gbs, gWo, gbo)."""
        acts, masks = cache["acts"], cache["masks"]
        gWo = acts[-1].T @ dlogits
        gbo = dlogits.sum(axis=0)
        d_a = dlogits @ self.Wo.T
        gWs = [None] * self.depth
        gbs = [None] * self.depth
        for l in range(self.depth - 1, -1, -1):
            d_s = d_a * masks[l]
            gWs[l] = acts[l].T @ d_s
            gbs[l] = d_s.sum(axis=0)
            d_a = d_s @ self.Ws[l].T
        return d_a, gWs, gbs, gWo, gbo

    def loss_and_grads(self, Hin, targets, train=False, grad_penalty=0.0):
        """Mean CE on provenance targets.

        Returns (loss, param_grads aligned with parameters(), dHin) where
        dHin is the gradient of the mean CE with respect to the input
        features (used for the adversarial featurizer update).
        """
        probs, cache = self.forward(Hin, train=train)
        n = len(Hin)
        logp = np.log(np.clip(probs, 1e-12, None))
        loss = float(-(targets * logp).sum() / n)
        dlogits = (probs - targets) / n
        dHin, gWs, gbs, gWo, gbo = self._backward_to_input(cache, dlogits)
        if grad_penalty > 0.0:
            pen, pWs, pbs, pWo, pbo = self._grad_penalty(cache, targets)
            loss += grad_penalty * pen
            for l in range(self.depth):
                gWs[l] += grad_penalty * pWs[l]
                gbs[l] += grad_penalty * pbs[l]
            gWo += grad_penalty * pWo
            gbo += grad_penalty * pbo
        return loss, gWs + gbs + [gWo, gbo], dHin

    def input_gradient_penalty(self, Hin, targets, train=False):
        _, cache = self.forward(Hin, train=train)
        return self._grad_penalty(cache, targets)[0]

    def _grad_penalty(self, cache, targets):
        """P = mean_i ||d CE_i/d h_i||^2 and dP/d(parameters).

        The per-example input gradient is a linear function of
        delta_o = p - t given fixed masks; the parameter gradient of P is
        computed by a tangent pass through that backward program plus the
        softmax-Jacobian leg back through the forward graph.
        """
        acts, masks, probs = cache["acts"], cache["masks"], cache["probs"]
        n = len(probs)
        delta_o = probs - targets
        # per-example backward (no 1/n) to the input
        ds_list = [None] * self.depth
        d_a = delta_o @ self.Wo.T
        da_list = [None] * self.depth  # d_{a_l} entering layer l's mask
        for l in range(self.depth - 1, -1, -1):
            da_list[l] = d_a
            ds_list[l] = d_a * masks[l]
            d_a = ds_list[l] @ self.Ws[l].T
        g = d_a
        penalty = float(np.sum(g * g) / n)

        # tangent pass: r_X = dP/dX through the backward program
        pWs = [np.zeros_like(W) for W in self.Ws]
        pbs = [np.zeros_like(b) for b in self.bs]
        r = 2.0 * g / n  # dP/d(d_{a_0})
        for l in range(self.depth):
            pWs[l] += r.T @ ds_list[l]
            r = (r @ self.Ws[l]) * masks[l]
        pWo = r.T @ delta_o
        r_delta = r @ self.Wo
        # delta_o = softmax(o) - t: pull r_delta back through the softmax
        inner = np.sum(probs * r_delta, axis=1, keepdims=True)
        d_o = probs * (r_delta - inner)
        # forward-graph leg
        pWo += acts[-1].T @ d_o
        pbo = d_o.sum(axis=0)
        d_a = d_o @ self.Wo.T
        for l in range(self.depth - 1, -1, -1):
            d_s = d_a * masks[l]
            pWs[l] += acts[l].T @ d_s
            pbs[l] += d_s.sum(axis=0)
            d_a = d_s @ self.Ws[l].T
        return penalty, pWs, pbs, pWo, pbo
