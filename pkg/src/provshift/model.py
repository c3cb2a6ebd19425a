"""Minimal differentiable learner: one hidden layer, linear head, manual
backprop, SGD/Adam with decoupled weight decay, and provenance-balanced
minibatching.

The hidden layer is small (default 32 units) by design: the training and
evaluation protocol is model-agnostic, and a desk-scale network keeps
whole benchmark sweeps in minutes. The classifier optionally consumes an
auxiliary input channel concatenated after the featurizer output (used
for provenance embeddings).
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import rng_from
from .errors import DivergenceError, NonFiniteInputError, ProvenanceStarvedError
from .kernels import (
    adamw_update,
    backprop_hidden,
    dense_backward,
    hidden_forward,
    linear_forward,
    sgd_update,
    softmax2,
)

ACTIVATION_IDS = {"tanh": 0, "relu": 1, "linear": 2}
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ModelState:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"
    aux_dim: int = 0
    frozen: dict = None  # name -> boolean mask, True = do not update

    @property
    def act_id(self):
        return ACTIVATION_IDS[self.activation]

    @property
    def hidden(self):
        return self.W1.shape[1]

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def param_count(self):
        return sum(p.size for p in self.params().values())

    def clone(self):
        return ModelState(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
            self.activation, self.aux_dim,
            None if self.frozen is None else {k: v.copy() for k, v in self.frozen.items()},
        )

    def copy_from(self, other):
        self.W1[...] = other.W1
        self.b1[...] = other.b1
        self.W2[...] = other.W2
        self.b2[...] = other.b2


def init_model(d_in, hidden=32, activation="tanh", aux_dim=0, seed=0):
    rng = rng_from(seed)
    W1 = rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)
    b1 = np.zeros(hidden)
    W2 = rng.standard_normal((hidden + aux_dim, 2)) / np.sqrt(hidden + aux_dim)
    b2 = np.zeros(2)
    return ModelState(W1, b1, W2, b2, activation, aux_dim)


@dataclass
class Forward:
    S1: np.ndarray
    H: np.ndarray
    Hc: np.ndarray  # classifier input (H, or [H; aux])
    logits: np.ndarray
    probs: np.ndarray


def forward(state, X, aux=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise NonFiniteInputError("non-finite-input: features contain NaN/Inf")
    S1, H = hidden_forward(X, state.W1, state.b1, state.act_id)
    if state.aux_dim:
        if aux is None:
            raise ValueError("model expects an auxiliary input channel")
        Hc = np.ascontiguousarray(np.concatenate([H, aux], axis=1))
    else:
        Hc = H
    logits = linear_forward(Hc, state.W2, state.b2)
    probs = softmax2(logits)
    return Forward(S1, H, Hc, logits, probs)


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    weights: np.ndarray = None
    indices: np.ndarray = None  # positions in the source training set
    soft_labels: np.ndarray = None  # (n, 2) rows summing to 1; overrides y

    def __post_init__(self):
        n = len(self.X)
        if self.weights is None:
            self.weights = np.ones(n)
        if len(self.y) != n or len(self.z) != n or len(self.weights) != n:
            raise ValueError("batch field row counts differ")
        if np.any(self.weights < 0):
            raise ValueError("batch weights must be nonnegative")

    def targets(self):
        if self.soft_labels is not None:
            return self.soft_labels
        t = np.zeros((len(self.y), 2))
        t[np.arange(len(self.y)), self.y] = 1.0
        return t


def ce_loss_grad(probs, targets, weights):
    """Weighted-mean cross entropy and its gradient w.r.t. logits."""
    wsum = weights.sum()
    logp = np.log(np.clip(probs, 1e-12, None))
    per = -(targets * logp).sum(axis=1)
    loss = float((weights * per).sum() / wsum)
    dlogits = (weights / wsum)[:, None] * (probs - targets)
    return loss, dlogits


def gce_loss_grad(probs, y, q, weights):
    """Generalized cross entropy (1 - p_y^q)/q and its logit gradient."""
    if not (0.0 < q <= 1.0):
        raise ValueError(f"gce q must be in (0, 1], got {q}")
    wsum = weights.sum()
    n = len(y)
    py = np.clip(probs[np.arange(n), y], 1e-12, None)
    per = (1.0 - py ** q) / q
    loss = float((weights * per).sum() / wsum)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    dlogits = (weights / wsum)[:, None] * (py ** q)[:, None] * (probs - onehot)
    return loss, dlogits


def grads_from_dlogits(state, X, fwd, dlogits):
    """Full parameter gradients given the loss gradient at the logits."""
    gW2, gb2 = dense_backward(fwd.Hc, np.ascontiguousarray(dlogits))
    dHc = dlogits @ state.W2.T
    dH = np.ascontiguousarray(dHc[:, :state.hidden])
    gW1, gb1 = backprop_hidden(
        np.ascontiguousarray(X, dtype=np.float64), fwd.S1, fwd.H, state.W1, dH, state.act_id
    )
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def feature_grads(state, X, fwd, dH):
    """Featurizer-only gradients from an upstream gradient on H."""
    gW1, gb1 = backprop_hidden(
        np.ascontiguousarray(X, dtype=np.float64), fwd.S1, fwd.H, state.W1,
        np.ascontiguousarray(dH), state.act_id,
    )
    return {"W1": gW1, "b1": gb1}


def loss_and_grad(state, batch, loss_kind="ce", gce_q=None, aux=None):
    """(scalar loss, parameter gradients, forward cache)."""
    fwd = forward(state, batch.X, aux=aux)
    if loss_kind == "ce":
        loss, dlogits = ce_loss_grad(fwd.probs, batch.targets(), batch.weights)
    elif loss_kind == "gce":
        loss, dlogits = gce_loss_grad(fwd.probs, batch.y, gce_q, batch.weights)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    grads = grads_from_dlogits(state, batch.X, fwd, dlogits)
    return loss, grads, fwd


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = None
    v: dict = None
    t: int = 0

    def clone(self):
        return OptimizerState(
            self.kind, self.lr, self.weight_decay, self.beta1, self.beta2, self.eps,
            None if self.m is None else {k: a.copy() for k, a in self.m.items()},
            None if self.v is None else {k: a.copy() for k, a in self.v.items()},
            self.t,
        )


def optimizer_step(state, opt, grads):
    """One update in place on the model parameters.

    Frozen parameters are restored after the update, so neither the
    gradient nor weight decay moves them. Non-finite gradients raise a
    divergence signal for the harness.
    """
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient in {name}")
    params = state.params()
    saved = {}
    if state.frozen:
        for name, mask in state.frozen.items():
            saved[name] = params[name][mask].copy()
    if opt.kind == "sgd":
        for name in PARAM_NAMES:
            p = params[name]
            sgd_update(p.reshape(-1), np.ascontiguousarray(grads[name]).reshape(-1),
                       opt.lr, opt.weight_decay)
    elif opt.kind == "adam":
        if opt.m is None:
            opt.m = {n: np.zeros_like(params[n]) for n in PARAM_NAMES}
            opt.v = {n: np.zeros_like(params[n]) for n in PARAM_NAMES}
        opt.t += 1
        bc1 = 1.0 - opt.beta1 ** opt.t
        bc2 = 1.0 - opt.beta2 ** opt.t
        for name in PARAM_NAMES:
            p = params[name]
            adamw_update(p.reshape(-1), np.ascontiguousarray(grads[name]).reshape(-1),
                         opt.m[name].reshape(-1), opt.v[name].reshape(-1),
                         opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps,
                         bc1, bc2)
    else:
        raise ValueError(f"unknown optimizer kind {opt.kind!r}")
    if state.frozen:
        for name, mask in state.frozen.items():
            params[name][mask] = saved[name]
    return state


def balanced_batches(z, per_provenance, seed):
    """Infinite stream of index arrays with exactly per_provenance
    examples of each z per batch.

    Each epoch reshuffles both provenance pools; the minority pool wraps
    around within the epoch so every batch stays exactly uniform in z.
    """
    z = np.asarray(z)
    idx0 = np.flatnonzero(z == 0)
    idx1 = np.flatnonzero(z == 1)
    if len(idx0) == 0 or len(idx1) == 0:
        raise ProvenanceStarvedError("provenance-starved: a z value is absent")
    rng = rng_from(seed)
    k = per_provenance
    batches_per_epoch = max(1, int(np.ceil(max(len(idx0), len(idx1)) / k)))

    def stream():
        while True:
            p0 = rng.permutation(idx0)
            p1 = rng.permutation(idx1)
            for b in range(batches_per_epoch):
                take0 = p0[(b * k + np.arange(k)) % len(p0)]
                take1 = p1[(b * k + np.arange(k)) % len(p1)]
                yield np.concatenate([take0, take1])

    return stream()


def make_batch(X, y, z, idx, weights=None, soft_labels=None):
    return Batch(
        X[idx], y[idx], z[idx],
        None if weights is None else weights[idx],
        np.asarray(idx),
        None if soft_labels is None else soft_labels[idx],
    )


def save_checkpoint(path, state, opt, step):
    """Versioned binary dump; load(save(s)) is bit-exact."""
    payload = {
        "version": np.int64(1),
        "activation": np.int64(state.act_id),
        "aux_dim": np.int64(state.aux_dim),
        "step": np.int64(step),
        "opt_kind": np.array(opt.kind),
        "opt_lr": np.float64(opt.lr),
        "opt_wd": np.float64(opt.weight_decay),
        "opt_beta1": np.float64(opt.beta1),
        "opt_beta2": np.float64(opt.beta2),
        "opt_eps": np.float64(opt.eps),
        "opt_t": np.int64(opt.t),
    }
    for name, p in state.params().items():
        payload[f"p_{name}"] = p
    if opt.m is not None:
        for name in PARAM_NAMES:
            payload[f"m_{name}"] = opt.m[name]
            payload[f"v_{name}"] = opt.v[name]
    np.savez(path, **payload)


def load_checkpoint(path):
    data = np.load(path, allow_pickle=False)
    act = {v: k for k, v in ACTIVATION_IDS.items()}[int(data["activation"])]
    state = ModelState(
        data["p_W1"].copy(), data["p_b1"].copy(),
        data["p_W2"].copy(), data["p_b2"].copy(),
        act, int(data["aux_dim"]),
    )
    opt = OptimizerState(
        kind=str(data["opt_kind"]), lr=float(data["opt_lr"]),
        weight_decay=float(data["opt_wd"]), beta1=float(data["opt_beta1"]),
        beta2=float(data["opt_beta2"]), eps=float(data["opt_eps"]),
        t=int(data["opt_t"]),
    )
    if "m_W1" in data:
        opt.m = {n: data[f"m_{n}"].copy() for n in PARAM_NAMES}
        opt.v = {n: data[f"v_{n}"].copy() for n in PARAM_NAMES}
    return state, opt, int(data["step"])
