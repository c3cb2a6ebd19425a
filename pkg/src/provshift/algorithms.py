"""Nineteen training strategies as uniform pluggable update loops.

Every algorithm owns its model(s), optimizer(s), and balanced batch
stream, and exposes:

    step()              one training step (returns diagnostics)
    predict_proba(X)    class probabilities for evaluation
    snapshot()/restore() checkpoint the inference-relevant state

Random streams are split per concern: child 0 seeds the model init,
child 1 the batch order, and later children feed method-specific needs
(rebalancing, auxiliary models, mask ablation). A penalty method with
its trade-off weight at zero therefore consumes exactly the same main
streams as the plain baseline and reproduces its trajectory bit for bit.

Hyperparameters are data-driven: each kind declares names, defaults,
validity checks, and random-search distributions in HPARAM_REGISTRY.
"""

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import penalties as P
from .adversary import AdamBuffers, Discriminator
from .rng import rng_from, seed_seq
from .sampler import rebalance

ALGORITHM_KINDS = (
    "ERM", "UpSampling", "DownSampling", "BackDoor", "MTL", "Mixup", "LISA",
    "CORAL", "MMD", "CAD", "Fish", "DANN", "CDANN", "IRM", "GroupDRO",
    "JTT", "DFR", "LfF", "DualFilter",
)
TWO_STAGE = frozenset({"JTT", "DFR", "DualFilter"})


# ------------------------------------------------------- hyperparameters

@dataclass(frozen=True)
class HParam:
    default: object
    sample: object  # rng -> value
    check: object   # value -> bool


def _pos(v):
    return np.isscalar(v) and v > 0


def _nonneg(v):
    return np.isscalar(v) and v >= 0


def _unit(v):
    return np.isscalar(v) and 0.0 <= v <= 1.0


def _log10u(a, b):
    return lambda rng: float(10.0 ** rng.uniform(a, b))


def _pow2u_int(a, b):
    return lambda rng: int(round(2.0 ** rng.uniform(a, b)))


def _uniform(a, b):
    return lambda rng: float(rng.uniform(a, b))


def _choice(options):
    opts = list(options)
    return lambda rng: opts[int(rng.integers(0, len(opts)))]


def _in(options):
    opts = list(options)
    return lambda v: v in opts


_COMMON = {
    "lr": HParam(1e-5, _log10u(-5, -3.5), _pos),
    "weight_decay": HParam(0.0, _log10u(-6, -2), _nonneg),
}

_ADVERSARIAL = {
    "lambda": HParam(1.0, _log10u(-2, 2), _nonneg),
    "disc_weight_decay": HParam(0.0, _log10u(-6, -2), _nonneg),
    "disc_steps": HParam(1, _pow2u_int(0, 3), lambda v: isinstance(v, int) and v >= 1),
    "disc_width": HParam(256, _pow2u_int(6, 10), lambda v: isinstance(v, int) and v >= 1),
    "disc_depth": HParam(3, _choice([3, 4, 5]), lambda v: isinstance(v, int) and v >= 1),
    "disc_dropout": HParam(0.0, _choice([0.0, 0.1, 0.5]), lambda v: 0.0 <= v < 1.0),
    "grad_penalty": HParam(0.0, _log10u(-2, 1), _nonneg),
    "adam_beta1": HParam(0.5, _choice([0.0, 0.5]), lambda v: 0.0 <= v < 1.0),
}

# "first stage fraction" is drawn from Uniform(0.2, 0.8) directly: the
# published 10^Uniform form would put most of its mass above 1, outside
# the fraction's validity domain
_FRACTION = HParam(0.5, _uniform(0.2, 0.8), lambda v: 0.0 < v < 1.0)

HPARAM_REGISTRY = {
    "ERM": {},
    "UpSampling": {},
    "DownSampling": {},
    "BackDoor": {},
    "MTL": {"ema": HParam(0.99, _choice([0.5, 0.9, 0.99, 1.0]), _unit)},
    "Mixup": {"alpha": HParam(0.2, _log10u(0, 4), _pos)},
    "LISA": {
        "alpha": HParam(2.0, _log10u(-1, 1), _pos),
        "intra_domain_ratio": HParam(0.5, _uniform(0, 1), _unit),
        "mixup_method": HParam("mixup", _choice(["mixup", "cut_mixup"]),
                               _in(["mixup", "cut_mixup"])),
    },
    "CORAL": {"gamma": HParam(1.0, _log10u(-1, 1), _nonneg)},
    "MMD": {"gamma": HParam(1.0, _log10u(-1, 1), _nonneg)},
    "CAD": {
        "lambda": HParam(0.1, _choice([1e-4, 1e-2, 1e-1, 1.0, 10.0, 100.0]),
                         _nonneg),
        "temperature": HParam(0.1, _choice([0.05, 0.1]), _pos),
    },
    "Fish": {"meta_lr": HParam(0.5, _choice([0.05, 0.1, 0.5]), _nonneg)},
    "DANN": dict(_ADVERSARIAL),
    "CDANN": dict(_ADVERSARIAL),
    "IRM": {
        "lambda": HParam(100.0, _log10u(-1, 5), _nonneg),
        "anneal_steps": HParam(500, lambda rng: int(round(10.0 ** rng.uniform(0, 4))),
                               lambda v: isinstance(v, int) and v >= 0),
    },
    "GroupDRO": {"eta": HParam(0.01, _log10u(-1, 1), _nonneg)},
    "JTT": {
        "first_stage_fraction": _FRACTION,
        "lambda_up": HParam(0.1, _log10u(0, 2.5), _nonneg),
    },
    "DFR": {
        "first_stage_fraction": _FRACTION,
        "stage2_l2": HParam(0.1, _log10u(-2, 0.5), _nonneg),
    },
    "LfF": {"q": HParam(0.1, _uniform(0.05, 0.3), lambda v: 0.0 < v <= 1.0)},
    "DualFilter": {
        "mask_type": HParam("A", _choice(["D", "I", "A"]), _in(["D", "I", "A"])),
        "mask_threshold": HParam(0.5, _uniform(0.5, 0.9), lambda v: 0.0 < v < 1.0),
        "ablation_rate": HParam(0.5, _uniform(0.5, 0.9), lambda v: 0.0 < v <= 1.0),
        "warmup_steps": HParam(50, _choice([10, 25, 50]),
                               lambda v: isinstance(v, int) and v >= 0),
        "embedding_mask": HParam(True, _choice([False, True]),
                                 lambda v: isinstance(v, bool)),
        "classifier_mask": HParam(False, _choice([False, True]),
                                  lambda v: isinstance(v, bool)),
    },
}


def registry_for(kind):
    if kind not in HPARAM_REGISTRY:
        raise ValueError(f"unknown algorithm kind {kind!r}")
    reg = dict(_COMMON)
    reg.update(HPARAM_REGISTRY[kind])
    return reg


def default_hparams(kind):
    return {name: hp.default for name, hp in registry_for(kind).items()}


def sample_hparams(kind, rng):
    return {name: hp.sample(rng) for name, hp in registry_for(kind).items()}


def resolve_hparams(kind, overrides=None):
    """Defaults updated with overrides, all validated against the
    registry; unknown names and out-of-domain values are rejected."""
    reg = registry_for(kind)
    hp = {name: spec.default for name, spec in reg.items()}
    for name, value in (overrides or {}).items():
        if name not in reg:
            raise ValueError(f"unknown hyperparameter {name!r} for {kind}")
        hp[name] = value
    for name, value in hp.items():
        if not reg[name].check(value):
            raise ValueError(f"hyperparameter {name}={value!r} outside domain for {kind}")
    return hp


@dataclass(frozen=True)
class AlgorithmConfig:
    kind: str
    hparams: dict

    def __post_init__(self):
        object.__setattr__(self, "hparams", resolve_hparams(self.kind, self.hparams))


# ------------------------------------------------------------ base class

class Algorithm:
    kind = "ERM"
    two_stage = False

    def __init__(self, config, train_dataset, seed, total_steps,
                 hidden=32, activation="tanh", batch_per_z=16):
        assert config.kind == self.kind
        self.hp = config.hparams
        self.total_steps = total_steps
        self.t = 0
        self._restored = None
        kids = seed_seq(seed).spawn(8)
        self._kids = kids
        self.data = self._prepare_train(train_dataset, kids[2])
        self.X = self.data.X
        self.y = self.data.y
        self.z = self.data.z
        self.weights = np.ones(len(self.data))
        self.state = M.init_model(self._input_dim(train_dataset.dim), hidden,
                                  activation, aux_dim=self._aux_dim(hidden),
                                  seed=kids[0])
        self.opt = M.OptimizerState(
            kind="adam", lr=self.hp["lr"], weight_decay=self.hp["weight_decay"],
            beta1=self.hp.get("adam_beta1", 0.9),
        )
        self.batch_per_z = batch_per_z
        self._stream = M.balanced_batches(self.z, batch_per_z, kids[1])
        self._setup(kids)

    # hooks -------------------------------------------------------------
    def _prepare_train(self, dataset, seed):
        return dataset

    def _input_dim(self, dim):
        return dim

    def _aux_dim(self, hidden):
        return 0

    def _setup(self, kids):
        pass

    # main loop ---------------------------------------------------------
    def next_batch(self):
        idx = next(self._stream)
        return M.make_batch(self.X, self.y, self.z, idx, weights=self.weights)

    def step(self):
        self.t += 1
        return self._step()

    def _step(self):
        batch = self.next_batch()
        loss, grads, _ = M.loss_and_grad(self.state, batch)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss}

    # inference ---------------------------------------------------------
    def _predict_model(self):
        return self.state

    def _predict_with(self, state, X):
        return M.forward(state, X).probs

    def predict_proba(self, X):
        state = self._restored["state"] if self._restored else self._predict_model()
        return self._predict_with(state, X)

    def snapshot(self):
        return {"state": self._predict_model().clone(), "step": self.t}

    def restore(self, snap):
        self._restored = snap


class ERM(Algorithm):
    kind = "ERM"


class UpSampling(Algorithm):
    kind = "UpSampling"

    def _prepare_train(self, dataset, seed):
        return rebalance(dataset, "up", seed)


class DownSampling(Algorithm):
    kind = "DownSampling"

    def _prepare_train(self, dataset, seed):
        return rebalance(dataset, "down", seed)


# ----------------------------------------------------- penalty methods

class CORAL(Algorithm):
    kind = "CORAL"
    penalty_name = "coral"

    def _penalty(self, features_by_z):
        return P.coral_penalty_grads(features_by_z)

    def _step(self):
        batch = self.next_batch()
        fwd = M.forward(self.state, batch.X)
        loss, dlogits = M.ce_loss_grad(fwd.probs, batch.targets(), batch.weights)
        grads = M.grads_from_dlogits(self.state, batch.X, fwd, dlogits)
        gamma = self.hp["gamma"]
        features_by_z = {0: fwd.H[batch.z == 0], 1: fwd.H[batch.z == 1]}
        pen, pgrads = self._penalty(features_by_z)
        if gamma != 0.0:
            dH = np.zeros_like(fwd.H)
            dH[batch.z == 0] = pgrads[0]
            dH[batch.z == 1] = pgrads[1]
            extra = M.feature_grads(self.state, batch.X, fwd, gamma * dH)
            grads["W1"] += extra["W1"]
            grads["b1"] += extra["b1"]
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "penalty": pen}


class MMD(CORAL):
    kind = "MMD"
    penalty_name = "mmd"

    def _penalty(self, features_by_z):
        bw = P.median_bandwidths(features_by_z)
        return P.mmd_penalty_grads(features_by_z, bw)


class CAD(Algorithm):
    kind = "CAD"

    def _step(self):
        batch = self.next_batch()
        fwd = M.forward(self.state, batch.X)
        loss, dlogits = M.ce_loss_grad(fwd.probs, batch.targets(), batch.weights)
        grads = M.grads_from_dlogits(self.state, batch.X, fwd, dlogits)
        lam = self.hp["lambda"]
        tau = self.hp["temperature"]
        nce, dH_nce, skipped = P.infonce_grads(fwd.H, batch.y, tau)
        features_by_z = {0: fwd.H[batch.z == 0], 1: fwd.H[batch.z == 1]}
        bn, bn_grads = P.gaussian_bottleneck_grads(features_by_z)
        if lam != 0.0:
            dH = dH_nce.copy()
            dH[batch.z == 0] += bn_grads[0]
            dH[batch.z == 1] += bn_grads[1]
            extra = M.feature_grads(self.state, batch.X, fwd, lam * dH)
            grads["W1"] += extra["W1"]
            grads["b1"] += extra["b1"]
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "contrastive": nce, "bottleneck": bn,
                "skipped_anchors": skipped}


class IRM(Algorithm):
    kind = "IRM"

    def _step(self):
        batch = self.next_batch()
        fwd = M.forward(self.state, batch.X)
        loss, dlogits = M.ce_loss_grad(fwd.probs, batch.targets(), batch.weights)
        # penalty weight is 1 before the anneal step, lambda after
        weight = 1.0 if (self.t - 1) < self.hp["anneal_steps"] else self.hp["lambda"]
        targets = batch.targets()
        envs = {zv: batch.z == zv for zv in (0, 1) if np.any(batch.z == zv)}
        pen, pgrads = P.irm_penalty_dlogits(
            {e: fwd.logits[m] for e, m in envs.items()},
            {e: fwd.probs[m] for e, m in envs.items()},
            {e: targets[m] for e, m in envs.items()},
        )
        if weight != 0.0:
            dpen = np.zeros_like(dlogits)
            for e, m in envs.items():
                dpen[m] = pgrads[e]
            dlogits = dlogits + weight * dpen
        grads = M.grads_from_dlogits(self.state, batch.X, fwd, dlogits)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "penalty": pen, "penalty_weight": weight}


class GroupDRO(Algorithm):
    kind = "GroupDRO"

    def _setup(self, kids):
        self.q = np.full(4, 0.25)

    @staticmethod
    def _group_ids(y, z):
        return 2 * y + z

    def _step(self):
        batch = self.next_batch()
        fwd = M.forward(self.state, batch.X)
        n = len(batch.y)
        per = -np.log(np.clip(fwd.probs[np.arange(n), batch.y], 1e-12, None))
        gids = self._group_ids(batch.y, batch.z)
        group_losses = np.zeros(4)
        for g in range(4):
            mask = gids == g
            if np.any(mask):
                group_losses[g] = per[mask].mean()
        self.q = P.groupdro_update(self.q, group_losses, self.hp["eta"])
        # per-example weights q_g give the group-reweighted mean; with
        # uniform q this is the plain mean, bit for bit
        w = self.q[gids] * batch.weights
        loss, dlogits = M.ce_loss_grad(fwd.probs, batch.targets(), w)
        grads = M.grads_from_dlogits(self.state, batch.X, fwd, dlogits)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "q": self.q.copy()}


# -------------------------------------------------- adversarial methods

class DANN(Algorithm):
    kind = "DANN"
    conditional = False

    def _setup(self, kids):
        d_in = self.state.hidden + (2 if self.conditional else 0)
        self.disc = Discriminator(
            d_in, width=self.hp["disc_width"], depth=self.hp["disc_depth"],
            dropout=self.hp["disc_dropout"], seed=kids[3],
        )
        self.disc_opt = AdamBuffers(
            self.disc.parameters(), lr=self.hp["lr"],
            weight_decay=self.hp["disc_weight_decay"],
            beta1=self.hp["adam_beta1"],
        )

    def _disc_input(self, H, batch):
        if not self.conditional:
            return H
        ey = np.zeros((len(batch.y), 2))
        ey[np.arange(len(batch.y)), batch.y] = 1.0
        return np.concatenate([H, ey], axis=1)

    def _step(self):
        batch = self.next_batch()
        fwd = M.forward(self.state, batch.X)
        tz = np.zeros((len(batch.z), 2))
        tz[np.arange(len(batch.z)), batch.z] = 1.0
        Hin = self._disc_input(fwd.H, batch)

        disc_loss = 0.0
        for _ in range(self.hp["disc_steps"]):
            disc_loss, dgrads, _ = self.disc.loss_and_grads(
                Hin, tz, train=True, grad_penalty=self.hp["grad_penalty"])
            self.disc_opt.step(dgrads)

        loss, dlogits = M.ce_loss_grad(fwd.probs, batch.targets(), batch.weights)
        grads = M.grads_from_dlogits(self.state, batch.X, fwd, dlogits)
        lam = self.hp["lambda"]
        if lam != 0.0:
            _, _, dHin = self.disc.loss_and_grads(Hin, tz, train=False)
            dH = -lam * dHin[:, :self.state.hidden]
            extra = M.feature_grads(self.state, batch.X, fwd, dH)
            grads["W1"] += extra["W1"]
            grads["b1"] += extra["b1"]
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "disc_loss": disc_loss}


class CDANN(DANN):
    kind = "CDANN"
    conditional = True


# ------------------------------------------------- interpolation methods

class Mixup(Algorithm):
    kind = "Mixup"

    def _setup(self, kids):
        self._mix_rng = rng_from(kids[3])

    def _step(self):
        batch = self.next_batch()
        Xm, Tm = P.mixup_pairs(batch.X, batch.targets(), self.hp["alpha"],
                               self._mix_rng)
        mixed = M.Batch(Xm, batch.y, batch.z, batch.weights, soft_labels=Tm)
        loss, grads, _ = M.loss_and_grad(self.state, mixed)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss}


class LISA(Algorithm):
    kind = "LISA"

    def _setup(self, kids):
        self._mix_rng = rng_from(kids[3])

    def _step(self):
        batch = self.next_batch()
        rng = self._mix_rng
        pairs = P.lisa_pair_selection(batch.y, batch.z,
                                      self.hp["intra_domain_ratio"], rng)
        T = batch.targets()
        Xm = batch.X.copy()
        Tm = T.copy()
        fallbacks = 0
        d = batch.X.shape[1]
        for i, j, strategy in pairs:
            if strategy == "none":
                fallbacks += 1
                continue
            lam = float(rng.beta(self.hp["alpha"], self.hp["alpha"]))
            if self.hp["mixup_method"] == "mixup":
                Xm[i] = lam * batch.X[i] + (1 - lam) * batch.X[j]
                Tm[i] = lam * T[i] + (1 - lam) * T[j]
            else:
                # splice a contiguous coordinate block from the partner
                n_keep = int(round(lam * d))
                start = int(rng.integers(0, d)) if n_keep < d else 0
                keep = np.zeros(d, dtype=bool)
                keep[(start + np.arange(n_keep)) % d] = True
                Xm[i] = np.where(keep, batch.X[i], batch.X[j])
                frac = n_keep / d
                Tm[i] = frac * T[i] + (1 - frac) * T[j]
        mixed = M.Batch(Xm, batch.y, batch.z, batch.weights, soft_labels=Tm)
        loss, grads, _ = M.loss_and_grad(self.state, mixed)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss, "passthrough": fallbacks}


# ------------------------------------------------------ gradient matching

class Fish(Algorithm):
    kind = "Fish"

    def _step(self):
        batch = self.next_batch()
        clone = self.state.clone()
        inner_opt = M.OptimizerState(kind="adam", lr=self.hp["lr"],
                                     weight_decay=self.hp["weight_decay"])
        for zv in (0, 1):
            mask = batch.z == zv
            if not np.any(mask):
                continue
            sub = M.Batch(batch.X[mask], batch.y[mask], batch.z[mask],
                          batch.weights[mask])
            loss, grads, _ = M.loss_and_grad(clone, sub)
            M.optimizer_step(clone, inner_opt, grads)
        meta = self.hp["meta_lr"]
        for name, p in self.state.params().items():
            p += meta * (clone.params()[name] - p)
        return {"meta_lr": meta}


# ------------------------------------------------------- embedding methods

class MTL(Algorithm):
    kind = "MTL"

    def _aux_dim(self, hidden):
        return hidden

    def _setup(self, kids):
        self.e = np.zeros((2, self.state.hidden))

    def _step(self):
        batch = self.next_batch()
        rho = self.hp["ema"]
        # peek at the features to refresh the per-provenance embeddings;
        # the embedding is a buffer, not a gradient path
        S1, H = M.hidden_forward(np.ascontiguousarray(batch.X, dtype=np.float64),
                                 self.state.W1, self.state.b1, self.state.act_id)
        for zv in (0, 1):
            mask = batch.z == zv
            if np.any(mask):
                self.e[zv] = rho * self.e[zv] + (1 - rho) * H[mask].mean(axis=0)
        aux = self.e[batch.z]
        loss, grads, _ = M.loss_and_grad(self.state, batch, aux=aux)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss}

    def _predict_with(self, state, X):
        # at inference the embedding degrades to the evaluation batch's
        # feature mean, independent of z
        _, H = M.hidden_forward(np.ascontiguousarray(X, dtype=np.float64),
                                state.W1, state.b1, state.act_id)
        aux = np.tile(H.mean(axis=0), (len(X), 1))
        return M.forward(state, X, aux=aux).probs


class BackDoor(Algorithm):
    kind = "BackDoor"

    def _input_dim(self, dim):
        return dim + 2

    def _setup(self, kids):
        self.train_pz = np.array([np.mean(self.z == 0), np.mean(self.z == 1)])
        self._d_raw = self.data.dim

    def _with_channel(self, X, z):
        ez = np.zeros((len(X), 2))
        ez[np.arange(len(X)), z] = 1.0
        return np.concatenate([X, ez], axis=1)

    def _step(self):
        batch = self.next_batch()
        Xa = self._with_channel(batch.X, batch.z)
        aug = M.Batch(Xa, batch.y, batch.z, batch.weights)
        loss, grads, _ = M.loss_and_grad(self.state, aug)
        M.optimizer_step(self.state, self.opt, grads)
        return {"loss": loss}

    def _predict_with(self, state, X):
        return backdoor_predict(state, np.asarray(X), self.train_pz)


def backdoor_predict(state, X, train_pz):
    """Marginalize the provenance channel: sum_z P(Y|X, e_z) P^tr(z).

    Never reads an example's true z at inference.
    """
    n = len(X)
    out = np.zeros((n, 2))
    for zv in (0, 1):
        ez = np.zeros((n, 2))
        ez[:, zv] = 1.0
        Xa = np.concatenate([X, ez], axis=1)
        out += train_pz[zv] * M.forward(state, Xa).probs
    return out


# ---------------------------------------------------------- reweighting

class LfF(Algorithm):
    kind = "LfF"

    def _setup(self, kids):
        self.biased = M.init_model(self.state.W1.shape[0], self.state.hidden,
                                   self.state.activation, seed=kids[3])
        self.biased_opt = M.OptimizerState(kind="adam", lr=self.hp["lr"],
                                           weight_decay=self.hp["weight_decay"])

    def _step(self):
        batch = self.next_batch()
        n = len(batch.y)
        fwd_d = M.forward(self.state, batch.X)
        fwd_b = M.forward(self.biased, batch.X)
        l_d = -np.log(np.clip(fwd_d.probs[np.arange(n), batch.y], 1e-12, None))
        l_b = -np.log(np.clip(fwd_b.probs[np.arange(n), batch.y], 1e-12, None))
        w = P.lff_weights(l_b, l_d) * batch.weights
        loss, dlogits = M.ce_loss_grad(fwd_d.probs, batch.targets(), w)
        grads = M.grads_from_dlogits(self.state, batch.X, fwd_d, dlogits)
        M.optimizer_step(self.state, self.opt, grads)
        b_loss, b_dlogits = M.gce_loss_grad(fwd_b.probs, batch.y, self.hp["q"],
                                            np.ones(n))
        b_grads = M.grads_from_dlogits(self.biased, batch.X, fwd_b, b_dlogits)
        M.optimizer_step(self.biased, self.biased_opt, b_grads)
        return {"loss": loss, "biased_loss": b_loss,
                "mean_weight": float(w.mean())}


# ---------------------------------------------------- two-stage methods

class JTT(Algorithm):
    kind = "JTT"
    two_stage = True

    def _setup(self, kids):
        self.boundary = max(1, int(round(self.hp["first_stage_fraction"]
                                         * self.total_steps)))
        self.stage = 1

    def _begin_stage2(self):
        self.stage = 2
        pred = np.argmax(M.forward(self.state, self.X).probs, axis=1)
        error_set = pred != self.y
        self.weights = np.where(error_set, self.hp["lambda_up"], 1.0)
        self.error_count = int(error_set.sum())
        # the corrected model trains from scratch on the reweighted set
        self.state = M.init_model(self.state.W1.shape[0], self.state.hidden,
                                  self.state.activation, seed=self._kids[5])
        self.opt = M.OptimizerState(kind="adam", lr=self.hp["lr"],
                                    weight_decay=self.hp["weight_decay"])

    def _step(self):
        if self.stage == 1 and self.t > self.boundary:
            self._begin_stage2()
        return super()._step()


class DFR(Algorithm):
    kind = "DFR"
    two_stage = True

    def _setup(self, kids):
        self.boundary = max(1, int(round(self.hp["first_stage_fraction"]
                                         * self.total_steps)))
        self.stage = 1
        self._train_dataset = self.data

    def _begin_stage2(self):
        self.stage = 2
        # freeze the featurizer, reinitialize the classifier, and retrain
        # it on a joint-balanced subset with a decoupled l2 penalty
        self.state.frozen = {
            "W1": np.ones_like(self.state.W1, dtype=bool),
            "b1": np.ones_like(self.state.b1, dtype=bool),
        }
        rng = rng_from(self._kids[5])
        h = self.state.hidden
        self.state.W2[...] = rng.standard_normal((h, 2)) / np.sqrt(h)
        self.state.b2[...] = 0.0
        self.opt = M.OptimizerState(kind="adam", lr=self.hp["lr"],
                                    weight_decay=self.hp["stage2_l2"])
        balanced = rebalance(self._train_dataset, "down", self._kids[6])
        self.data = balanced
        self.X, self.y, self.z = balanced.X, balanced.y, balanced.z
        self.weights = np.ones(len(balanced))
        self._stream = M.balanced_batches(self.z, self.batch_per_z, self._kids[4])

    def _step(self):
        if self.stage == 1 and self.t > self.boundary:
            self._begin_stage2()
        return super()._step()


def dualfilter_mask(state, delta_task, delta_prov, k_fraction, set_op, targets,
                    ablation_rate=1.0, rng=None):
    """Zero the task model's weights at locations where both stages moved.

    Top-k_fraction locations per accumulated delta are selected by
    magnitude over the targeted parameter groups; the set operation maps
    D = task-minus-prov difference, I = prov-only, A = intersection. A
    random ablation_rate fraction of the mask is actually applied.
    Masking is idempotent: zeroed weights stay zero.
    """
    if not (0.0 < k_fraction <= 1.0):
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    targets = list(targets)
    if not targets:
        return state.clone()

    def flatten(d):
        return np.concatenate([np.abs(d[name]).reshape(-1) for name in targets])

    def topk(v):
        k = max(1, int(round(k_fraction * v.size)))
        sel = np.zeros(v.size, dtype=bool)
        sel[np.argsort(-v, kind="stable")[:k]] = True
        return sel

    task_top = topk(flatten(delta_task))
    prov_top = topk(flatten(delta_prov))
    if set_op == "A":
        mask = task_top & prov_top
    elif set_op == "D":
        mask = task_top & ~prov_top
    elif set_op == "I":
        mask = prov_top
    else:
        raise ValueError(f"unknown set operation {set_op!r}")
    if ablation_rate < 1.0:
        if rng is None:
            rng = np.random.default_rng(0)
        mask = mask & (rng.random(mask.size) < ablation_rate)

    out = state.clone()
    params = out.params()
    offset = 0
    for name in targets:
        size = params[name].size
        local = mask[offset:offset + size].reshape(params[name].shape)
        params[name][local] = 0.0
        offset += size
    return out


class DualFilter(Algorithm):
    kind = "DualFilter"
    two_stage = True

    def _setup(self, kids):
        self.boundary = self.total_steps // 2
        self.stage = 1
        self.theta0 = self.state.clone()
        self.warm_snapshot = None
        self.task_model = None
        self.delta_task = None
        self.masked_model = None
        self._prov_y = self.z.copy()

    def _delta_from(self, snap):
        return {name: np.abs(self.state.params()[name] - snap.params()[name])
                for name in M.PARAM_NAMES}

    def _warm_step_reached(self, stage_start):
        # triggers at the start of step warm+1, i.e. after `warm` updates
        warm = min(self.hp["warmup_steps"], max(self.boundary - 1, 0))
        return self.t - stage_start == warm + 1

    def _step(self):
        if self.stage == 1:
            if self._warm_step_reached(0):
                self.warm_snapshot = self.state.clone()
            if self.t > self.boundary:
                self._begin_stage2()
        if self.stage == 2 and self._warm_step_reached(self.boundary):
            self.warm_snapshot = self.state.clone()
        labels = self.y if self.stage == 1 else self._prov_y
        idx = next(self._stream)
        batch = M.make_batch(self.X, labels, self.z, idx)
        loss, grads, _ = M.loss_and_grad(self.state, batch)
        M.optimizer_step(self.state, self.opt, grads)
        if self.t == self.total_steps:
            self._finish()
        return {"loss": loss, "stage": self.stage}

    def _begin_stage2(self):
        base = self.warm_snapshot if self.warm_snapshot is not None else self.theta0
        self.delta_task = self._delta_from(base)
        self.task_model = self.state.clone()
        self.stage = 2
        self.warm_snapshot = None
        self.state = self.theta0.clone()
        self.opt = M.OptimizerState(kind="adam", lr=self.hp["lr"],
                                    weight_decay=self.hp["weight_decay"])

    def _finish(self):
        base = self.warm_snapshot if self.warm_snapshot is not None else self.theta0
        delta_prov = self._delta_from(base)
        targets = []
        if self.hp["embedding_mask"]:
            targets += ["W1", "b1"]
        if self.hp["classifier_mask"]:
            targets += ["W2", "b2"]
        self.masked_model = dualfilter_mask(
            self.task_model, self.delta_task, delta_prov,
            k_fraction=1.0 - self.hp["mask_threshold"],
            set_op=self.hp["mask_type"], targets=targets,
            ablation_rate=self.hp["ablation_rate"], rng=rng_from(self._kids[3]),
        )

    def _predict_model(self):
        if self.masked_model is not None:
            return self.masked_model
        if self.task_model is not None:
            return self.task_model
        return self.state


ALGORITHM_CLASSES = {cls.kind: cls for cls in (
    ERM, UpSampling, DownSampling, BackDoor, MTL, Mixup, LISA, CORAL, MMD,
    CAD, Fish, DANN, CDANN, IRM, GroupDRO, JTT, DFR, LfF, DualFilter,
)}
assert set(ALGORITHM_CLASSES) == set(ALGORITHM_KINDS)


def make_algorithm(kind, hparams, train_dataset, seed, budget_steps,
                   hidden=32, activation="tanh", batch_per_z=16):
    """Instantiate an algorithm; two-stage kinds get a doubled budget."""
    config = AlgorithmConfig(kind, hparams or {})
    total = budget_steps * 2 if kind in TWO_STAGE else budget_steps
    return ALGORITHM_CLASSES[kind](config, train_dataset, seed, total,
                                   hidden=hidden, activation=activation,
                                   batch_per_z=batch_per_z)
