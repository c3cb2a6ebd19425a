"""Synthetic data from the graph X <- Z -> Y with anti-causal features.

Each example draws z from the target marginal and y from P(Y|Z=z), then
builds features in three blocks: core dims carry the label (Gaussian
means +/- core_strength/2 by y), spurious dims carry the provenance
(means +/- spur_strength/2 by z), and noise dims are pure N(0,1). All
blocks use unit sigma, so strengths are mean separations in noise units.

A small exact-enumeration world over binary feature dims backs the
decomposition oracle: when the observed dims are provenance-driven only
(X independent of Y given Z), P(Y=1|x) must equal
sum_z P(Y=1|Z=z) P(Z=z|x) by total probability.
"""

from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset, Example
from .rng import rng_from
from .errors import MissingNoiseError, NotYInvariantError


@dataclass(frozen=True)
class GenConfig:
    n: int
    joint: "JointTable"
    d_core: int
    d_spur: int
    d_noise: int
    core_strength: float
    spur_strength: float
    subjects: int
    seed: int = 0

    def __post_init__(self):
        if self.d_core + self.d_spur + self.d_noise < 1:
            raise ValueError("need at least one feature dimension")
        if not (self.n >= self.subjects >= 1):
            raise ValueError("need n >= subjects >= 1")
        for s in (self.core_strength, self.spur_strength):
            if not (0.0 <= s <= 5.0):
                raise ValueError(f"strength {s} outside [0, 5]")

    @property
    def dim(self):
        return self.d_core + self.d_spur + self.d_noise


def generate(config, return_noise=False):
    """Sample a dataset; deterministic per seed.

    With return_noise=True also returns {example_id: spurious-block
    standard-normal draws} for counterfactual replay.
    """
    rng = rng_from(config.seed)
    n = config.n
    jt = config.joint
    mz1 = jt.marginal_z[1]
    c = [jt.conditional_y1(0), jt.conditional_y1(1)]

    z = (rng.random(n) < mz1).astype(np.int64)
    cz = np.where(z == 1, c[1], c[0])
    y = (rng.random(n) < cz).astype(np.int64)

    eps_core = rng.standard_normal((n, config.d_core))
    eps_spur = rng.standard_normal((n, config.d_spur))
    eps_noise = rng.standard_normal((n, config.d_noise))

    core_mu = (y * 2 - 1)[:, None] * (config.core_strength / 2.0)
    spur_mu = (z * 2 - 1)[:, None] * (config.spur_strength / 2.0)
    X = np.concatenate([core_mu + eps_core, spur_mu + eps_spur, eps_noise], axis=1)

    examples = []
    noise = {}
    for i in range(n):
        eid = f"e{i}"
        examples.append(Example(
            X[i].copy(), int(y[i]), int(z[i]),
            f"s{i % config.subjects}", eid,
        ))
        if return_noise:
            noise[eid] = eps_spur[i].copy()
    ds = Dataset(examples, config.dim, name=f"synth-seed{config.seed}")
    if return_noise:
        return ds, noise
    return ds


def counterfactual_flip(example, config, new_z, shared_noise):
    """Regenerate the example with provenance new_z and identical noise.

    Only the spurious block changes; core and noise dims are bit-identical
    and the label is kept.
    """
    if shared_noise is None:
        raise MissingNoiseError(
            f"no noise record for example {example.example_id!r}"
        )
    feats = example.features.copy()
    lo = config.d_core
    hi = lo + config.d_spur
    mu = (new_z * 2 - 1) * (config.spur_strength / 2.0)
    feats[lo:hi] = mu + shared_noise
    return Example(feats, example.label, new_z, example.subject_id, example.example_id)


class DiscreteWorld:
    """Exact joint over (X, Y, Z) with X a tuple of <= 12 binary dims.

    p has shape (2**d, 2, 2) indexed [x, y, z] where x enumerates bit
    patterns; entries sum to 1.
    """

    MAX_DIMS = 12

    def __init__(self, d, p):
        p = np.asarray(p, dtype=np.float64)
        if not (1 <= d <= self.MAX_DIMS):
            raise ValueError(f"d must be in [1, {self.MAX_DIMS}]")
        if p.shape != (2 ** d, 2, 2):
            raise ValueError(f"p must have shape {(2 ** d, 2, 2)}, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("p must be a probability table")
        self.d = d
        self.p = p

    @classmethod
    def random_y_invariant(cls, d, seed):
        """World whose feature dims depend on Z only (X independent of Y
        given Z), the construction the decomposition oracle assumes."""
        rng = rng_from(seed)
        pz = rng.uniform(0.2, 0.8)
        pz = np.array([1.0 - pz, pz])
        py_given_z = rng.uniform(0.05, 0.95, size=2)  # P(Y=1|Z=z)
        theta = rng.uniform(0.05, 0.95, size=(d, 2))  # P(X_b=1|Z=z)
        n_states = 2 ** d
        p = np.zeros((n_states, 2, 2))
        for x in range(n_states):
            bits = [(x >> b) & 1 for b in range(d)]
            for z in (0, 1):
                px_z = 1.0
                for b, bit in enumerate(bits):
                    px_z *= theta[b, z] if bit else 1.0 - theta[b, z]
                for y in (0, 1):
                    py = py_given_z[z] if y == 1 else 1.0 - py_given_z[z]
                    p[x, y, z] = pz[z] * py * px_z
        p /= p.sum()
        return cls(d, p)

    def conditional_y1_given_z(self, z):
        col = self.p[:, :, z]
        return col[:, 1].sum() / col.sum()

    def p_z_given_x(self, x):
        row = self.p[x]
        return row.sum(axis=0) / row.sum()

    def p_y1_given_x(self, x):
        row = self.p[x]
        return row[1].sum() / row.sum()


def decomposition_oracle(world):
    """Max over feature values x of
    |P(Y=1|x) - sum_z P(Y=1|Z=z) P(Z=z|x)| by exact enumeration.

    Requires X independent of Y given Z; violating worlds are rejected.
    """
    p = world.p
    for z in (0, 1):
        col = p[:, :, z]  # (x, y)
        for y in (0, 1):
            py_z = col[:, y].sum()
            if py_z == 0.0:
                continue
            px_yz = col[:, y] / py_z
            px_z = col.sum(axis=1) / col.sum()
            if np.max(np.abs(px_yz - px_z)) > 1e-9:
                raise NotYInvariantError(
                    "not-Y-invariant: features depend on Y given Z"
                )
    cy1 = [world.conditional_y1_given_z(0), world.conditional_y1_given_z(1)]
    worst = 0.0
    for x in range(p.shape[0]):
        if p[x].sum() == 0.0:
            continue
        direct = world.p_y1_given_x(x)
        pz_x = world.p_z_given_x(x)
        decomposed = cy1[0] * pz_x[0] + cy1[1] * pz_x[1]
        worst = max(worst, abs(direct - decomposed))
    return worst
