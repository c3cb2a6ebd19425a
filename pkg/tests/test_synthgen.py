import numpy as np
import pytest

from provshift.datamodel import empirical_joint
from provshift.errors import MissingNoiseError, NotYInvariantError
from provshift.sampler import solve_joint
from provshift.synthgen import (
    DiscreteWorld,
    GenConfig,
    counterfactual_flip,
    decomposition_oracle,
    generate,
)


def test_generate_no_spurious_signal():
    cfg = GenConfig(n=10000, joint=solve_joint(0.0), d_core=1, d_spur=2, d_noise=0,
                    core_strength=1.0, spur_strength=0.0, subjects=100, seed=0)
    ds = generate(cfg)
    z = ds.z.astype(float)
    for j in range(1, 3):
        rho = np.corrcoef(ds.X[:, j], z)[0, 1]
        assert abs(rho) < 0.05


def test_generate_no_information():
    cfg = GenConfig(n=10000, joint=solve_joint(0.3), d_core=1, d_spur=1, d_noise=1,
                    core_strength=0.0, spur_strength=0.0, subjects=100, seed=1)
    ds = generate(cfg)
    # features carry nothing; the best attainable accuracy is the majority rate
    base = max(np.mean(ds.y), 1 - np.mean(ds.y))
    # oracle upper bound: predict majority class
    assert base == pytest.approx(max(empirical_joint(ds).marginal_y), abs=1e-12)
    # any feature threshold cannot beat the base rate by more than noise
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.standard_normal(3)
        pred = (ds.X @ w > 0).astype(int)
        acc = np.mean(pred == ds.y)
        assert max(acc, 1 - acc) <= base + 0.03


def test_generate_alpha_matches_target():
    cfg = GenConfig(n=10000, joint=solve_joint(-0.6), d_core=1, d_spur=1, d_noise=0,
                    core_strength=1.0, spur_strength=1.0, subjects=100, seed=2)
    ds = generate(cfg)
    assert abs(empirical_joint(ds).log_alpha - (-0.6)) <= 0.05


def test_generate_deterministic():
    cfg = GenConfig(n=500, joint=solve_joint(0.0), d_core=1, d_spur=1, d_noise=1,
                    core_strength=1.0, spur_strength=1.0, subjects=10, seed=3)
    a = generate(cfg)
    b = generate(cfg)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.z, b.z)


def test_counterfactual_identity_and_spur_only():
    cfg = GenConfig(n=200, joint=solve_joint(0.0), d_core=2, d_spur=2, d_noise=1,
                    core_strength=1.0, spur_strength=2.0, subjects=10, seed=4)
    ds, noise = generate(cfg, return_noise=True)
    for ex in list(ds)[:50]:
        same = counterfactual_flip(ex, cfg, ex.provenance, noise[ex.example_id])
        assert np.array_equal(same.features, ex.features)
        flipped = counterfactual_flip(ex, cfg, 1 - ex.provenance, noise[ex.example_id])
        assert flipped.label == ex.label
        # core and noise dims bit-identical, spurious dims moved
        assert np.array_equal(flipped.features[:2], ex.features[:2])
        assert np.array_equal(flipped.features[4:], ex.features[4:])
        assert not np.array_equal(flipped.features[2:4], ex.features[2:4])


def test_counterfactual_no_mechanism():
    cfg = GenConfig(n=50, joint=solve_joint(0.0), d_core=1, d_spur=1, d_noise=0,
                    core_strength=1.0, spur_strength=0.0, subjects=5, seed=5)
    ds, noise = generate(cfg, return_noise=True)
    ex = ds.examples[0]
    flipped = counterfactual_flip(ex, cfg, 1 - ex.provenance, noise[ex.example_id])
    assert np.array_equal(flipped.features, ex.features)


def test_counterfactual_core_only_predictor_invariant():
    cfg = GenConfig(n=1000, joint=solve_joint(-0.6), d_core=2, d_spur=2, d_noise=0,
                    core_strength=1.0, spur_strength=3.0, subjects=20, seed=6)
    ds, noise = generate(cfg, return_noise=True)
    w = np.array([1.0, -0.5])
    for ex in ds:
        flipped = counterfactual_flip(ex, cfg, 1 - ex.provenance, noise[ex.example_id])
        assert float(ex.features[:2] @ w) == float(flipped.features[:2] @ w)


def test_counterfactual_missing_noise():
    cfg = GenConfig(n=10, joint=solve_joint(0.0), d_core=1, d_spur=1, d_noise=0,
                    core_strength=1.0, spur_strength=1.0, subjects=2, seed=7)
    ds = generate(cfg)
    with pytest.raises(MissingNoiseError):
        counterfactual_flip(ds.examples[0], cfg, 1, None)


def test_decomposition_oracle_random_worlds():
    for seed in range(50):
        d = 2 + seed % 11  # up to 12 dims
        world = DiscreteWorld.random_y_invariant(d, seed)
        assert decomposition_oracle(world) <= 1e-12


def test_decomposition_oracle_independent_z():
    # log alpha = 0 world: P(Y|x) constant in x, equal to P(Y)
    world = DiscreteWorld.random_y_invariant(3, seed=0)
    p = world.p.copy()
    # force P(Y=1|Z=z) equal across z
    for z in (0, 1):
        col = p[:, :, z]
        tot = col.sum()
        px_z = col.sum(axis=1) / tot
        p[:, 0, z] = 0.6 * px_z * tot
        p[:, 1, z] = 0.4 * px_z * tot
    world2 = DiscreteWorld(3, p / p.sum())
    assert decomposition_oracle(world2) <= 1e-12
    for x in range(8):
        assert world2.p_y1_given_x(x) == pytest.approx(0.4, abs=1e-12)


def test_decomposition_oracle_rejects_y_dependence():
    world = DiscreteWorld.random_y_invariant(2, seed=1)
    p = world.p.copy()
    p[0, 1, 0] *= 3.0  # break X independence of Y given Z
    with pytest.raises(NotYInvariantError):
        decomposition_oracle(DiscreteWorld(2, p / p.sum()))


def test_genconfig_validation():
    jt = solve_joint(0.0)
    with pytest.raises(ValueError):
        GenConfig(n=10, joint=jt, d_core=0, d_spur=0, d_noise=0,
                  core_strength=1, spur_strength=1, subjects=1)
    with pytest.raises(ValueError):
        GenConfig(n=1, joint=jt, d_core=1, d_spur=0, d_noise=0,
                  core_strength=1, spur_strength=1, subjects=5)
    with pytest.raises(ValueError):
        GenConfig(n=10, joint=jt, d_core=1, d_spur=0, d_noise=0,
                  core_strength=9, spur_strength=1, subjects=2)
