"""Shared test utilities: finite-difference gradient oracle and tiny
dataset builders."""

import numpy as np

from provshift import model as M


def numeric_grad(loss_fn, arr, coords, h=1e-5):
    """Central finite differences of loss_fn at the given flat coords."""
    flat = arr.reshape(-1)
    out = {}
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        up = loss_fn()
        flat[c] = orig - h
        down = loss_fn()
        flat[c] = orig
        out[c] = (up - down) / (2 * h)
    return out


def check_gradients(state, batch, loss_kind="ce", gce_q=None, aux=None,
                    coords_per_tensor=12, rng=None, rtol=1e-4, atol=1e-6):
    """Compare analytic gradients against central differences.

    Returns the max relative error observed (with the absolute floor).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads, _ = M.loss_and_grad(state, batch, loss_kind=loss_kind,
                                  gce_q=gce_q, aux=aux)

    def loss_fn():
        loss, _, _ = M.loss_and_grad(state, batch, loss_kind=loss_kind,
                                     gce_q=gce_q, aux=aux)
        return loss

    worst = 0.0
    for name, p in state.params().items():
        n_coords = min(coords_per_tensor, p.size)
        coords = rng.choice(p.size, size=n_coords, replace=False)
        num = numeric_grad(loss_fn, p, coords)
        ana = grads[name].reshape(-1)
        for c, g_num in num.items():
            denom = max(abs(g_num), abs(ana[c]), atol)
            rel = abs(ana[c] - g_num) / denom
            worst = max(worst, rel)
            assert rel <= rtol, (
                f"{name}[{c}] analytic {ana[c]:.3e} vs numeric {g_num:.3e}"
            )
    return worst


def random_model_and_batch(rng, aux_dim=0):
    d_in = int(rng.integers(2, 8))
    hidden = int(rng.integers(3, 16))
    n = int(rng.integers(4, 24))
    activation = ["tanh", "relu", "linear"][int(rng.integers(0, 3))]
    state = M.init_model(d_in, hidden, activation, aux_dim=aux_dim,
                         seed=int(rng.integers(0, 2 ** 31)))
    X = rng.standard_normal((n, d_in))
    y = rng.integers(0, 2, size=n)
    z = rng.integers(0, 2, size=n)
    weights = rng.uniform(0.2, 2.0, size=n)
    batch = M.Batch(X, y.astype(np.int64), z.astype(np.int64), weights)
    aux = rng.standard_normal((n, aux_dim)) if aux_dim else None
    return state, batch, aux
