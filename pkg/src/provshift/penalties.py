"""Alignment/invariance penalty terms and their analytic gradients.

Every penalty here returns both the scalar and its gradient with respect
to the quantities it reads (features or logits), so training never needs
autodiff. All gradients are checked against central finite differences
in the test suite.
"""

import numpy as np

from .errors import InsufficientGroupError


# ---------------------------------------------------------------- CORAL

def _covariance(H):
    n = H.shape[0]
    Hc = H - H.mean(axis=0)
    return Hc.T @ Hc / (n - 1), Hc


def coral_penalty(features_by_z):
    """(1 / 4d^2) * squared Frobenius distance of the two per-provenance
    feature covariance matrices."""
    return coral_penalty_grads(features_by_z)[0]


def coral_penalty_grads(features_by_z):
    """Returns (penalty, {z: dpenalty/dfeatures})."""
    for z, H in features_by_z.items():
        if H.shape[0] < 2:
            raise InsufficientGroupError(
                f"insufficient-group: provenance {z} has {H.shape[0]} example(s)"
            )
    H0, H1 = features_by_z[0], features_by_z[1]
    d = H0.shape[1]
    C0, Hc0 = _covariance(H0)
    C1, Hc1 = _covariance(H1)
    diff = C0 - C1
    penalty = float(np.sum(diff * diff) / (4 * d * d))
    # dP/dC0 = diff/(2 d^2); dC0/dH0 pulls in the 1/(n-1) and the centered rows
    D = diff / (2 * d * d)
    g0 = 2.0 * Hc0 @ D / (H0.shape[0] - 1)
    g1 = -2.0 * Hc1 @ D / (H1.shape[0] - 1)
    return penalty, {0: g0, 1: g1}


# ------------------------------------------------------------------ MMD

def median_bandwidths(features_by_z, scales=(0.5, 1.0, 2.0)):
    """Gaussian kernel widths from the median pairwise distance of the
    pooled sample (treated as a constant, no gradient)."""
    pooled = np.concatenate([features_by_z[0], features_by_z[1]], axis=0)
    sq = np.sum(pooled ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d2[iu])) if len(iu[0]) else 1.0
    base = np.sqrt(max(med, 1e-12) / 2.0)
    if base <= 0:
        base = 1.0
    return tuple(s * base for s in scales)


def mmd_penalty(features_by_z, bandwidths):
    """Biased squared-MMD estimate averaged over Gaussian bandwidths."""
    return mmd_penalty_grads(features_by_z, bandwidths)[0]


def mmd_penalty_grads(features_by_z, bandwidths):
    """Returns (penalty, {z: dpenalty/dfeatures})."""
    U, V = features_by_z[0], features_by_z[1]
    if len(U) == 0 or len(V) == 0:
        raise InsufficientGroupError("insufficient-group: empty provenance")
    n, m = len(U), len(V)
    total = 0.0
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)

    def block(A, B, coeff, gA, gB, sigma):
        # coeff * sum_ij k(a_i, b_j); accumulates gradients in place
        diff = A[:, None, :] - B[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        k = np.exp(-d2 / (2.0 * sigma * sigma))
        val = coeff * float(k.sum())
        scale = coeff * (-1.0 / (sigma * sigma))
        grad = scale * k[:, :, None] * diff
        gA += grad.sum(axis=1)
        gB -= grad.sum(axis=0)
        return val

    nb = len(bandwidths)
    for sigma in bandwidths:
        total += block(U, U, 1.0 / (n * n * nb), gU, gU, sigma)
        total += block(V, V, 1.0 / (m * m * nb), gV, gV, sigma)
        total += block(U, V, -2.0 / (n * m * nb), gU, gV, sigma)
    return float(total), {0: gU, 1: gV}


# ------------------------------------------------------------------ IRM

def irm_penalty_dlogits(logits_by_env, probs_by_env, targets_by_env):
    """Squared gradient of each environment's mean loss with respect to a
    scalar logit multiplier fixed at 1, summed over environments.

    Returns (penalty, {env: dpenalty/dlogits}).
    """
    penalty = 0.0
    grads = {}
    for env in logits_by_env:
        L = logits_by_env[env]
        P = probs_by_env[env]
        T = targets_by_env[env]
        n = len(L)
        diff = P - T
        g = float(np.sum(diff * L) / n)
        penalty += g * g
        # dg/dL_jd = (1/n) [ (p-t)_jd + p_jd (L_jd - sum_c p_jc L_jc) ]
        inner = np.sum(P * L, axis=1, keepdims=True)
        dg = (diff + P * (L - inner)) / n
        grads[env] = 2.0 * g * dg
    return penalty, grads


# ------------------------------------------------------------- GroupDRO

def groupdro_update(q, group_losses, eta):
    """Exponentiated ascent on the group weights; stays on the simplex."""
    q = np.asarray(q, dtype=np.float64)
    losses = np.asarray(group_losses, dtype=np.float64)
    new = q * np.exp(eta * losses)
    return new / new.sum()


# ---------------------------------------------------------------- Mixup

def mixup_pairs(X, targets, alpha, rng):
    """Interpolate each example with a random partner; one Beta(alpha,
    alpha) draw per pair, shared by features and labels."""
    n = len(X)
    partner = rng.permutation(n)
    lam = rng.beta(alpha, alpha, size=n)
    Xm = lam[:, None] * X + (1 - lam)[:, None] * X[partner]
    Tm = lam[:, None] * targets + (1 - lam)[:, None] * targets[partner]
    return Xm, Tm


def lisa_pair_selection(y, z, intra_domain_ratio, rng):
    """Partner and strategy per example.

    Strategy draw is Bernoulli(intra_domain_ratio): "intra-domain" wants
    same z / different y, "intra-label" wants same y / different z. If
    the drawn strategy has no eligible partner the other is tried; if
    neither has one the example passes through unmixed.

    Returns a list of (i, j, strategy) where strategy is "intra-domain",
    "intra-label", or "none" (j == i for pass-through).
    """
    n = len(y)
    out = []
    for i in range(n):
        want_domain = rng.random() < intra_domain_ratio
        order = ["intra-domain", "intra-label"] if want_domain else \
                ["intra-label", "intra-domain"]
        chosen = None
        for strategy in order:
            if strategy == "intra-domain":
                mask = (z == z[i]) & (y != y[i])
            else:
                mask = (y == y[i]) & (z != z[i])
            candidates = np.flatnonzero(mask)
            if len(candidates):
                j = int(candidates[rng.integers(0, len(candidates))])
                chosen = (i, j, strategy)
                break
        out.append(chosen if chosen else (i, i, "none"))
    return out


# ------------------------------------------------------------------ LfF

def lff_weights(biased_losses, debiased_losses):
    """Per-example weight L_B / (L_B + L_D), with 0.5 where both vanish."""
    b = np.asarray(biased_losses, dtype=np.float64)
    d = np.asarray(debiased_losses, dtype=np.float64)
    if np.any(b < 0) or np.any(d < 0):
        raise ValueError("losses must be nonnegative")
    denom = b + d
    out = np.full(len(b), 0.5)
    nz = denom > 0
    out[nz] = b[nz] / denom[nz]
    return out


# ------------------------------------------------------------------ CAD

def infonce_grads(H, y, temperature):
    """InfoNCE over same-label positives on L2-normalized features.

    Returns (loss, dloss/dH, skipped_anchor_count). Anchors without any
    positive are skipped.
    """
    n = len(H)
    norms = np.linalg.norm(H, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    U = H / norms
    S = U @ U.T / temperature
    same = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    pos_counts = same.sum(axis=1)
    anchors = np.flatnonzero(pos_counts > 0)
    skipped = n - len(anchors)
    if len(anchors) == 0:
        return 0.0, np.zeros_like(H), skipped

    # row-wise softmax over the n-1 non-self entries
    Smask = S.copy()
    np.fill_diagonal(Smask, -np.inf)
    m = Smask.max(axis=1, keepdims=True)
    E = np.exp(Smask - m)
    Zrow = E.sum(axis=1, keepdims=True)
    softmax = E / Zrow

    loss = 0.0
    G = np.zeros((n, n))  # dloss/dS
    A = len(anchors)
    for i in anchors:
        pos = np.flatnonzero(same[i])
        logs = Smask[i, pos] - (m[i, 0] + np.log(Zrow[i, 0]))
        loss += -logs.mean() / A
        G[i] = softmax[i] / A
        G[i, pos] -= 1.0 / (pos_counts[i] * A)
        G[i, i] = 0.0
    # S = U U^T / tau; both occurrences of each row contribute
    dU = (G + G.T) @ U / temperature
    # back through the row normalization u = h / ||h||
    dot = np.sum(dU * U, axis=1, keepdims=True)
    dH = (dU - dot * U) / norms
    return float(loss), dH, skipped


def gaussian_bottleneck_grads(features_by_z, eps=1e-6):
    """Symmetric KL between per-provenance diagonal-Gaussian feature fits.

    With v_z the (biased) per-dim variances and delta the mean gap, the
    log terms cancel and the per-dim divergence is
    (v0 + delta^2)/(2 v1) + (v1 + delta^2)/(2 v0) - 1, which is >= 0 and
    zero iff the fits coincide. Returns (value, {z: dvalue/dfeatures}).
    """
    H0, H1 = features_by_z[0], features_by_z[1]
    if len(H0) < 2 or len(H1) < 2:
        raise InsufficientGroupError("insufficient-group: need >= 2 per provenance")
    mu0, mu1 = H0.mean(axis=0), H1.mean(axis=0)
    v0 = H0.var(axis=0) + eps
    v1 = H1.var(axis=0) + eps
    delta = mu0 - mu1
    per_dim = (v0 + delta ** 2) / (2 * v1) + (v1 + delta ** 2) / (2 * v0) - 1.0
    value = float(per_dim.sum())

    dS_dv0 = 1.0 / (2 * v1) - (v1 + delta ** 2) / (2 * v0 ** 2)
    dS_dv1 = 1.0 / (2 * v0) - (v0 + delta ** 2) / (2 * v1 ** 2)
    dS_dmu0 = delta * (1.0 / v1 + 1.0 / v0)

    n0, n1 = len(H0), len(H1)
    g0 = dS_dmu0 / n0 + dS_dv0 * 2.0 * (H0 - mu0) / n0
    g1 = -dS_dmu0 / n1 + dS_dv1 * 2.0 * (H1 - mu1) / n1
    return value, {0: g0, 1: g1}


def cad_objective(H, y, z, lam, temperature):
    """Contrastive task term plus lam-weighted provenance bottleneck."""
    nce, _, _ = infonce_grads(H, y, temperature)
    features_by_z = {0: H[z == 0], 1: H[z == 1]}
    bottleneck, _ = gaussian_bottleneck_grads(features_by_z)
    return nce + lam * bottleneck
