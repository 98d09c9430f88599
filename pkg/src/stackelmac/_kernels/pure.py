"""Pure-numpy implementations of the hot kernels.

Semantics here are the reference; the Cython backend in ``_cyker.pyx``
must match these outputs (same shapes, same math, float64 throughout).
"""

import numpy as np


# ---------------------------------------------------------------------------
# Causal self-attention core: the O(L^2) inner loop of the sequence model.
# Shapes: q, k, v are [B, H, L, Dh]. Scaling by 1/sqrt(Dh) happens inside.
# ---------------------------------------------------------------------------

def attention_forward(q, k, v):
    """Causal softmax(q k^T / sqrt(dh)) v.  Returns (y, p) with p kept for backward."""
    L, Dh = q.shape[2], q.shape[3]
    scale = 1.0 / np.sqrt(Dh)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    y = p @ v
    return y, p


def attention_backward(dy, p, q, k, v):
    """Gradients of attention_forward w.r.t. q, k, v given upstream dy."""
    Dh = q.shape[-1]
    scale = 1.0 / np.sqrt(Dh)
    dv = p.swapaxes(-1, -2) @ dy
    dp = dy @ v.swapaxes(-1, -2)
    # softmax backward; rows of p sum to 1 over the causal support
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.swapaxes(-1, -2) @ q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Exhaustive scans over joint transmission-bitmap profiles.
#
# A profile packs one M-bit bitmap per UE into a single integer code:
# bits [i*M, (i+1)*M) hold UE i's bitmap, LSB = RBG 0.  These scans walk
# all 2^(I*M) profiles and all unilateral deviations, which is the hot
# exponential loop of the theory suite.
# ---------------------------------------------------------------------------

def _profile_bits(num_ues, num_rbgs):
    """All profiles as a [P, I, M] 0/1 array, P = 2^(I*M), code order."""
    n_bits = num_ues * num_rbgs
    codes = np.arange(1 << n_bits, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n_bits, dtype=np.int64)[None, :]) & 1
    return bits.reshape(-1, num_ues, num_rbgs).astype(np.float64)


def potential_scan(num_ues, caps):
    """Max |ΔF' − ΔΦ| over every profile and every unilateral deviation.

    F'_i(a) = Σ_m a_im Π_{j≠i}(1−a_jm) N_m  (sole-transmitter payoff),
    Φ(a)    = Σ_m N_m · 1[at least one transmitter on m]  (Rosenthal sum
    with per-slot payoffs N_m, 0, 0, ...).
    """
    caps = np.asarray(caps, dtype=np.float64)
    M = caps.shape[0]
    bits = _profile_bits(num_ues, M)                      # [P, I, M]
    counts = bits.sum(axis=1)                             # [P, M]
    phi = ((counts >= 1.0) * caps).sum(axis=1)            # [P]
    sole = (counts == 1.0)                                # [P, M]
    fown = ((bits * sole[:, None, :]) * caps).sum(axis=2)  # [P, I]

    alt = ((np.arange(1 << M)[:, None] >> np.arange(M)[None, :]) & 1).astype(np.float64)
    worst = 0.0
    for i in range(num_ues):
        others = counts - bits[:, i, :]                   # [P, M]
        for a in range(1 << M):
            new_counts = others + alt[a]                  # [P, M]
            new_phi = ((new_counts >= 1.0) * caps).sum(axis=1)
            new_f = (alt[a] * (new_counts == 1.0) * caps).sum(axis=1)
            viol = np.abs((new_f - fown[:, i]) - (new_phi - phi)).max()
            worst = max(worst, float(viol))
    return worst


def ne_scan(num_ues, caps, dcm_bits, rho1, rho2):
    """Pure-strategy NE codes of the stage game.

    Stage utility: u_i = rho1 * F'_i + rho2 * C_i where C_i is the
    normalized Hamming similarity between UE i's bitmap and its intent
    bits.  A profile is an NE when no unilateral bitmap swap strictly
    raises the deviator's utility (tolerance 1e-12).
    """
    caps = np.asarray(caps, dtype=np.float64)
    dcm_bits = np.asarray(dcm_bits, dtype=np.float64)
    M = caps.shape[0]
    bits = _profile_bits(num_ues, M)
    counts = bits.sum(axis=1)
    sole = (counts == 1.0)
    fown = ((bits * sole[:, None, :]) * caps).sum(axis=2)   # [P, I]

    alt = ((np.arange(1 << M)[:, None] >> np.arange(M)[None, :]) & 1).astype(np.float64)
    # consistency of each candidate bitmap with each UE's intent: [I, 2^M]
    cons = 1.0 - np.abs(alt[None, :, :] - dcm_bits[:, None, :]).mean(axis=2)
    powers = (1 << np.arange(M)).astype(np.float64)
    own_code = (bits @ powers).astype(np.int64)              # [P, I]

    is_ne = np.ones(bits.shape[0], dtype=bool)
    for i in range(num_ues):
        u_cur = rho1 * fown[:, i] + rho2 * cons[i, own_code[:, i]]
        others = counts - bits[:, i, :]
        for a in range(1 << M):
            new_counts = others + alt[a]
            new_f = (alt[a] * (new_counts == 1.0) * caps).sum(axis=1)
            u_dev = rho1 * new_f + rho2 * cons[i, a]
            is_ne &= u_dev <= u_cur + 1e-12
    return np.nonzero(is_ne)[0].astype(np.int64)
