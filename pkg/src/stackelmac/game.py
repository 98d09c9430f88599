"""Utility, reward, and fairness arithmetic of the leader-follower game.

Everything here is a pure function over plain sequences/arrays; the
environment and the theory lab both build on these.
"""

import numpy as np

from .errors import ContractError, DecodeError


def dcm_bits_for_ue(dcm_tokens, ue_index, num_ues):
    """Per-UE intent bits from the leader's RBG->UE map.

    Token m holds the UE id allocated RBG m (0 = unallocated); bit m of
    the result is 1 iff RBG m was allocated to ``ue_index`` (1-based).
    """
    if not 1 <= ue_index <= num_ues:
        raise ContractError(f"ue_index must lie in 1..{num_ues}, got {ue_index}")
    bits = []
    for m, tok in enumerate(dcm_tokens):
        t = int(tok)
        if not 0 <= t <= num_ues:
            raise DecodeError(f"DCM token {t} at position {m} outside 0..{num_ues}")
        bits.append(1 if t == ue_index else 0)
    return tuple(bits)


def consistency(ue_bitmap, dcm_bits):
    """Normalized Hamming similarity between a bitmap and the intent bits."""
    if len(ue_bitmap) != len(dcm_bits):
        raise ContractError(f"bitmap length {len(ue_bitmap)} != intent length {len(dcm_bits)}")
    m = len(ue_bitmap)
    matches = sum(1 - (int(a) ^ int(d)) for a, d in zip(ue_bitmap, dcm_bits))
    return matches / m


def follower_utility(xi_rec, xi_tx, cons, weights):
    """rho1 * (xi_rec/xi_tx) + rho2 * C; the efficiency term is 0 when xi_tx = 0."""
    if xi_rec > xi_tx:
        raise ContractError(f"xi_rec ({xi_rec}) may not exceed xi_tx ({xi_tx})")
    eff = (xi_rec / xi_tx) if xi_tx > 0 else 0.0
    return weights.rho1 * eff + weights.rho2 * cons


def jfi(x):
    """Jain's Fairness Index (sum x)^2 / (n * sum x^2); 1 for an all-zero vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise ContractError("jfi needs at least one entry")
    sq = float(np.dot(x, x))
    if sq == 0.0:
        return 1.0
    s = float(x.sum())
    return (s * s) / (x.size * sq)


def leader_utility(xi_rec_per_ue, x_per_ue, weights):
    """Mean delivered dPDUs per UE plus epsilon-weighted fairness of RBG usage."""
    if len(xi_rec_per_ue) != len(x_per_ue):
        raise ContractError("xi_rec and x lists must cover the same UEs")
    mean_rec = float(np.mean(xi_rec_per_ue))
    return mean_rec + weights.epsilon * jfi(x_per_ue)


# ---------------------------------------------------------------------------
# Stage-game abstraction used by the theory lab: all UEs share a common
# per-RBG deliverable dPDU count N_m, fixed within a stage instance.
# ---------------------------------------------------------------------------

class StageGame:
    """One-shot contention game over M RBGs among I saturated UEs."""

    def __init__(self, num_ues, rbg_caps, dcm_bits=None):
        self.num_ues = int(num_ues)
        self.rbg_caps = tuple(float(n) for n in rbg_caps)
        if any(n < 0 for n in self.rbg_caps):
            raise ContractError("per-RBG capacities must be >= 0")
        self.num_rbgs = len(self.rbg_caps)
        if dcm_bits is None:
            dcm_bits = tuple((0,) * self.num_rbgs for _ in range(self.num_ues))
        self.dcm_bits = tuple(tuple(int(b) for b in row) for row in dcm_bits)
        if len(self.dcm_bits) != self.num_ues or any(
                len(row) != self.num_rbgs for row in self.dcm_bits):
            raise ContractError("dcm_bits must be one M-bit row per UE")


def interactive_utility(joint_bitmaps, ue_index, stage):
    """Sole-transmitter payoff: sum over RBGs of a_im * prod_{j!=i}(1-a_jm) * N_m."""
    bitmaps = [tuple(int(b) for b in bm) for bm in joint_bitmaps]
    for bm in bitmaps:
        if len(bm) != stage.num_rbgs:
            raise ContractError("every bitmap must have one bit per RBG")
    total = 0.0
    for m in range(stage.num_rbgs):
        if bitmaps[ue_index][m] == 0:
            continue
        prod = 1
        for j, bm in enumerate(bitmaps):
            if j != ue_index and bm[m] == 1:
                prod = 0
                break
        total += prod * stage.rbg_caps[m]
    return total


def potential_value(joint_bitmaps, stage):
    """Rosenthal-style congestion sum: each occupied RBG contributes N_m once.

    Literal evaluation of the per-slot payoff ladder C_m(1)=N_m, C_m(j>1)=0;
    a collided RBG therefore still contributes N_m even though realized
    throughput there is zero.
    """
    bitmaps = [tuple(int(b) for b in bm) for bm in joint_bitmaps]
    total = 0.0
    for m in range(stage.num_rbgs):
        occupants = sum(bm[m] for bm in bitmaps)
        if occupants >= 1:
            total += stage.rbg_caps[m]
    return total


def stage_utility(joint_bitmaps, ue_index, stage, weights):
    """Full stage utility: rho1 * interactive payoff + rho2 * DCM consistency."""
    f = interactive_utility(joint_bitmaps, ue_index, stage)
    c = consistency(joint_bitmaps[ue_index], stage.dcm_bits[ue_index])
    return weights.rho1 * f + weights.rho2 * c


def stage_leader_value(joint_bitmaps, stage, weights):
    """Leader's one-shot value at a joint profile (usage = bitmap popcounts)."""
    rec = [interactive_utility(joint_bitmaps, i, stage) for i in range(stage.num_ues)]
    usage = [sum(bm) for bm in joint_bitmaps]
    return leader_utility(rec, usage, weights)
