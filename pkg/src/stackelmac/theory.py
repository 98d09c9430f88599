"""Numerical game-theory lab.

Two complementary toolsets:

* exact enumeration over the discrete stage game (potential identity,
  follower NE sets, brute-force leader search with pessimistic scoring);
* smooth quadratic leader/follower games for the differential machinery
  (gradient fields, finite-difference Jacobians, negative-definiteness and
  Schur/timescale certificates, contraction constants and rate bounds,
  averaged dynamics over a distribution of follower counts).

All operations are pure; enumeration sizes are guarded hard.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import game as gm
from .errors import ContractError, SizeError

ENUM_MAX_UES = 4
ENUM_MAX_RBGS = 4


def _guard_enum(num_ues, num_rbgs):
    if num_ues > ENUM_MAX_UES or num_rbgs > ENUM_MAX_RBGS or num_ues < 1:
        raise SizeError(f"exhaustive enumeration is limited to I <= {ENUM_MAX_UES}, "
                        f"M <= {ENUM_MAX_RBGS} (got I={num_ues}, M={num_rbgs})")


def _decode_profile(code, num_ues, num_rbgs):
    return tuple(tuple((code >> (i * num_rbgs + m)) & 1 for m in range(num_rbgs))
                 for i in range(num_ues))


# ---------------------------------------------------------------------------
# Discrete stage game: exact potential and equilibrium enumeration
# ---------------------------------------------------------------------------

def verify_exact_potential(num_ues, num_rbgs, caps=None, draws=1, rng=None,
                           perturb_scale=0.0):
    """Max |ΔF' − ΔΦ| over all profiles and unilateral deviations.

    With caps=None, draws random integer capacities per draw.  A nonzero
    perturb_scale adds noise to the interactive utilities (negative
    control; the identity must then break).
    """
    _guard_enum(num_ues, num_rbgs)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _ in range(draws):
        c = (np.asarray(caps, dtype=np.float64) if caps is not None
             else rng.integers(1, 5, size=num_rbgs).astype(np.float64))
        if perturb_scale > 0.0:
            worst = max(worst, _perturbed_potential_violation(
                num_ues, c, perturb_scale, rng))
        else:
            worst = max(worst, float(K.potential_scan(num_ues, c)))
    return worst


def _perturbed_potential_violation(num_ues, caps, scale, rng):
    """Python-path control: noise on F' while the candidate potential stays."""
    num_rbgs = len(caps)
    stage = gm.StageGame(num_ues, caps)
    profiles = list(itertools.product(
        itertools.product((0, 1), repeat=num_rbgs), repeat=num_ues))
    noise = {(p, i): rng.normal(0.0, scale)
             for p in profiles for i in range(num_ues)}
    worst = 0.0
    for prof in profiles:
        phi = gm.potential_value(prof, stage)
        for i in range(num_ues):
            f_cur = gm.interactive_utility(prof, i, stage) + noise[(prof, i)]
            for alt in itertools.product((0, 1), repeat=num_rbgs):
                dev = prof[:i] + (alt,) + prof[i + 1:]
                f_new = gm.interactive_utility(dev, i, stage) + noise[(dev, i)]
                d_phi = gm.potential_value(dev, stage) - phi
                worst = max(worst, abs((f_new - f_cur) - d_phi))
    return worst


def enumerate_follower_ne(stage, weights):
    """All pure joint bitmap profiles stable against unilateral deviations.

    Utility per UE: rho1 * sole-transmitter payoff + rho2 * consistency with
    that UE's intent bits.
    """
    _guard_enum(stage.num_ues, stage.num_rbgs)
    codes = K.ne_scan(stage.num_ues, np.asarray(stage.rbg_caps),
                      np.asarray(stage.dcm_bits, dtype=np.float64),
                      weights.rho1, weights.rho2)
    return [_decode_profile(int(c), stage.num_ues, stage.num_rbgs) for c in codes]


@dataclass
class StackelbergSolution:
    dcm: tuple                 # RBG -> UE map (0 = unallocated)
    dcm_bits: tuple            # per-UE intent rows
    ne_profiles: list          # follower NE set under that map
    leader_value: float        # pessimistic (inf over the NE set) by default
    scores: dict = field(default_factory=dict)


def brute_force_stackelberg(num_ues, caps, weights, optimistic=False):
    """Exhaustive leader search: enumerate every RBG->UE map, score each by
    the worst (default) follower NE, return the argmax (lowest-index ties).
    """
    num_rbgs = len(caps)
    _guard_enum(num_ues, num_rbgs)
    if (num_ues + 1) ** num_rbgs > 20000:
        raise SizeError("leader action space too large for brute force")
    best = None
    agg = max if optimistic else min
    for dcm in itertools.product(range(num_ues + 1), repeat=num_rbgs):
        bits = tuple(gm.dcm_bits_for_ue(dcm, i + 1, num_ues)
                     for i in range(num_ues))
        stage = gm.StageGame(num_ues, caps, bits)
        ne = enumerate_follower_ne(stage, weights)
        value = agg(gm.stage_leader_value(prof, stage, weights) for prof in ne)
        if best is None or value > best.leader_value + 1e-12:
            best = StackelbergSolution(dcm=dcm, dcm_bits=bits, ne_profiles=ne,
                                       leader_value=value)
    return best


# ---------------------------------------------------------------------------
# Smooth synthetic games (quadratic library)
# ---------------------------------------------------------------------------

class SyntheticGame:
    """Quadratic leader/follower utilities with configurable coupling blocks.

    J_b  = 1/2 th_b' A th_b + th_b' B th_u + r_b' th_b
    J_i  = 1/2 th_i' D_i th_i + th_i' C_i th_b + r_i' th_i
    where th_u stacks the follower parameters.  The linear terms are chosen
    so the scaled gradient field vanishes at a designated theta_star.
    """

    def __init__(self, A, B, C_list, D_list, theta_star_b, theta_star_u):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.C = [np.asarray(c, dtype=np.float64) for c in C_list]
        self.D = [np.asarray(d, dtype=np.float64) for d in D_list]
        self.n_b = self.A.shape[0]
        self.n_u = self.D[0].shape[0]
        self.num_followers = len(self.D)
        self.theta_star = np.concatenate([theta_star_b, np.concatenate(theta_star_u)])
        tb = np.asarray(theta_star_b)
        tu = [np.asarray(t) for t in theta_star_u]
        self.r_b = -(self.A @ tb + self.B @ np.concatenate(tu))
        self.r = [-(self.D[i] @ tu[i] + self.C[i] @ tb)
                  for i in range(self.num_followers)]

    def split(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        tb = theta[:self.n_b]
        tu = [theta[self.n_b + i * self.n_u: self.n_b + (i + 1) * self.n_u]
              for i in range(self.num_followers)]
        return tb, tu

    def utility_leader(self, theta):
        tb, tu = self.split(theta)
        ustack = np.concatenate(tu)
        return float(0.5 * tb @ self.A @ tb + tb @ self.B @ ustack + self.r_b @ tb)

    def utility_follower(self, i, theta):
        tb, tu = self.split(theta)
        return float(0.5 * tu[i] @ self.D[i] @ tu[i] + tu[i] @ self.C[i] @ tb
                     + self.r[i] @ tu[i])

    def grad_leader(self, theta):
        tb, tu = self.split(theta)
        return self.A @ tb + self.B @ np.concatenate(tu) + self.r_b

    def grad_follower(self, i, theta):
        tb, tu = self.split(theta)
        return self.D[i] @ tu[i] + self.C[i] @ tb + self.r[i]

    def jacobian_exact(self, iota):
        n = self.n_b + self.num_followers * self.n_u
        J = np.zeros((n, n))
        J[:self.n_b, :self.n_b] = self.A
        J[:self.n_b, self.n_b:] = self.B
        for i in range(self.num_followers):
            r0 = self.n_b + i * self.n_u
            J[r0:r0 + self.n_u, :self.n_b] = iota * self.C[i]
            J[r0:r0 + self.n_u, r0:r0 + self.n_u] = iota * self.D[i]
        return J

    def best_response(self, theta_b):
        """Followers' joint FOC solution (exact for the quadratic library)."""
        tb = np.asarray(theta_b, dtype=np.float64)
        return [np.linalg.solve(self.D[i], -(self.C[i] @ tb + self.r[i]))
                for i in range(self.num_followers)]


def build_gradient_field(synthetic_game, iota):
    """Scaled ascent field (leader grad, iota * each follower grad)."""

    def field(theta):
        parts = [synthetic_game.grad_leader(theta)]
        parts.extend(iota * synthetic_game.grad_follower(i, theta)
                     for i in range(synthetic_game.num_followers))
        return np.concatenate(parts)

    return field


def field_from_utilities(utility_leader, utility_followers, dims, iota, h=1e-6):
    """Central-difference ascent field for non-quadratic utility callables."""
    n_b, n_u = dims

    def grad_fd(fn, theta, lo, hi):
        g = np.zeros(hi - lo)
        for k in range(lo, hi):
            e = np.zeros_like(theta)
            e[k] = h
            g[k - lo] = (fn(theta + e) - fn(theta - e)) / (2 * h)
        return g

    def field(theta):
        parts = [grad_fd(utility_leader, theta, 0, n_b)]
        for i, fu in enumerate(utility_followers):
            lo = n_b + i * n_u
            parts.append(iota * grad_fd(fu, theta, lo, lo + n_u))
        return np.concatenate(parts)

    return field


def _random_spd(rng, n, eig_range):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = rng.uniform(eig_range[0], eig_range[1], size=n)
    return q @ np.diag(eigs) @ q.T


def random_contraction_game(rng, n_b=4, n_u=3, num_followers=2, coupling=0.2,
                            eig_range=(1.0, 2.0), tol=1e-10, max_tries=50):
    """Weakly coupled quadratic game with sym(J_Omega) certified negative
    definite at iota=1; fixed point theta_star is drawn at random."""
    for _ in range(max_tries):
        A = -_random_spd(rng, n_b, eig_range)
        D = [-_random_spd(rng, n_u, eig_range) for _ in range(num_followers)]
        B = rng.normal(scale=coupling / np.sqrt(n_b), size=(n_b, num_followers * n_u))
        C = [rng.normal(scale=coupling / np.sqrt(n_u), size=(n_u, n_b))
             for _ in range(num_followers)]
        tb = rng.normal(size=n_b)
        tu = [rng.normal(size=n_u) for _ in range(num_followers)]
        g = SyntheticGame(A, B, C, D, tb, tu)
        J = g.jacobian_exact(1.0)
        if np.linalg.eigvalsh(0.5 * (J + J.T)).max() < -tol:
            return g
        coupling *= 0.5
    raise ContractError("could not draw a negative-definite game")


def constructed_dse_game(rng, n_b=3, n_u=2, num_followers=2, saddle=False):
    """Game whose fixed point is an exact DSE (leader block decoupled).

    With saddle=True the first follower's Hessian gets a positive eigenvalue,
    so the second-order check must fail (negative control).
    """
    A = -_random_spd(rng, n_b, (1.0, 2.0))
    D = [-_random_spd(rng, n_u, (1.0, 2.0)) for _ in range(num_followers)]
    if saddle:
        w, v = np.linalg.eigh(D[0])
        w[-1] = +0.5
        D[0] = v @ np.diag(w) @ v.T
    B = np.zeros((n_b, num_followers * n_u))
    C = [rng.normal(scale=0.2, size=(n_u, n_b)) for _ in range(num_followers)]
    tb = rng.normal(size=n_b)
    tu = [rng.normal(size=n_u) for _ in range(num_followers)]
    return SyntheticGame(A, B, C, D, tb, tu)


# ---------------------------------------------------------------------------
# Jacobians, DSE checks, contraction constants
# ---------------------------------------------------------------------------

def jacobian_fd(field_fn, point, h=1e-5):
    """Central-difference Jacobian and its symmetric part."""
    if h <= 0:
        raise ContractError(f"fd step must be > 0, got {h}")
    point = np.asarray(point, dtype=np.float64)
    n = point.shape[0]
    J = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        J[:, k] = (field_fn(point + e) - field_fn(point - e)) / (2 * h)
    return J, 0.5 * (J + J.T)


def check_dse(point, synthetic_game, h=1e-5, tol=1e-6):
    """First/second-order DSE conditions at a point.

    Followers: own-gradient zero, own Hessian negative definite.  Leader:
    total derivative along the implicit best response (finite differences
    over the exact follower solve).
    """
    g = synthetic_game
    point = np.asarray(point, dtype=np.float64)
    foll_foc = [float(np.linalg.norm(g.grad_follower(i, point)))
                for i in range(g.num_followers)]
    foll_soc = [float(np.linalg.eigvalsh(g.D[i]).max())
                for i in range(g.num_followers)]

    def leader_total(theta_b):
        tu = g.best_response(theta_b)
        theta = np.concatenate([theta_b, np.concatenate(tu)])
        return g.utility_leader(theta)

    tb = point[:g.n_b]
    grad = np.zeros(g.n_b)
    hess = np.zeros((g.n_b, g.n_b))
    for k in range(g.n_b):
        e = np.zeros(g.n_b)
        e[k] = h
        grad[k] = (leader_total(tb + e) - leader_total(tb - e)) / (2 * h)
    f0 = leader_total(tb)
    for k in range(g.n_b):
        for j in range(k, g.n_b):
            ek = np.zeros(g.n_b)
            ej = np.zeros(g.n_b)
            ek[k] = h
            ej[j] = h
            val = (leader_total(tb + ek + ej) - leader_total(tb + ek - ej)
                   - leader_total(tb - ek + ej) + leader_total(tb - ek - ej)) / (4 * h * h)
            hess[k, j] = hess[j, k] = val
    _ = f0
    report = {
        "follower_foc_max": max(foll_foc),
        "follower_soc_max_eig": max(foll_soc),
        "leader_foc_norm": float(np.linalg.norm(grad)),
        "leader_soc_max_eig": float(np.linalg.eigvalsh(hess).max()),
    }
    report["first_order_ok"] = (report["follower_foc_max"] < tol
                                and report["leader_foc_norm"] < tol)
    report["second_order_ok"] = (report["follower_soc_max_eig"] < -tol
                                 and report["leader_soc_max_eig"] < tol)
    report["is_dse"] = report["first_order_ok"] and report["second_order_ok"]
    return report


@dataclass
class ContractionReport:
    applicable: bool
    kappa1: float = None
    kappa2: float = None
    alpha_b: float = None
    rate_bound: float = None
    lhs_norm_sq: float = None
    contraction_ok: bool = False


def contraction_analysis(J, tol=1e-10):
    """Constants of the local contraction argument.

    kappa1 = smallest singular value of -sym(J), kappa2 = largest singular
    value of J'J; applicable only when sym(J) is negative definite.
    """
    J = np.asarray(J, dtype=np.float64)
    M = 0.5 * (J + J.T)
    eig = np.linalg.eigvalsh(M)
    if eig.max() >= -tol:
        return ContractionReport(applicable=False)
    kappa1 = float(-eig.max())                 # sigma_min(-M)
    sv = np.linalg.svd(J, compute_uv=False)
    kappa2 = float(sv.max() ** 2)              # sigma_max(J'J)
    alpha = kappa1 / kappa2
    rate_sq = 1.0 - kappa1 ** 2 / kappa2
    rate_bound = float(np.sqrt(max(rate_sq, 0.0)))
    step = np.eye(J.shape[0]) + alpha * J
    lhs = float(np.linalg.svd(step, compute_uv=False).max() ** 2)
    ok = lhs <= rate_sq + 1e-9
    return ContractionReport(True, kappa1, kappa2, float(alpha), rate_bound,
                             lhs, ok)


def schur_timescale(A, B, D, floor=1e-6, margin=1e-3, tol=1e-10):
    """Smallest follower timescale making the assembled block matrix
    [[A, B], [B', iota*D]] negative definite, with an eigenvalue certificate.

    Threshold from iota * sigma_min(-D) * sigma_min(-A) > |B|_2^2; the
    returned iota sits just above it (or at the floor when B = 0).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    eig_a = np.linalg.eigvalsh(0.5 * (A + A.T))
    eig_d = np.linalg.eigvalsh(0.5 * (D + D.T))
    if eig_a.max() >= -tol or eig_d.max() >= -tol:
        raise ContractError("schur_timescale needs A and D negative definite")
    smin_a = float(-eig_a.max())
    smin_d = float(-eig_d.max())
    norm_b = float(np.linalg.svd(B, compute_uv=False).max()) if B.size else 0.0
    threshold = norm_b ** 2 / (smin_d * smin_a)
    iota = max(floor, threshold * (1.0 + margin))
    assembled = np.block([[A, B], [B.T, iota * D]])
    max_eig = float(np.linalg.eigvalsh(0.5 * (assembled + assembled.T)).max())
    return {"iota_min": float(iota), "threshold": float(threshold),
            "certificate_max_eig": max_eig, "certified": max_eig < -tol}


@dataclass
class SimReport:
    distances: np.ndarray
    empirical_rate: float
    converged: bool
    diverged: bool
    final_distance: float


def simulate_updates(field_fn, theta0, alpha, epochs, theta_star=None,
                     converge_tol=1e-6):
    """Iterate theta <- theta + alpha * field(theta); fit the geometric rate.

    Divergence is flagged when the distance grows by 10x over its starting
    value or goes non-finite.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    star = None if theta_star is None else np.asarray(theta_star, dtype=np.float64)
    distances = []
    d0 = None
    diverged = False
    for _ in range(epochs):
        theta = theta + alpha * field_fn(theta)
        if star is not None:
            d = float(np.linalg.norm(theta - star))
            distances.append(d)
            if d0 is None:
                d0 = max(d, 1e-12)
            if not np.isfinite(d) or d > 10.0 * d0 + 10.0:
                diverged = True
                break
    distances = np.asarray(distances)
    rate = float("nan")
    if distances.size >= 3:
        usable = distances[(distances > 1e-13) & np.isfinite(distances)]
        if usable.size >= 3:
            slope = np.polyfit(np.arange(usable.size), np.log(usable), 1)[0]
            rate = float(np.exp(slope))
    final = float(distances[-1]) if distances.size else float("nan")
    converged = (not diverged) and distances.size > 0 and final < converge_tol
    return SimReport(distances, rate, converged, diverged, final)


# ---------------------------------------------------------------------------
# Averaged dynamics over the follower-count distribution
# ---------------------------------------------------------------------------

class SharedPolicyGame:
    """Per-realization quadratic game over (theta_b, shared theta_u).

    All followers share one parameter block; the follower part of the field
    averages their gradients, so dimensions stay fixed across realizations.
    """

    def __init__(self, A, B, C_list, D_list, theta_star_b, theta_star_u):
        self.A = np.asarray(A)
        self.B = np.asarray(B)
        self.C = [np.asarray(c) for c in C_list]
        self.D = [np.asarray(d) for d in D_list]
        self.n_b = self.A.shape[0]
        self.n_u = self.D[0].shape[0]
        self.num_followers = len(self.D)
        tb = np.asarray(theta_star_b)
        tu = np.asarray(theta_star_u)
        self.theta_star = np.concatenate([tb, tu])
        self.r_b = -(self.A @ tb + self.B @ tu)
        self.r = [-(self.D[i] @ tu + self.C[i] @ tb)
                  for i in range(self.num_followers)]

    def field(self, theta, iota):
        tb = theta[:self.n_b]
        tu = theta[self.n_b:]
        lead = self.A @ tb + self.B @ tu + self.r_b
        foll = np.mean([self.D[i] @ tu + self.C[i] @ tb + self.r[i]
                        for i in range(self.num_followers)], axis=0)
        return np.concatenate([lead, iota * foll])

    def jacobian(self, iota):
        cbar = np.mean(self.C, axis=0)
        dbar = np.mean(self.D, axis=0)
        top = np.hstack([self.A, self.B])
        bot = np.hstack([iota * cbar, iota * dbar])
        return np.vstack([top, bot])


def random_shared_policy_family(rng, support, n_b=3, n_u=3, coupling=0.2,
                                eig_range=(1.0, 2.0)):
    """One SharedPolicyGame per follower count, all with the same theta_star."""
    tb = rng.normal(size=n_b)
    tu = rng.normal(size=n_u)
    family = {}
    for i_count in support:
        A = -_random_spd(rng, n_b, eig_range)
        B = rng.normal(scale=coupling / np.sqrt(n_b), size=(n_b, n_u))
        C = [rng.normal(scale=coupling / np.sqrt(n_u), size=(n_u, n_b))
             for _ in range(i_count)]
        D = [-_random_spd(rng, n_u, eig_range) for _ in range(i_count)]
        family[i_count] = SharedPolicyGame(A, B, C, D, tb, tu)
    return family


def averaged_dynamics_check(family, dist_weights=None, iota=1.0, epochs=800,
                            seeds=5, rng=None, tol=1e-10, converge_tol=1e-4):
    """Certify per-realization and averaged negative definiteness, then run
    the stochastic-follower-count iteration from random starts."""
    support = sorted(family)
    dims = {(family[i].n_b, family[i].n_u) for i in support}
    if len(dims) != 1:
        raise ContractError("shared-policy premise violated: families must share "
                            "leader and follower parameter dimensions")
    if dist_weights is None:
        dist_weights = {i: 1.0 / len(support) for i in support}
    star = family[support[0]].theta_star
    if any(not np.allclose(family[i].theta_star, star) for i in support):
        raise ContractError("family members disagree on the equilibrium point")

    per_i = {}
    avg_m = 0.0
    avg_j = 0.0
    for i in support:
        J = family[i].jacobian(iota)
        M = 0.5 * (J + J.T)
        per_i[i] = float(np.linalg.eigvalsh(M).max())
        avg_m = avg_m + dist_weights[i] * M
        avg_j = avg_j + dist_weights[i] * J
    avg_max_eig = float(np.linalg.eigvalsh(avg_m).max())
    contraction = contraction_analysis(avg_j, tol=tol)

    rng = rng or np.random.default_rng(0)
    runs = []
    ivals = np.asarray(support)
    pvals = np.asarray([dist_weights[i] for i in support])
    pvals = pvals / pvals.sum()
    for _ in range(seeds):
        theta = star + 0.5 * rng.normal(size=star.shape)
        for _ in range(epochs):
            i_e = int(rng.choice(ivals, p=pvals))
            theta = theta + contraction.alpha_b * family[i_e].field(theta, iota)
        runs.append(float(np.linalg.norm(theta - star)))
    return {
        "per_realization_max_eig": per_i,
        "per_realization_certified": all(v < -tol for v in per_i.values()),
        "averaged_max_eig": avg_max_eig,
        "averaged_certified": avg_max_eig < -tol,
        "alpha_b": contraction.alpha_b,
        "final_distances": runs,
        "all_converged": all(d < converge_tol for d in runs),
    }
