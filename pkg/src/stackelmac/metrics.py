"""KPI computation and the policy-evaluation harness.

Throughput is reported in both units (bits/s with dPDUs converted to bits,
and dPDUs per active UE per TTI), fairness as Jain's index over cumulative
RBG usage, efficiency as delivered dPDUs per consumed RBG.  The harness
sweeps scenario grids with greedy decoding by default and aggregates
mean/stddev over independent runs per cell.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import game
from .env import UdtsEnv
from .errors import CheckpointError


@dataclass
class EpisodeTrace:
    num_ues: int
    tti_duration: float
    dpdu_bits: int
    xi_rec: list = field(default_factory=list)        # [T][I]
    xi_tx: list = field(default_factory=list)
    collision_map: list = field(default_factory=list)  # [T][M]
    consistencies: list = field(default_factory=list)
    leader_rewards: list = field(default_factory=list)
    follower_rewards: list = field(default_factory=list)
    x_final: tuple = ()

    def add(self, res):
        self.xi_rec.append(list(res.xi_rec))
        self.xi_tx.append(list(res.xi_tx))
        self.collision_map.append(list(res.collision_map))
        self.consistencies.append(list(res.consistencies))
        self.leader_rewards.append(res.leader_reward)
        self.follower_rewards.append(list(res.follower_rewards))


def throughput(trace):
    """(bits per second, dPDUs per active UE per TTI).

    Sequential accumulation, so an incremental computation that adds each
    slot's per-UE mean in order reproduces the batch value bit-for-bit.
    """
    t = len(trace.xi_rec)
    if t == 0:
        return 0.0, 0.0
    acc = 0.0
    for row in trace.xi_rec:
        acc += float(np.mean(row))
    dpdus = acc / t
    bits_per_s = acc * trace.dpdu_bits / (t * trace.tti_duration)
    return bits_per_s, dpdus


def rbg_efficiency(trace):
    """Delivered dPDUs over total RBG usage; 0 when nothing was consumed."""
    used = float(np.sum(trace.x_final))
    if used == 0.0:
        return 0.0
    return float(np.sum(trace.xi_rec)) / used


def collision_rate(trace):
    """Collided RBG-slots over occupied RBG-slots."""
    cmap = np.asarray(trace.collision_map)
    occupied = int((cmap >= 1).sum())
    if occupied == 0:
        return 0.0
    return int((cmap >= 2).sum()) / occupied


def kpis(trace):
    bits_s, dpdus = throughput(trace)
    return {
        "throughput_bits_per_s": bits_s,
        "throughput_dpdus_per_ue_tti": dpdus,
        "jfi": game.jfi(trace.x_final) if len(trace.x_final) else 1.0,
        "rbg_efficiency": rbg_efficiency(trace),
        "collision_rate": collision_rate(trace),
        "mean_consistency": float(np.mean(np.asarray(trace.consistencies)))
        if trace.consistencies else 0.0,
        "mean_leader_utility": float(np.mean(trace.leader_rewards))
        if trace.leader_rewards else 0.0,
    }


# ---------------------------------------------------------------------------
# Per-slot drivers: one uniform act() interface across policy types.
# ---------------------------------------------------------------------------

class TokenDriver:
    """Trained (or fresh) token policies; greedy by default."""

    def __init__(self, leader, follower, decode="greedy", temperature=1.0):
        self.leader = leader
        self.follower = follower
        self.decode = decode
        self.temperature = temperature

    def begin_episode(self, env):
        pass

    def act(self, env, lobs, rng):
        i_t = env.num_ues
        lprompt = self.leader.serialize(lobs)
        if self.decode == "greedy":
            dcm_act = self.leader.greedy(lprompt, i_t)
        else:
            dcm_act, _ = self.leader.generate(lprompt, i_t, self.temperature, rng)
        dcm_map = self.leader.decode(dcm_act.tokens)
        dcm_bits = [game.dcm_bits_for_ue(dcm_map, i + 1, i_t) for i in range(i_t)]
        actions = []
        for i in range(i_t):
            fprompt = self.follower.serialize(env.follower_observation(i, dcm_bits[i]))
            if self.decode == "greedy":
                act = self.follower.greedy(fprompt, i_t)
            else:
                act, _ = self.follower.generate(fprompt, i_t, self.temperature, rng)
            actions.append(self.follower.decode(act.tokens))
        return dcm_map, actions

    def observe(self, res):
        pass


class DictatorDriver(TokenDriver):
    """Leader schedules; followers copy the intent bits verbatim."""

    def act(self, env, lobs, rng):
        i_t = env.num_ues
        lprompt = self.leader.serialize(lobs)
        if self.decode == "greedy":
            dcm_act = self.leader.greedy(lprompt, i_t)
        else:
            dcm_act, _ = self.leader.generate(lprompt, i_t, self.temperature, rng)
        dcm_map = self.leader.decode(dcm_act.tokens)
        actions = []
        for i in range(i_t):
            bits = game.dcm_bits_for_ue(dcm_map, i + 1, i_t)
            actions.append((tuple(bits), (0,) * env.config.ucm_len))
        return dcm_map, actions


class AlohaDriver:
    """Enhanced slotted ALOHA followers; no scheduling intent is issued."""

    def __init__(self, aloha_config=None):
        from .baselines import AlohaConfig, AlohaPolicy
        self._cls = AlohaPolicy
        self._cfg = aloha_config or AlohaConfig()
        self.policy = None
        self._last_bitmaps = None

    def begin_episode(self, env):
        self.policy = self._cls(env.num_ues, env.config.num_rbgs, self._cfg)

    def act(self, env, lobs, rng):
        i_t = env.num_ues
        dcm_map = (0,) * env.config.num_rbgs
        actions = []
        for i in range(i_t):
            bitmap, _ = self.policy.act(i, env.follower_observation(i, None), rng)
            actions.append((bitmap, (0,) * env.config.ucm_len))
        self._last_bitmaps = [a[0] for a in actions]
        return dcm_map, actions

    def observe(self, res):
        for i, bitmap in enumerate(self._last_bitmaps):
            transmitted = any(bitmap)
            collided = any(bitmap[m] and res.collision_map[m] >= 2
                           for m in range(len(bitmap)))
            self.policy.observe(i, transmitted, collided, res.xi_rec[i])


class MappoDriver:
    """Fixed-width MAPPO nets (S or G mode), greedy by default."""

    def __init__(self, runner, greedy=True, temperature=1.0):
        self.runner = runner
        self.greedy = greedy
        self.temperature = temperature
        self.adapted = runner.leader_net.adapter

    def begin_episode(self, env):
        pass

    def act(self, env, lobs, rng):
        i_t = env.num_ues
        dcm_map, _, _, _ = self.runner.leader_act(lobs, rng, self.temperature,
                                                  self.greedy)
        dcm_bits = [game.dcm_bits_for_ue(dcm_map, i + 1, i_t) for i in range(i_t)]
        actions = []
        for i in range(i_t):
            obs = env.follower_observation(i, dcm_bits[i])
            (bitmap, ucm), _, _, _ = self.runner.follower_act(
                obs, i, i_t, rng, self.temperature, self.greedy)
            actions.append((bitmap, ucm))
        return dcm_map, actions

    def observe(self, res):
        pass


def run_episode(env, driver, rng):
    """Roll one full episode; returns the EpisodeTrace."""
    trace = EpisodeTrace(num_ues=env.num_ues, tti_duration=env.config.tti_duration,
                         dpdu_bits=env.config.dpdu_bits)
    driver.begin_episode(env)
    lobs = env.leader_observation()
    for _ in range(env.config.episode_len):
        dcm_map, actions = driver.act(env, lobs, rng)
        res = env.step(dcm_map, actions)
        driver.observe(res)
        trace.add(res)
        lobs = res.leader_obs
    trace.x_final = tuple(env.bs.cum_rbg_usage)
    return trace


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------

def scenario_env_config(env_config, scenario):
    """Apply a scenario cell's overrides onto the base environment config."""
    over = {}
    i = int(scenario["i"])
    if i not in env_config.num_ues_range:
        over["num_ues_range"] = tuple(sorted(set(env_config.num_ues_range) | {i}))
    if "p_a" in scenario and scenario["p_a"] is not None:
        pa = scenario["p_a"]
        over["arrival_probs"] = (tuple(pa) if isinstance(pa, (list, tuple))
                                 else (float(pa),))
    if "tbler" in scenario and scenario["tbler"] is not None:
        over["tbler"] = float(scenario["tbler"])
    if "num_rbgs" in scenario and scenario["num_rbgs"] is not None:
        over["num_rbgs"] = int(scenario["num_rbgs"])
    return replace(env_config, **over) if over else env_config


def evaluate_cell(env_config, weights, driver, scenario, runs, episodes_per_run,
                  seed):
    """Mean/stddev KPIs for one (policy, scenario) cell."""
    i = int(scenario["i"])
    cfg = scenario_env_config(env_config, scenario)
    run_means = []
    ss = np.random.SeedSequence(seed).spawn(runs)
    for r in range(runs):
        rng = np.random.default_rng(ss[r])
        ep_kpis = []
        for ep in range(episodes_per_run):
            env_seed = int(rng.integers(2 ** 31 - 1))
            env = UdtsEnv(cfg, weights, i, env_seed)
            trace = run_episode(env, driver, rng)
            ep_kpis.append(kpis(trace))
        run_means.append({k: float(np.mean([e[k] for e in ep_kpis]))
                          for k in ep_kpis[0]})
    agg = {}
    for k in run_means[0]:
        vals = [m[k] for m in run_means]
        agg[k + "_mean"] = float(np.mean(vals))
        agg[k + "_std"] = float(np.std(vals))
    return agg


CSV_COLUMNS = [
    "policy", "scenario", "i", "p_a", "tbler", "num_rbgs", "runs", "episodes",
    "adapted",
    "throughput_bits_per_s_mean", "throughput_bits_per_s_std",
    "throughput_dpdus_per_ue_tti_mean", "throughput_dpdus_per_ue_tti_std",
    "jfi_mean", "jfi_std", "rbg_efficiency_mean", "rbg_efficiency_std",
    "collision_rate_mean", "collision_rate_std",
    "mean_consistency_mean", "mean_consistency_std",
    "mean_leader_utility_mean", "mean_leader_utility_std",
]


def evaluate(policies, scenarios, env_config, weights, eval_config, seed):
    """Full grid: one row per (policy, scenario).

    policies: mapping name -> driver (drivers are reused across cells; they
    reset per episode via begin_episode).
    """
    rows = []
    for p_idx, (name, driver) in enumerate(sorted(policies.items())):
        for s_idx, scenario in enumerate(scenarios):
            agg = evaluate_cell(env_config, weights, driver, scenario,
                                eval_config.runs, eval_config.episodes_per_run,
                                seed + 1009 * p_idx + 9176 * s_idx)
            row = {
                "policy": name,
                "scenario": scenario.get("label", f"s{s_idx}"),
                "i": scenario["i"],
                "p_a": scenario.get("p_a", ""),
                "tbler": scenario.get("tbler", env_config.tbler),
                "num_rbgs": scenario.get("num_rbgs", env_config.num_rbgs),
                "runs": eval_config.runs,
                "episodes": eval_config.episodes_per_run,
                "adapted": getattr(driver, "adapted", False),
            }
            row.update(agg)
            rows.append(row)
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_plot_data(path, rows, sweep_key):
    """Companion JSON keyed by the swept scenario field."""
    data = {}
    for row in rows:
        data.setdefault(row["policy"], []).append({
            "x": row.get(sweep_key),
            "throughput_dpdus_per_ue_tti": row["throughput_dpdus_per_ue_tti_mean"],
            "throughput_bits_per_s": row["throughput_bits_per_s_mean"],
            "jfi": row["jfi_mean"],
            "rbg_efficiency": row["rbg_efficiency_mean"],
        })
    with open(path, "w") as fh:
        json.dump({"sweep": sweep_key, "series": data}, fh, indent=2,
                  sort_keys=True)


def verify_checkpoint_compat(meta, policy_config, env_config, checkpoint_path):
    """Refuse to evaluate a checkpoint whose vocabulary/schema hash differs
    from the one implied by the current configuration."""
    from .policy import compat_hash
    expected = compat_hash(policy_config, env_config)
    got = meta.get("compat_hash", "")
    if got != expected:
        raise CheckpointError(
            f"checkpoint {checkpoint_path} is incompatible with the current "
            f"configuration: checkpoint compat hash {got!r}, "
            f"config compat hash {expected!r}")
