"""Slotted single-cell OFDMA uplink simulator.

Discrete TTIs; per-UE Bernoulli dPDU arrivals into FIFO buffers with ARQ;
finite-state Markov channels with imperfect BS-side CSI; per-RBG contention
(two or more transmitters on an RBG destroy every dPDU on it) plus an
independent per-RBG erasure on collision-free transmissions.

Randomness is split into named substreams spawned from the seed so a
straight-line reference implementation can replay a trace draw-for-draw:

  init    - one uniform per UE (stationary channel draw), then one per UE
            (channel change period), consumed at init in UE order
  arrival - one uniform per UE per TTI, always drawn (arrive iff u < p_a)
  channel - one uniform per UE per TTI, always drawn, used only when the
            UE's change countdown fires
  csi     - two uniforms per UE per TTI (error?, substitute pick)
  erasure - one uniform per RBG per TTI, always drawn, used only on RBGs
            with exactly one transmitter

Each EnvState is single-owner: mutate it only through step(); independent
environments may run in parallel workers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import game
from .errors import ConfigError, ProtocolError

TRACE_SCHEMA = "stackelmac.trace/1"


def stationary_distribution(transition):
    """Left fixed point of a row-stochastic matrix (uniform over ties)."""
    p = np.asarray(transition, dtype=np.float64)
    n = p.shape[0]
    a = np.vstack([p.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass
class UeLocalState:
    buffer: list = field(default_factory=list)   # dPDU sizes (bits), FIFO order
    channel: int = 0
    change_period: int = 1
    change_countdown: int = 1
    last_bitmap: tuple = None
    last_ucm: tuple = None
    last_dcm_bits: tuple = None

    @property
    def occupancy_bits(self):
        return sum(self.buffer)


@dataclass
class BsState:
    csi_est: list = field(default_factory=list)      # per-UE estimated state
    ucm_history: list = field(default_factory=list)  # per-UE last UCM tokens or None
    dcm_history: list = field(default_factory=list)  # per-UE last intent bits or None
    cum_rbg_usage: list = field(default_factory=list)  # x_i, non-decreasing


@dataclass
class LeaderObs:
    csi: tuple
    ucms: tuple      # per-UE tuple of UCM ints, or None before any slot
    dcms: tuple      # per-UE intent bits, or None before any slot


@dataclass
class FollowerObs:
    channel: int
    buffer_bits: int
    last_bitmap: tuple
    last_ucm: tuple
    dcm_bits: tuple


@dataclass
class StepResult:
    tti: int
    xi_rec: tuple            # delivered dPDUs per UE
    xi_tx: tuple             # loaded (attempted) dPDUs per UE
    collision_map: tuple     # transmitter count per RBG
    consistencies: tuple     # per-UE bitmap/intent similarity
    leader_reward: float
    follower_rewards: tuple
    leader_obs: LeaderObs = None
    follower_obs: tuple = None   # per-UE FollowerObs carrying this slot's DCM


class UdtsEnv:
    """Owns one EnvState-equivalent; see module docstring for stream layout."""

    def __init__(self, config, weights, num_ues, seed):
        if num_ues not in config.num_ues_range:
            raise ConfigError(f"num_ues={num_ues} not in admissible range "
                              f"{config.num_ues_range}")
        config.validate()
        self.config = config
        self.weights = weights
        self.num_ues = int(num_ues)
        self.seed = int(seed)
        streams = np.random.SeedSequence(self.seed).spawn(5)
        self._rng_init = np.random.default_rng(streams[0])
        self._rng_arrival = np.random.default_rng(streams[1])
        self._rng_channel = np.random.default_rng(streams[2])
        self._rng_csi = np.random.default_rng(streams[3])
        self._rng_erasure = np.random.default_rng(streams[4])

        self.tti = 0
        self.arrived_bits = 0
        self.delivered_bits = 0
        self.dropped_bits = 0
        self.dropped_dpdus = 0

        pi = stationary_distribution(config.channel_transition)
        cdf = np.cumsum(pi)
        self.ues = []
        lo, hi = config.channel_change_period
        for _ in range(self.num_ues):
            u = self._rng_init.random()
            state = int(np.searchsorted(cdf, u, side="right"))
            state = min(state, config.n_channel_states - 1)
            self.ues.append(UeLocalState(channel=state))
        for ue in self.ues:
            u = self._rng_init.random()
            period = lo if lo == hi else lo + int(u * (hi - lo + 1))
            ue.change_period = min(period, hi)
            ue.change_countdown = ue.change_period
        self.bs = BsState(csi_est=[0] * self.num_ues,
                          ucm_history=[None] * self.num_ues,
                          dcm_history=[None] * self.num_ues,
                          cum_rbg_usage=[0] * self.num_ues)
        self.estimate_csi()

    # -- sub-operations, applied in the order documented in step() ---------

    def sample_arrivals(self):
        cfg = self.config
        for i, ue in enumerate(self.ues):
            u = self._rng_arrival.random()
            if u < cfg.arrival_prob(i):
                self.arrived_bits += cfg.dpdu_bits
                if ue.occupancy_bits + cfg.dpdu_bits > cfg.buffer_cap_bits:
                    self.dropped_bits += cfg.dpdu_bits
                    self.dropped_dpdus += 1
                else:
                    ue.buffer.append(cfg.dpdu_bits)

    def evolve_channels(self):
        trans = np.asarray(self.config.channel_transition)
        for ue in self.ues:
            u = self._rng_channel.random()
            ue.change_countdown -= 1
            if ue.change_countdown <= 0:
                cdf = np.cumsum(trans[ue.channel])
                nxt = int(np.searchsorted(cdf, u, side="right"))
                ue.channel = min(nxt, self.config.n_channel_states - 1)
                ue.change_countdown = ue.change_period

    def estimate_csi(self):
        n_states = self.config.n_channel_states
        for i, ue in enumerate(self.ues):
            u_err = self._rng_csi.random()
            u_pick = self._rng_csi.random()
            if u_err < self.config.csi_error_prob and n_states > 1:
                others = [s for s in range(n_states) if s != ue.channel]
                self.bs.csi_est[i] = others[int(u_pick * len(others))]
            else:
                self.bs.csi_est[i] = ue.channel

    def nu(self, ue_index):
        return self.config.spectral_eff[self.ues[ue_index].channel]

    def resolve_transmissions(self, bitmaps):
        """Load head-of-line dPDUs onto selected RBGs and resolve contention.

        Returns (xi_rec, xi_tx, collision_map, delivered_positions) where
        delivered_positions[i] lists buffer indices to drop for UE i.
        """
        cfg = self.config
        m_count = cfg.num_rbgs
        collision_map = [0] * m_count
        for bm in bitmaps:
            for m in range(m_count):
                collision_map[m] += int(bm[m])
        erasure_u = self._rng_erasure.random(m_count)

        xi_tx, xi_rec, delivered_positions = [], [], []
        for i, bm in enumerate(bitmaps):
            cap = cfg.rbg_capacity_dpdus(self.nu(i))
            loads = []   # (rbg, [buffer positions])
            cursor = 0
            n_buf = len(self.ues[i].buffer)
            for m in range(m_count):
                if not bm[m]:
                    continue
                take = min(cap, n_buf - cursor)
                loads.append((m, list(range(cursor, cursor + take))))
                cursor += take
            tx = sum(len(pos) for _, pos in loads)
            rec_positions = []
            for m, pos in loads:
                if collision_map[m] != 1:
                    continue          # collision: everything on this RBG is lost
                if erasure_u[m] < cfg.tbler:
                    continue          # transport-block erasure
                rec_positions.extend(pos)
            xi_tx.append(tx)
            xi_rec.append(len(rec_positions))
            delivered_positions.append(rec_positions)
            self.bs.cum_rbg_usage[i] += sum(int(b) for b in bm)
        return xi_rec, xi_tx, collision_map, delivered_positions

    def apply_arq(self, delivered_positions):
        """Drop delivered dPDUs; failed ones keep their FIFO positions."""
        for ue, positions in zip(self.ues, delivered_positions):
            for pos in sorted(positions, reverse=True):
                self.delivered_bits += ue.buffer[pos]
                del ue.buffer[pos]

    def leader_observation(self):
        return LeaderObs(csi=tuple(self.bs.csi_est),
                         ucms=tuple(self.bs.ucm_history),
                         dcms=tuple(self.bs.dcm_history))

    def follower_observation(self, ue_index, dcm_bits=None):
        """UE-side observation; pass the freshly issued intent bits when the
        leader has already acted this slot (Algorithm-1 ordering)."""
        ue = self.ues[ue_index]
        bits = dcm_bits if dcm_bits is not None else ue.last_dcm_bits
        return FollowerObs(channel=ue.channel,
                           buffer_bits=ue.occupancy_bits,
                           last_bitmap=ue.last_bitmap,
                           last_ucm=ue.last_ucm,
                           dcm_bits=bits)

    def build_observations(self):
        follower = tuple(self.follower_observation(i) for i in range(self.num_ues))
        return self.leader_observation(), follower

    # ----------------------------------------------------------------------

    def step(self, dcm_tokens, ue_actions):
        """Advance one TTI.

        dcm_tokens: M ints in 0..I (RBG -> UE map, 0 = unallocated).
        ue_actions: per-UE (bitmap, ucm) with an M-bit bitmap and K UCM ints.

        Order: record DCM -> UEs act -> resolve -> ARQ -> rewards ->
        arrivals -> channel evolution -> CSI estimation -> observations.
        """
        cfg = self.config
        if len(ue_actions) != self.num_ues:
            raise ProtocolError(f"expected {self.num_ues} UE actions, "
                                f"got {len(ue_actions)}")
        if len(dcm_tokens) != cfg.num_rbgs:
            raise ProtocolError(f"DCM must hold {cfg.num_rbgs} tokens, "
                                f"got {len(dcm_tokens)}")
        bitmaps, ucms = [], []
        for i, (bitmap, ucm) in enumerate(ue_actions):
            if len(bitmap) != cfg.num_rbgs:
                raise ProtocolError(f"UE {i} bitmap must have {cfg.num_rbgs} bits")
            if len(ucm) != cfg.ucm_len:
                raise ProtocolError(f"UE {i} UCM must have {cfg.ucm_len} tokens")
            bitmaps.append(tuple(int(b) for b in bitmap))
            ucms.append(tuple(int(u) for u in ucm))

        dcm_bits = [game.dcm_bits_for_ue(dcm_tokens, i + 1, self.num_ues)
                    for i in range(self.num_ues)]
        xi_rec, xi_tx, collision_map, delivered = self.resolve_transmissions(bitmaps)
        self.apply_arq(delivered)

        cons = [game.consistency(bitmaps[i], dcm_bits[i]) for i in range(self.num_ues)]
        follower_rewards = tuple(
            game.follower_utility(xi_rec[i], xi_tx[i], cons[i], self.weights)
            for i in range(self.num_ues))
        leader_reward = game.leader_utility(xi_rec, self.bs.cum_rbg_usage, self.weights)

        for i, ue in enumerate(self.ues):
            ue.last_bitmap = bitmaps[i]
            ue.last_ucm = ucms[i]
            ue.last_dcm_bits = dcm_bits[i]
            self.bs.ucm_history[i] = ucms[i]
            self.bs.dcm_history[i] = dcm_bits[i]

        self.sample_arrivals()
        self.evolve_channels()
        self.estimate_csi()

        result = StepResult(tti=self.tti,
                            xi_rec=tuple(xi_rec),
                            xi_tx=tuple(xi_tx),
                            collision_map=tuple(collision_map),
                            consistencies=tuple(cons),
                            leader_reward=leader_reward,
                            follower_rewards=follower_rewards)
        leader_obs, follower_obs = self.build_observations()
        result.leader_obs = leader_obs
        result.follower_obs = follower_obs
        self.tti += 1
        return result

    # -- bookkeeping ---------------------------------------------------------

    @property
    def total_occupancy_bits(self):
        return sum(ue.occupancy_bits for ue in self.ues)

    def conservation_residual(self):
        """arrived - delivered - buffered - dropped; exactly 0 by construction."""
        return (self.arrived_bits - self.delivered_bits
                - self.total_occupancy_bits - self.dropped_bits)

    def snapshot(self):
        """Plain-data view of the full state (determinism comparisons)."""
        return {
            "tti": self.tti,
            "ues": [{
                "buffer": list(ue.buffer),
                "channel": ue.channel,
                "change_period": ue.change_period,
                "change_countdown": ue.change_countdown,
                "last_bitmap": None if ue.last_bitmap is None else list(ue.last_bitmap),
                "last_ucm": None if ue.last_ucm is None else list(ue.last_ucm),
                "last_dcm_bits": None if ue.last_dcm_bits is None else list(ue.last_dcm_bits),
            } for ue in self.ues],
            "bs": {
                "csi_est": list(self.bs.csi_est),
                "ucm_history": [None if u is None else list(u) for u in self.bs.ucm_history],
                "dcm_history": [None if d is None else list(d) for d in self.bs.dcm_history],
                "cum_rbg_usage": list(self.bs.cum_rbg_usage),
            },
            "counters": [self.arrived_bits, self.delivered_bits,
                         self.dropped_bits, self.dropped_dpdus],
        }


def compute_tbs(bitmap, nu, config):
    """Max transport block size in bits for the selected RBGs (floored product)."""
    pop = sum(int(b) for b in bitmap)
    return int(math.floor(pop * config.rbs_per_rbg * config.sc_per_rb
                          * config.symbols_per_slot * nu))


def trace_header(config_hash, seed, num_ues, config):
    return {"schema": TRACE_SCHEMA, "config_hash": config_hash, "seed": seed,
            "num_ues": num_ues, "num_rbgs": config.num_rbgs,
            "episode_len": config.episode_len}


def trace_record(result, env):
    """One JSON-lines record per TTI."""
    return {
        "t": result.tti,
        "xi_rec": list(result.xi_rec),
        "xi_tx": list(result.xi_tx),
        "collision_map": list(result.collision_map),
        "consistency": [round(c, 12) for c in result.consistencies],
        "leader_reward": result.leader_reward,
        "follower_rewards": list(result.follower_rewards),
        "bitmaps": [list(ue.last_bitmap) for ue in env.ues],
        "ucms": [list(ue.last_ucm) for ue in env.ues],
        "dcm_bits": [list(ue.last_dcm_bits) for ue in env.ues],
        "channels": [ue.channel for ue in env.ues],
        "csi_est": list(env.bs.csi_est),
        "buffers_bits": [ue.occupancy_bits for ue in env.ues],
        "x": list(env.bs.cum_rbg_usage),
    }
