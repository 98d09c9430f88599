"""Run configuration: dataclasses, YAML loading, validation, hashing.

A run is described by one YAML file with flat keys inside sections
(env / game / policy / train / eval / theory).  Units are documented on
each field.  Seed and output directory may be overridden via the
environment variables STACKELMAC_SEED and STACKELMAC_OUT.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .errors import ConfigError

DEFAULT_TRANSITION = [
    [0.8, 0.2, 0.0],
    [0.2, 0.6, 0.2],
    [0.0, 0.2, 0.8],
]


@dataclass
class EnvConfig:
    """Single-cell OFDMA uplink parameters.

    Counts are dimensionless, durations in seconds, sizes in bits.
    """

    num_ues_range: tuple = (3, 4, 5)          # admissible I values
    num_rbgs: int = 5                         # M
    episode_len: int = 24                     # T, TTIs per episode
    tti_duration: float = 5e-3                # seconds
    arrival_probs: tuple = (0.1, 0.3, 0.7)    # per-UE Bernoulli rate, cycled over UEs
    dpdu_bits: int = 256                      # fixed dPDU size
    buffer_cap_bits: float = math.inf         # per-UE FIFO capacity, inf = unbounded
    tbler: float = 1e-3                       # erasure prob on collision-free RBGs
    rbs_per_rbg: int = 1
    sc_per_rb: int = 12
    symbols_per_slot: int = 14
    spectral_eff: tuple = (1.0, 2.0, 4.0)     # per channel state (poor, medium, good)
    channel_transition: tuple = tuple(tuple(r) for r in DEFAULT_TRANSITION)
    channel_change_period: tuple = (1, 2)     # TTIs; int = fixed, (lo, hi) = per-UE draw
    csi_error_prob: float = 0.1               # symmetric substitution probability
    ucm_len: int = 2                          # K, tokens per uplink control message
    ucm_vocab_size: int = 8                   # V_ucm, signaling alphabet size

    def __post_init__(self):
        self.num_ues_range = tuple(int(i) for i in self.num_ues_range)
        self.arrival_probs = tuple(float(p) for p in self.arrival_probs)
        self.spectral_eff = tuple(float(v) for v in self.spectral_eff)
        self.channel_transition = tuple(tuple(float(x) for x in row)
                                        for row in self.channel_transition)
        if isinstance(self.channel_change_period, (int, float)):
            self.channel_change_period = (int(self.channel_change_period),) * 2
        else:
            self.channel_change_period = tuple(int(x) for x in self.channel_change_period)
        self.validate()

    def validate(self):
        if self.num_rbgs < 1:
            raise ConfigError(f"num_rbgs must be >= 1, got {self.num_rbgs}")
        if not self.num_ues_range or min(self.num_ues_range) < 1:
            raise ConfigError(f"num_ues_range must hold counts >= 1, got {self.num_ues_range}")
        for p in self.arrival_probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"arrival_probs entries must lie in [0,1], got {p}")
        if not 0.0 <= self.tbler <= 1.0:
            raise ConfigError(f"tbler must lie in [0,1], got {self.tbler}")
        if not 0.0 <= self.csi_error_prob <= 1.0:
            raise ConfigError(f"csi_error_prob must lie in [0,1], got {self.csi_error_prob}")
        for name in ("episode_len", "rbs_per_rbg", "sc_per_rb", "symbols_per_slot",
                     "dpdu_bits", "ucm_len", "ucm_vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tti_duration <= 0:
            raise ConfigError(f"tti_duration must be > 0, got {self.tti_duration}")
        if self.buffer_cap_bits <= 0:
            raise ConfigError(f"buffer_cap_bits must be > 0, got {self.buffer_cap_bits}")
        n = len(self.spectral_eff)
        trans = np.asarray(self.channel_transition, dtype=np.float64)
        if trans.shape != (n, n):
            raise ConfigError(f"channel_transition must be {n}x{n} to match "
                              f"{n} channel states, got shape {trans.shape}")
        if np.any(trans < 0):
            raise ConfigError("channel_transition entries must be >= 0")
        rowsums = trans.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > 1e-12):
            raise ConfigError(f"channel_transition rows must sum to 1 within 1e-12, "
                              f"got sums {rowsums.tolist()}")
        lo, hi = self.channel_change_period
        if lo < 1 or hi < lo:
            raise ConfigError(f"channel_change_period must be >= 1 with lo <= hi, "
                              f"got {self.channel_change_period}")

    @property
    def n_channel_states(self):
        return len(self.spectral_eff)

    def arrival_prob(self, ue_index):
        """Per-UE arrival probability, cycled over the configured list."""
        return self.arrival_probs[ue_index % len(self.arrival_probs)]

    def rbg_capacity_bits(self, nu):
        """Bits one RBG carries in a slot at spectral efficiency nu (Eq.-1 product)."""
        return int(math.floor(self.rbs_per_rbg * self.sc_per_rb
                              * self.symbols_per_slot * nu))

    def rbg_capacity_dpdus(self, nu):
        """Whole dPDUs one RBG carries; dPDUs never span RBGs."""
        return self.rbg_capacity_bits(nu) // self.dpdu_bits


@dataclass
class GameWeights:
    """Utility weights (leader fairness, follower efficiency/consistency)."""

    rho1: float = 8.0     # follower transmission-efficiency weight
    rho2: float = 10.0    # follower DCM-consistency weight
    epsilon: float = 5.0  # leader fairness weight
    gamma: float = 0.95   # discount
    lam: float = 0.9      # GAE factor

    def __post_init__(self):
        for name in ("rho1", "rho2", "epsilon", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("gamma and lam must lie in [0,1]")


@dataclass
class PolicyConfig:
    """Architecture of the token policies (leader and shared follower)."""

    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 192
    i_max: int = 10        # largest UE count the vocabulary supports
    init_scale: float = 0.05

    def __post_init__(self):
        for name in ("n_blocks", "d_model", "n_heads", "d_ff", "max_seq_len", "i_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by "
                              f"n_heads ({self.n_heads})")


@dataclass
class TrainConfig:
    """PPO training schedule (Algorithm-1 loop)."""

    clip_eps: float = 0.1
    entropy_coeff: float = 0.01
    kl_coeff: float = 0.01
    actor_rate: float = 5e-4        # alpha (leader); follower rate = iota_u * alpha
    critic_rate: float = 1e-5       # beta
    iota_u: float = 1.0             # follower timescale factor
    ppo_epochs: int = 5
    minibatch_size: int = 128
    buffer_episodes: int = 10       # episodes collected before an update round
    temp_start: float = 3.0
    temp_end: float = 0.3
    max_epochs: int = 2000
    advantage_norm: bool = True
    optimizer: str = "adam"         # "adam" (cosine-decayed) or "sgd"
    cosine_decay: bool = True
    reward_scale_leader: float = 0.0   # 0 = auto (M * max dPDUs per RBG + epsilon)
    reward_scale_follower: float = 0.0  # 0 = auto (rho1 + rho2)
    checkpoint_every: int = 0       # epochs; 0 = only final
    eval_every: int = 0             # epochs; 0 = never during training

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must lie in (0,1), got {self.clip_eps}")
        for name in ("actor_rate", "critic_rate", "iota_u", "temp_start", "temp_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("ppo_epochs", "minibatch_size", "buffer_episodes", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class EvalConfig:
    """Evaluation harness settings."""

    runs: int = 5                   # independent runs per scenario cell
    episodes_per_run: int = 8
    decode: str = "greedy"          # "greedy" or "sample"
    sample_temperature: float = 1.0
    scenarios: tuple = ()           # mappings: {i, p_a?, tbler?, num_rbgs?, label?}
    policies: tuple = ()            # mappings: {type, name?, checkpoint?, ...}

    def __post_init__(self):
        if self.runs < 1 or self.episodes_per_run < 1:
            raise ConfigError("runs and episodes_per_run must be >= 1")
        if self.decode not in ("greedy", "sample"):
            raise ConfigError(f"decode must be 'greedy' or 'sample', got {self.decode!r}")


@dataclass
class TheoryConfig:
    """Theory-suite sizes and tolerances."""

    potential_max_ues: int = 3
    potential_max_rbgs: int = 3
    potential_draws: int = 100
    ne_instances: int = 200
    contraction_games: int = 50
    schur_triples: int = 50
    averaged_support: tuple = (2, 3)
    averaged_seeds: int = 5
    neg_definite_tol: float = 1e-10
    fd_step: float = 1e-5
    include_negative_controls: bool = True

    def __post_init__(self):
        if self.potential_max_ues > 4 or self.potential_max_rbgs > 4:
            raise ConfigError("potential suite is capped at I <= 4, M <= 4")


@dataclass
class RunConfig:
    """Top-level bundle, one per run."""

    env: EnvConfig = field(default_factory=EnvConfig)
    game: GameWeights = field(default_factory=GameWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)

    def to_dict(self):
        d = asdict(self)
        # JSON cannot carry inf; keep the YAML convention of the string "inf"
        if math.isinf(d["env"]["buffer_cap_bits"]):
            d["env"]["buffer_cap_bits"] = "inf"
        return d

    def hash(self):
        """Stable hash of the full configuration (first 12 hex chars)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_json_fallback)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _json_fallback(obj):
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


_SECTIONS = {"env": EnvConfig, "game": GameWeights, "policy": PolicyConfig,
             "train": TrainConfig, "eval": EvalConfig, "theory": TheoryConfig}


def _build_section(cls, data, section):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {sorted(unknown)}")
    coerced = {}
    for key, val in data.items():
        if key == "buffer_cap_bits" and isinstance(val, str):
            if val.lower() in ("inf", "infinity", "unbounded"):
                val = math.inf
            else:
                raise ConfigError(f"buffer_cap_bits: cannot parse {val!r}")
        if isinstance(val, list):
            val = tuple(tuple(x) if isinstance(x, list) else x for x in val)
        coerced[key] = val
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def from_dict(data):
    data = data or {}
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {name: _build_section(cls, data.get(name), name)
             for name, cls in _SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path):
    """Load and validate a YAML run configuration."""
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data)
