"""Uplink-scheduling leader/follower game: simulator, token policies,
PPO training, baselines, KPI evaluation, and a numerical theory lab."""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
