"""Bandwidth shaping on a virtual clock.

Each transfer draws a bandwidth from N(B, jitter * B), clamped below at
``floor * B``, and costs ``8 * bytes / bandwidth`` seconds of simulated time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import ConfigError, RangeError


@dataclass(frozen=True)
class ShaperConfig:
    bandwidth: float = 80e6  # bits per second
    jitter: float = 0.2
    floor: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.jitter < 0 or not 0 < self.floor <= 1:
            raise ConfigError("jitter must be >= 0 and floor in (0, 1]")


def sample_bandwidth(cfg: ShaperConfig, rng) -> float:
    bw = cfg.bandwidth
    if cfg.jitter > 0:
        bw = rng.normal(cfg.bandwidth, cfg.jitter * cfg.bandwidth)
    return max(bw, cfg.floor * cfg.bandwidth)


def shape_delay(nbytes: int, cfg: ShaperConfig, rng) -> float:
    if nbytes < 0:
        raise RangeError("byte count must be non-negative")
    if nbytes == 0:
        return 0.0
    return 8.0 * nbytes / sample_bandwidth(cfg, rng)


def clamped_normal_moments(mean, std, floor):
    """Mean and standard deviation of max(N(mean, std^2), floor)."""
    if std == 0:
        v = max(mean, floor)
        return v, 0.0
    a = (floor - mean) / std
    p = stats.norm.cdf(a)
    phi = stats.norm.pdf(a)
    # E[X; X > floor] and E[X^2; X > floor] for the untruncated normal
    upper_mean = mean * (1 - p) + std * phi
    upper_sq = (mean ** 2 + std ** 2) * (1 - p) + std * (mean + floor) * phi
    m1 = upper_mean + floor * p
    m2 = upper_sq + floor ** 2 * p
    return m1, float(np.sqrt(max(m2 - m1 ** 2, 0.0)))


class VirtualClock:
    """Tracks when stages and link directions become free.

    Links are keyed by ``(stage_a, stage_b)``; each direction is an
    independent resource. With ``realtime`` the shaped delays are also slept.
    """

    def __init__(self, cfg: ShaperConfig, realtime=False):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.realtime = realtime
        self.now = 0.0
        self.stage_free = {}
        self.link_free = {}

    def compute(self, stage, ready, duration) -> float:
        start = max(self.stage_free.get(stage, self.now), ready)
        end = start + duration
        self.stage_free[stage] = end
        return end

    def transfer(self, src, dst, nbytes, ready) -> float:
        delay = shape_delay(nbytes, self.cfg, self.rng)
        if self.realtime and delay > 0:
            time.sleep(delay)
        start = max(self.link_free.get((src, dst), self.now), ready)
        end = start + delay
        self.link_free[(src, dst)] = end
        return end

    def barrier(self) -> float:
        """Advance to the latest pending event; returns the elapsed span."""
        latest = max([self.now, *self.stage_free.values(), *self.link_free.values()])
        span = latest - self.now
        self.now = latest
        self.stage_free = {k: latest for k in self.stage_free}
        self.link_free = {k: latest for k in self.link_free}
        return span
