"""Control-channel models applied to the encoder's latent vector.

Noise power is referenced to the pre-fading empirical signal power of the
batch being transmitted: sigma_w^2 = mean(z^2) / 10^(snr_db/10).  Rayleigh
gains are magnitudes of standard complex normals (mean-square one), drawn
fresh per element per transmission, before the noise draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

MODES = ("ideal", "awgn", "rayleigh-awgn")


@dataclass(frozen=True)
class ChannelConfig:
    mode: str = "ideal"
    snr_db: float = 20.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown channel mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "ideal" and not math.isfinite(self.snr_db):
            raise ConfigError(f"snr_db must be finite for mode {self.mode!r}, got {self.snr_db}")


def draw_realization(cfg: ChannelConfig, shape, signal_power: float,
                     rng: np.random.Generator):
    """One channel realization as (gain, noise) arrays; None where absent.

    Draw order is fixed (gain first, then noise) so both the array and the
    graph paths consume the stream identically.
    """
    if cfg.mode == "ideal":
        return None, None
    if rng is None:
        raise ConfigError(f"channel mode {cfg.mode!r} needs an rng")
    gain = None
    if cfg.mode == "rayleigh-awgn":
        re = rng.normal(0.0, math.sqrt(0.5), size=shape)
        im = rng.normal(0.0, math.sqrt(0.5), size=shape)
        gain = np.hypot(re, im)
    sigma2 = float(signal_power) / (10.0 ** (cfg.snr_db / 10.0))
    noise = rng.normal(0.0, math.sqrt(sigma2), size=shape)
    return gain, noise


def apply_channel(z: np.ndarray, cfg: ChannelConfig, rng=None) -> np.ndarray:
    """Pass a latent array through the channel; ideal mode returns z untouched."""
    z = np.asarray(z)
    if cfg.mode == "ideal" or z.size == 0:
        return z
    power = float(np.mean(np.square(z, dtype=np.float64)))
    gain, noise = draw_realization(cfg, z.shape, power, rng)
    out = z
    if gain is not None:
        out = out * gain.astype(z.dtype)
    out = out + noise.astype(z.dtype)
    return out.astype(z.dtype, copy=False)


def apply_channel_graph(z: Tensor, cfg: ChannelConfig, rng=None) -> Tensor:
    """Graph version for training through the channel.

    Gain and noise enter as constants of the current realization, so the
    gradient with respect to z is the gain itself.  Consumes the rng exactly
    like apply_channel; outputs match it bit for bit.
    """
    if cfg.mode == "ideal" or z.data.size == 0:
        return z
    power = float(np.mean(np.square(z.data, dtype=np.float64)))
    gain, noise = draw_realization(cfg, z.shape, power, rng)
    out = z
    if gain is not None:
        out = out * Tensor(gain.astype(z.dtype))
    return out + Tensor(noise.astype(z.dtype))
