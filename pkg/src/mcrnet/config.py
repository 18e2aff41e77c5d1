"""Flat key=value experiment configuration.

One schema covers model, task, meta-training, and channel settings so a
single file plus --key=value overrides fully describes a run.  The canonical
serialization is key-sorted, one pair per line; every CLI output embeds it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .channel import ChannelConfig
from .data import TaskSpec
from .errors import ConfigError
from .meta import MetaConfig
from .model import ModelConfig


@dataclass
class ExperimentConfig:
    # model
    channels: int = 64
    cr_stages: int = 3
    mhsa_blocks: int = 3
    heads: int = 4
    dwcg_modules: int = 2
    # task / data
    height: int = 32
    width: int = 32
    bits: int = 4
    generator: str = "ramp-beam"
    n_ramps: int = 2
    freq_lo: float = 0.05
    freq_hi: float = 0.8
    count: int = 128
    # meta-training
    inner_lr: float = 1e-3
    outer_lr: float = 5e-4
    inner_steps: int = 1
    meta_batch: int = 8
    max_iters: int = 1000
    patience: int = 50
    val_every: int = 10
    val_tasks: int = 4
    k_support: int = 100
    k_query: int = 64
    order: str = "first-order"
    # channel
    channel_mode: str = "ideal"
    snr_db: float = 20.0
    # run
    seed: int = 0

    # -- derived views ----------------------------------------------------

    @property
    def hw(self) -> int:
        return self.height * self.width

    def model_config(self) -> ModelConfig:
        return ModelConfig(hw=self.hw, channels=self.channels, cr_stages=self.cr_stages,
                           mhsa_blocks=self.mhsa_blocks, heads=self.heads,
                           dwcg_modules=self.dwcg_modules).validate()

    def task_spec(self) -> TaskSpec:
        return TaskSpec(height=self.height, width=self.width, bits=self.bits,
                        generator=self.generator, n_ramps=self.n_ramps,
                        freq_lo=self.freq_lo, freq_hi=self.freq_hi)

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(mode=self.channel_mode, snr_db=self.snr_db)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr,
                          inner_steps=self.inner_steps, meta_batch=self.meta_batch,
                          max_iters=self.max_iters, patience=self.patience,
                          val_every=self.val_every, val_tasks=self.val_tasks,
                          k_support=self.k_support, k_query=self.k_query,
                          order=self.order, channel=self.channel_config())

    # -- text form ----------------------------------------------------------

    def to_lines(self) -> list:
        """Canonical key-sorted key=value lines."""
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        return [f"{name}={vals[name]}" for name in sorted(vals)]

    def set_key(self, key: str, raw: str) -> None:
        kinds = _field_kinds()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kind = kinds[key]
        try:
            value = kind(raw)
        except ValueError:
            raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        cfg = cls()
        seen = set()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                key, sep, raw = text.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
                key = key.strip()
                if key in seen:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                seen.add(key)
                cfg.set_key(key, raw.strip())
        return cfg

    def apply_overrides(self, pairs) -> None:
        """Apply --key=value strings from the command line."""
        for item in pairs:
            if not item.startswith("--"):
                raise ConfigError(f"unexpected argument {item!r}; overrides look like --key=value")
            body = item[2:]
            key, sep, raw = body.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is missing '=value'")
            self.set_key(key.strip(), raw)


def _field_kinds() -> dict:
    defaults = ExperimentConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(ExperimentConfig)}
