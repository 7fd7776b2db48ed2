"""Flat key=value run configuration.

Every knob in the harness lives here with its default; a config file
overrides defaults one `key = value` line at a time. Unknown keys are an
error so typos fail fast instead of silently running the wrong experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    """Bad config file, key, value, or wiring combination."""


@dataclass
class Config:
    # model
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    max_seq: int = 160
    vocab_size: int = 1024
    head_hidden: int = 64
    head_layers: int = 2
    head_heads: int = 2
    sample_steps: int = 4
    state_mlp_hidden: int = 32
    # proprio tokenizer
    proprio_dims: int = 15
    proprio_bins: int = 256
    proprio_clip_min: float = -3.0
    proprio_clip_max: float = 3.0
    # synthetic task
    grid: int = 10
    horizon: int = 10
    action_dim: int = 2
    patch_noise: float = 0.5
    task_seed: int = 7
    eval_episodes: int = 200
    # wiring
    encoding: str = "tokenized"   # none | tokenized | mlp_vlm | mlp_act
    retention: str = "selected"   # dense | selected | mean | max_topk | random_k
    guidance: str = "joint"       # language | proprio | joint
    use_context: bool = True
    force_keep_all: bool = False
    pool_topk: int = 25
    pool_random: int = 50
    # selector anneal
    alpha_start: float = 1.0
    alpha_end: float = 0.01
    # training
    train_steps: int = 5000
    batch_size: int = 4
    lr: float = 3e-4
    warmup_frac: float = 0.05
    hold_frac: float = 0.10
    decay_frac: float = 0.85
    final_lr_factor: float = 0.5
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    ema_decay: float = 0.999
    log_every: int = 50
    eval_at_init: bool = True
    # latency bench (runs on its own profile: wider features, larger grid)
    bench_embed_dim: int = 64
    bench_grid: int = 16
    bench_steps: int = 1000
    bench_warmup: int = 50
    bench_retention: float = 0.15

    @property
    def n_visual(self):
        return self.grid * self.grid

    def validate(self):
        if self.encoding not in ("none", "tokenized", "mlp_vlm", "mlp_act"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.retention not in ("dense", "selected", "mean", "max_topk", "random_k"):
            raise ConfigError(f"unknown retention {self.retention!r}")
        if self.guidance not in ("language", "proprio", "joint"):
            raise ConfigError(f"unknown guidance {self.guidance!r}")
        if self.retention == "selected" and self.guidance in ("proprio", "joint"):
            if self.encoding != "tokenized":
                raise ConfigError(
                    "proprio-guided selection requires tokenized state encoding"
                )
        if self.retention in ("mean", "max_topk", "random_k") and self.use_context:
            raise ConfigError("pooling baselines do not append the context token")
        if abs(self.warmup_frac + self.hold_frac + self.decay_frac - 1.0) > 1e-12:
            raise ConfigError("warmup/hold/decay fractions must sum to 1")
        if self.max_seq < self.n_visual + 1 + self.proprio_dims + 2:
            raise ConfigError("max_seq too small for the assembled sequence")
        if self.vocab_size < self.proprio_bins:
            raise ConfigError("vocab_size must cover the proprio bins")
        return self

    def derive(self, **overrides):
        return replace(self, **overrides).validate()


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r} expects an integer, got {raw!r}") from exc
    if kind == "float":
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r} expects a number, got {raw!r}") from exc
    return raw


def load_config(path=None, overrides=None):
    """Defaults, then file lines, then explicit overrides; validated."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, raw = (part.strip() for part in stripped.split("=", 1))
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw)
    if overrides:
        for key, value in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    return Config(**values).validate()


def config_dict(config):
    return {f.name: getattr(config, f.name) for f in fields(Config)}
