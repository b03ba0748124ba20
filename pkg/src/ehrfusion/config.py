"""Experiment configuration: every knob with its shipped default.

Model-dimension defaults mirror the shipped architecture table; optimizer
and solver defaults mirror the training protocol. Configs load from JSON
(unknown keys rejected), CLI flags override file values, and every artifact
is stamped with the config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model dimensions
    hidden_dim: int = 128            # shared fusion dimension d
    hidden_hidden_dim: int = 128     # CDE field net hidden width
    ncde_num_layers: int = 1         # hidden layers in the field net
    ncde_dropout: float = 0.1
    attention_heads: int = 2
    embed_dim: int = 50              # compressed code-embedding dimension
    lstm_layers: int = 1
    lstm_hidden: int = 64
    lstm_dropout: float = 0.0
    mlp_hidden: int = 256
    mlp_dropout: float = 0.1
    bilinear_rank: int = 16
    max_seq_len: int = 100
    # ODE solver
    rtol: float = 1e-2
    atol: float = 1e-4
    max_solver_steps: int = 10_000
    # optimization protocol
    lr: float = 0.0005
    batch_size: int = 512
    weight_decay: float = 0.0005
    warmup_epochs: int = 5
    plateau_patience: int = 7
    plateau_factor: float = 0.5
    early_stop_patience: int = 21
    max_epochs: int = 60
    pos_weight: float = 1.0
    # task
    window_months: int = 6
    modality: str = "both"                 # both | labs-only | codes-only
    fusion: str = "cross_attention"        # see fusion.STRATEGIES
    intensity: bool = True
    embedding_source: str = "file"         # file | random
    embedding_file: str | None = None
    lab_filter: str = "all"                # all | any (patient exclusion policy)
    # misc
    seed: int = 7
    jobs: int = 1

    def __post_init__(self):
        if self.window_months not in (6, 9, 12):
            raise ConfigError("window_months must be one of 6, 9, 12")
        if self.modality not in ("both", "labs-only", "codes-only"):
            raise ConfigError(f"unknown modality: {self.modality!r}")
        if self.fusion not in ("cross_attention", "concat", "concat_self_attention", "bilinear"):
            raise ConfigError(f"unknown fusion strategy: {self.fusion!r}")
        if self.embedding_source not in ("file", "random"):
            raise ConfigError(f"unknown embedding source: {self.embedding_source!r}")
        if self.lab_filter not in ("all", "any"):
            raise ConfigError(f"unknown lab filter policy: {self.lab_filter!r}")
        if self.ncde_num_layers != 1:
            raise ConfigError("only a single hidden field-net layer is implemented")
        if self.lstm_layers != 1:
            raise ConfigError("only a single Bi-LSTM layer is implemented")
        if self.hidden_dim % self.attention_heads:
            raise ConfigError("attention_heads must divide hidden_dim")
        for name in ("lr", "batch_size", "weight_decay", "warmup_epochs",
                     "plateau_patience", "early_stop_patience", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
