"""Run configuration: a flat ``key = value`` text file plus CLI overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticIdentitySpec
from .losses import CosineMarginParams, PositiveLossParams, SpreadoutParams

OUTPUT_DIR_ENV = "IPFED_OUTPUT_DIR"

PROTOCOLS = ("fedface", "ipfed", "fce", "finetune")
TRANSFORM_MODES = ("orthonormal", "identity", "regular")


@dataclass
class RunConfig:
    protocol: str = "ipfed"
    seed: int = 0
    # federation
    d: int = 16
    num_clients: int = 10
    samples_per_client: int = 20
    rounds: int = 50
    eta: float = 0.1
    margin_m: float = 0.9
    margin_v: float = 0.7
    step_lambda: float = 25.0
    local_steps: int = 1
    client_fraction: float = 1.0
    transform_mode: str = "orthonormal"
    # model
    widths: tuple = (32, 32)
    input_dim: int = 32
    # pre-training (cosine-margin stand-in)
    pretrain_epochs: int = 600
    pretrain_lr: float = 0.05
    cos_scale: float = 30.0
    cos_margin: float = 0.35
    # synthetic data and evaluation
    num_pretrain_ids: int = 90
    num_eval_ids: int = 50
    eval_samples_per_id: int = 10
    center_scale: float = 1.0
    noise_sigma: float = 0.1
    impostor_ratio: int = 20
    far_target: float = 1e-3
    eval_every: int = 1
    record_timing: bool = False
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_DIR_ENV, "runs"))

    def __post_init__(self):
        self.widths = _parse_widths(self.widths)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.transform_mode not in TRANSFORM_MODES:
            raise ValueError(f"transform_mode must be one of {TRANSFORM_MODES}")
        if self.d < 1 or self.num_clients < 1 or self.samples_per_client < 1 or self.input_dim < 1:
            raise ValueError("d, num_clients, samples_per_client and input_dim must be >= 1")
        if self.rounds < 0 or self.local_steps < 1 or self.pretrain_epochs < 0:
            raise ValueError("rounds and pretrain_epochs must be >= 0, local_steps >= 1")
        if self.eta < 0 or not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("eta must be >= 0 and client_fraction in (0, 1]")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        # construct once to surface range errors early
        self.positive_params
        self.spreadout_params
        self.cosine_params
        self.dataset_spec

    @property
    def positive_params(self) -> PositiveLossParams:
        return PositiveLossParams(self.margin_m)

    @property
    def spreadout_params(self) -> SpreadoutParams:
        return SpreadoutParams(self.margin_v, self.step_lambda)

    @property
    def cosine_params(self) -> CosineMarginParams:
        return CosineMarginParams(self.cos_scale, self.cos_margin)

    @property
    def dataset_spec(self) -> SyntheticIdentitySpec:
        return SyntheticIdentitySpec(
            num_pretrain_ids=self.num_pretrain_ids,
            num_federated_ids=self.num_clients,
            num_eval_ids=self.num_eval_ids,
            samples_per_id=self.samples_per_client,
            eval_samples_per_id=self.eval_samples_per_id,
            input_dim=self.input_dim,
            cluster_center_scale=self.center_scale,
            within_class_noise_sigma=self.noise_sigma,
            impostor_ratio=self.impostor_ratio,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "widths":
                value = ",".join(str(w) for w in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _parse_widths(value):
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    widths = tuple(int(v) for v in value)
    if any(w < 1 for w in widths):
        raise ValueError("hidden widths must be positive")
    return widths


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        return _parse_widths(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values)
