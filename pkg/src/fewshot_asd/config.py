"""Run configuration: defaults, file loading and flag overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

SEED_ENV = "FEWSHOT_ASD_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV}={raw!r} is not an integer") from None


@dataclass
class RunConfig:
    dataset: str = ""
    machine: str = ""
    tasks: list[str] | str = "all"
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 256])
    bottleneck: int = 128
    distance: str = "sqeuclidean"
    outer_steps: int = 10_000
    inner_iters: int = 8
    finetune_iters: int = 50
    epsilon_start: float = 1.0
    epsilon_end: float = 0.0
    optimizer: str = "adam"
    lr: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    oe: bool = True
    oe_lambda: float = 0.2
    oe_modes: list[str] = field(default_factory=lambda: ["other_machines", "freq_warp"])
    oe_clips_per_step: int = 4
    oe_pool_clips: int = 64
    support_size: int = 3
    query_size: int = 5
    aggregation: str = "mean"
    seed: int = field(default_factory=default_seed)
    checkpoint_dir: str = "runs/checkpoints"
    scores: str = "runs/scores.csv"
    report: str = "runs/report.csv"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.finetune_iters < 0 or self.outer_steps < 0:
            raise ValueError("finetune_iters and outer_steps must be >= 0")
        if self.oe_lambda < 0:
            raise ValueError("oe_lambda must be >= 0")
        if self.support_size < 1 or self.query_size < 1:
            raise ValueError("support_size and query_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be mean or max, got {self.aggregation!r}")
        if self.distance != "sqeuclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")
        if self.bottleneck < 1 or any(h < 1 for h in self.encoder_hidden):
            raise ValueError("encoder widths must be positive")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def override(self, **changes) -> "RunConfig":
        """Copy with non-None ``changes`` applied (flags win over file values)."""
        d = self.to_dict()
        for k, v in changes.items():
            if v is None:
                continue
            if k not in d:
                raise ValueError(f"unknown config key {k!r}")
            d[k] = v
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def training_hash(self) -> str:
        """Hash of the fields that affect trained weights."""
        skip = {"checkpoint_dir", "scores", "report", "finetune_iters", "aggregation"}
        d = {k: v for k, v in self.to_dict().items() if k not in skip}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def encoder_sizes(self, input_dim: int) -> list[int]:
        return [input_dim, *self.encoder_hidden, self.bottleneck]
