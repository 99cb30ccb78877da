"""Flat run configuration stored as ``key=value`` text."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "MCDDPM_OUTPUT_ROOT"


@dataclass(frozen=True)
class RunConfig:
    # diffusion and training
    T: int = 1000
    t_test: int = 500
    lr: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 1600
    lam: float = 0.5
    p_norm: int = 2
    ablation: str = "full"
    seed: int = 0
    checkpoint_every: int = 1
    patch_height: int = 48
    patch_width: int = 48
    xz_at_T: bool = False
    detach_context: bool = False
    # architecture
    latent_channels: int = 4
    bridge_hidden: int = 32
    bridge_blocks: int = 2
    base_width: int = 32
    depth: int = 3
    attention_heads: int = 4
    time_embed_dim: int = 64
    share_context_encoder: bool = True
    # inference and post-processing
    repeats: int = 1
    median_kernel: int = 5
    erosion_iterations: int = 3
    theta: float = 0.2
    # paths
    data: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        # surface invalid values at load time rather than mid-run
        self.train_config()
        self.model_config()
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be odd and >= 1")
        if self.erosion_iterations < 0 or not self.theta > 0 or self.repeats < 1:
            raise ValueError("need erosion_iterations >= 0, theta > 0, repeats >= 1")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            T=self.T,
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            lam=self.lam,
            p_norm=self.p_norm,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            t_test=self.t_test,
            patch_sizes=((self.patch_height, self.patch_width),),
            xz_at_T=self.xz_at_T,
            detach_context=self.detach_context,
        )

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return out if root is None or out.is_absolute() else Path(root) / out

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise ValueError(f"line {n}: unknown or malformed entry {line!r}")
            values[key] = parse_value(raw, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def parse_value(raw: str, type_name):
    type_name = getattr(type_name, "__name__", type_name)
    if type_name == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw
