"""Joint training of the U-Net and both bridge networks on the dual-term loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import VolumeRecord, sample_training_slices
from .evaluation import reconstruction_error
from .inference import reconstruct_volume
from .io import Checkpoint, save_checkpoint
from .model import MCDDPMNet, ModelConfig, build_model
from .schedule import NoiseSchedule, make_linear_schedule, q_sample_full, sample_patch_mask

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "val_recon_error")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    T: int = 1000
    lr: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 1600
    lam: float = 0.5
    p_norm: int = 2
    seed: int = 0
    checkpoint_every: int = 1
    t_test: int = 500
    patch_sizes: tuple[tuple[int, int], ...] = ((48, 48),)
    xz_at_T: bool = False
    detach_context: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm must be 1 or 2, got {self.p_norm}")
        if self.T < 2 or not 1 <= self.t_test <= self.T:
            raise ValueError("need T >= 2 and 1 <= t_test <= T")
        if self.batch_size < 1 or self.max_epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1, max_epochs >= 0")
        object.__setattr__(self, "patch_sizes", tuple(tuple(int(v) for v in s) for s in self.patch_sizes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_sizes"] = [list(s) for s in self.patch_sizes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _pnorm_mean(diff: torch.Tensor, p: int) -> torch.Tensor:
    return diff.abs().mean() if p == 1 else (diff * diff).mean()


def dual_loss(x0, x0_hat, xz_hat, lam: float, p: int) -> torch.Tensor:
    """Per-pixel mean of ``|x0_hat - x0|^p`` plus ``lam`` times the same for ``xz_hat``.

    ``xz_hat=None`` (no bridge) drops the second term.
    """
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p!r}")
    x0, x0_hat = torch.as_tensor(x0), torch.as_tensor(x0_hat)
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    loss = _pnorm_mean(x0_hat - x0, p)
    if xz_hat is not None:
        xz_hat = torch.as_tensor(xz_hat)
        if xz_hat.shape != x0.shape:
            raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(xz_hat.shape)}")
        loss = loss + lam * _pnorm_mean(xz_hat - x0, p)
    return loss


def corrupt_batch(batch: np.ndarray, schedule: NoiseSchedule, config: TrainConfig, rng: np.random.Generator):
    """Draw ``t``, a patch and noise per slice; return ``(x_full, x_patched, t)`` as numpy."""
    B, h, w = batch.shape
    x_full = np.empty(batch.shape)
    x_patched = np.empty(batch.shape)
    ts = np.empty(B, dtype=np.int64)
    for i in range(B):
        t = int(rng.integers(1, schedule.T + 1))
        mask = sample_patch_mask(h, w, config.patch_sizes, rng=rng)
        noise = rng.standard_normal((h, w))
        noisy = q_sample_full(batch[i], t, schedule, noise)
        x_patched[i] = np.where(mask.mask > 0, noisy, batch[i])
        x_full[i] = q_sample_full(batch[i], schedule.T, schedule, noise) if config.xz_at_T else noisy
        ts[i] = t
    return x_full, x_patched, ts


def compute_loss(model: MCDDPMNet, x0, x_full, x_patched, t, config: TrainConfig):
    """Forward pass and loss on ``(B, 1, h, w)`` tensors; returns ``(loss, x0_hat, xz_hat)``."""
    x0_hat, xz_hat = model(x0, x_patched, x_full, t, detach_context=config.detach_context)
    return dual_loss(x0, x0_hat, xz_hat, config.lam, config.p_norm), x0_hat, xz_hat


def grad_norms(model: torch.nn.Module) -> dict[str, float]:
    """Gradient 2-norm per second-level module (``unet.encoder``, ``bridge.extractor``, ...)."""
    sq: dict[str, float] = {}
    for name, p in model.named_parameters():
        group = ".".join(name.split(".")[:2])
        g = 0.0 if p.grad is None else float(p.grad.detach().double().pow(2).sum())
        sq[group] = sq.get(group, 0.0) + g
    return {k: math.sqrt(v) for k, v in sq.items()}


@dataclass
class StepResult:
    loss: float
    unet_term: float
    bridge_term: float | None
    t: np.ndarray


def training_step(
    model: MCDDPMNet,
    optimizer: torch.optim.Optimizer,
    batch: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    """One Adam step on a batch of clean ``(B, h, w)`` slices."""
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError(f"expected a nonempty (B, h, w) batch, got shape {batch.shape}")
    x_full, x_patched, t = corrupt_batch(batch, schedule, config, rng)
    dtype = next(model.parameters()).dtype

    def tens(a):
        return torch.as_tensor(a, dtype=dtype)[:, None]

    model.train()
    optimizer.zero_grad(set_to_none=True)
    x0 = tens(batch)
    loss, x0_hat, xz_hat = compute_loss(model, x0, tens(x_full), tens(x_patched), torch.as_tensor(t), config)
    unet_term = float(_pnorm_mean(x0_hat.detach() - x0, config.p_norm))
    bridge_term = None if xz_hat is None else float(_pnorm_mean(xz_hat.detach() - x0, config.p_norm))
    loss.backward()
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            "non-finite loss",
            {"t": t.tolist(), "unet_term": unet_term, "bridge_term": bridge_term, "grad_norms": grad_norms(model)},
        )
    optimizer.step()
    return StepResult(float(loss.detach()), unet_term, bridge_term, t)


def model_params(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def optimizer_arrays(optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = optimizer.state_dict()
    arrays = {
        f"{idx}.{key}": value.detach().cpu().numpy().copy()
        for idx, state in sd["state"].items()
        for key, value in state.items()
    }
    return arrays, {"param_groups": sd["param_groups"]}


def restore_optimizer(optimizer: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(value)
    groups = meta["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def schedule_meta(schedule: NoiseSchedule) -> dict:
    return {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end}


def make_checkpoint(model, optimizer, model_config, config, schedule, epoch, val_error, history) -> Checkpoint:
    optim, meta = optimizer_arrays(optimizer) if optimizer is not None else ({}, {})
    return Checkpoint(
        params=model_params(model),
        model_config=model_config.to_dict(),
        train_config=config.to_dict(),
        schedule=schedule_meta(schedule),
        epoch=epoch,
        val_error=val_error,
        optimizer=optim,
        optimizer_meta=meta,
        history=[dict(r) for r in history],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MCDDPMNet, NoiseSchedule]:
    from .io import InvalidCheckpointError

    try:
        config = ModelConfig.from_dict(ckpt.model_config)
        model = build_model(config)
        model.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt.params.items()})
        schedule = make_linear_schedule(
            ckpt.schedule["T"], ckpt.schedule["beta_start"], ckpt.schedule["beta_end"]
        )
    except (KeyError, RuntimeError, TypeError, ValueError) as exc:
        raise InvalidCheckpointError(f"checkpoint does not match its architecture: {exc}") from exc
    model.eval()
    return model, schedule


def validation_error(
    records: Sequence[VolumeRecord], model: MCDDPMNet, schedule: NoiseSchedule, t_test: int, seed: int
) -> float:
    """Mean healthy-volume reconstruction error; the noise is fixed by ``seed`` so epochs compare fairly."""
    errs = [
        reconstruction_error(r.volume, reconstruct_volume(r.volume, model, schedule, t_test, seed))
        for r in records
    ]
    return float(np.mean(errs))


def _write_metrics_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a") as f:
        if new:
            f.write(",".join(METRICS_COLUMNS) + "\n")
        val = row["val_recon_error"]
        f.write(f"{row['epoch']},{row['train_loss']!r},{'' if val is None else repr(val)}\n")


def fit(
    train_records: Sequence[VolumeRecord],
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    val_records: Sequence[VolumeRecord] | None = None,
    resume: Checkpoint | None = None,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train and return the checkpoint with the lowest validation reconstruction error.

    An epoch draws one slice per training volume.  Validation runs every
    ``checkpoint_every`` epochs and always after the last one; without
    validation volumes the final state is returned.  With ``out_dir`` set,
    ``last.ckpt``, ``best.ckpt`` and ``metrics.csv`` are written there.
    """
    if not train_records:
        raise ValueError("empty training set")
    if config.deterministic:
        torch.set_num_threads(1)
    schedule = make_linear_schedule(config.T)
    model = build_model(model_config, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    start = 0
    if resume is not None:
        model.load_state_dict({k: torch.as_tensor(v) for k, v in resume.params.items()})
        if resume.optimizer:
            restore_optimizer(optimizer, resume.optimizer, resume.optimizer_meta)
        start = resume.epoch
        history = [dict(r) for r in resume.history]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    best: Checkpoint | None = None
    best_err = math.inf
    if resume is not None and resume.val_error is not None:
        best_err = resume.val_error
        best = resume
    final: Checkpoint | None = None
    for epoch in range(start + 1, config.max_epochs + 1):
        step_rng = np.random.default_rng([config.seed, epoch, 1])
        losses = []
        for batch, _ in sample_training_slices(train_records, [config.seed, epoch, 0], config.batch_size):
            losses.append(training_step(model, optimizer, batch, schedule, config, step_rng).loss)
        val = None
        due = epoch % config.checkpoint_every == 0 or epoch == config.max_epochs
        if val_records and due:
            val = validation_error(val_records, model, schedule, config.t_test, config.seed)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_recon_error": val}
        history.append(row)
        log.info("epoch %d loss %.6f val %s", epoch, row["train_loss"], val)
        if out is not None:
            _write_metrics_row(out / "metrics.csv", row)
        if on_epoch is not None:
            on_epoch(row)
        if due:
            final = make_checkpoint(model, optimizer, model_config, config, schedule, epoch, val, history)
            if out is not None:
                save_checkpoint(out / "last.ckpt", final)
            if val is not None and val <= best_err:
                best_err, best = val, final
                if out is not None:
                    save_checkpoint(out / "best.ckpt", best)
    if final is None:
        final = make_checkpoint(model, optimizer, model_config, config, schedule, start, None, history)
    if best is None:
        best = final
        if out is not None:
            save_checkpoint(out / "best.ckpt", best)
    # the returned checkpoint carries the complete loss curve
    best.history = [dict(r) for r in history]
    return best
