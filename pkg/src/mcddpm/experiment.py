"""End-to-end phantom experiments and ablation sweeps at desk scale."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import PhantomSpec, VolumeRecord, generate_phantom_dataset, split_records
from .evaluation import auprc, dice, reconstruction_error, score_volume, summarize
from .inference import reconstruct_volume, residual_map
from .model import ModelConfig
from .training import TrainConfig, fit, model_from_checkpoint

# Sized for a single CPU core: about three minutes per training run.
DESK_MODEL = ModelConfig(latent_channels=4, bridge_hidden=8, base_width=8, depth=3, attention_heads=4)
DESK_TRAIN = TrainConfig(lr=1e-3, batch_size=8, max_epochs=200, checkpoint_every=25, patch_sizes=((32, 32),))


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = PhantomSpec()
    model: ModelConfig = DESK_MODEL
    train: TrainConfig = DESK_TRAIN
    theta: float = 0.2
    p: int = 2
    eval_seed: int = 0
    healthy_test: int = 4  # extra anomaly-free volumes for the reconstruction error

    def variant(self, ablation: str | None = None, lam: float | None = None, seed: int | None = None):
        model, train = self.model, self.train
        if ablation is not None:
            model = replace(model, ablation=ablation)
        if lam is not None:
            train = replace(train, lam=lam)
        if seed is not None:
            train = replace(train, seed=seed)
        return replace(self, model=model, train=train)


@dataclass
class ExperimentResult:
    ablation: str
    lam: float
    seed: int
    dice_pooled: float
    dice_mean: float
    auprc: float
    recon_error: float
    prevalence: float
    baseline_dice: float
    baseline_auprc: float
    best_epoch: int
    train_seconds: float
    history: list[dict] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "history"}


def healthy_holdout(spec: PhantomSpec, n: int) -> list[VolumeRecord]:
    """Anomaly-free volumes drawn from a seed disjoint from the training data."""
    extra = replace(spec, n_train=0, n_val=0, n_test=n, anomaly_count=0, seed=spec.seed + 10_007)
    return split_records(generate_phantom_dataset(extra), "test")


def random_mask_baseline(records: Sequence[VolumeRecord], rng: np.random.Generator) -> tuple[float, float]:
    """Pooled Dice of Bernoulli masks at the true prevalence, and AUPRC of uniform random scores."""
    truths = np.concatenate([(r.ground_truth > 0)[r.volume > 0] for r in records])
    pred = rng.random(truths.size) < truths.mean()
    return dice(pred, truths), auprc(rng.random(truths.size), truths)


def run_phantom_experiment(
    config: ExperimentConfig = ExperimentConfig(),
    records: Sequence[VolumeRecord] | None = None,
    healthy: Sequence[VolumeRecord] | None = None,
) -> ExperimentResult:
    """Train on the phantom, evaluate on its test split; metrics are fractions in [0, 1]."""
    if records is None:
        records = generate_phantom_dataset(config.phantom)
    if healthy is None:
        healthy = healthy_holdout(config.phantom, config.healthy_test)
    train, val, test = (split_records(records, s) for s in ("train", "val", "test"))
    start = time.perf_counter()
    ckpt = fit(train, config.train, config.model, val or None)
    seconds = time.perf_counter() - start
    model, schedule = model_from_checkpoint(ckpt)
    t_test = config.train.t_test

    volumes = [r.volume for r in test]
    recons = [reconstruct_volume(v, model, schedule, t_test, config.eval_seed) for v in volumes]
    scored = [
        score_volume(r.subject_id, r.volume, residual_map(r.volume, vh, config.p), r.ground_truth, config.theta)
        for r, vh in zip(test, recons)
    ]
    summary = summarize(volumes, recons, scored)
    errs = [
        reconstruction_error(r.volume, reconstruct_volume(r.volume, model, schedule, t_test, config.eval_seed))
        for r in healthy
    ]
    truths = np.concatenate([(r.ground_truth > 0)[r.volume > 0] for r in test])
    base_dice, base_auprc = random_mask_baseline(test, np.random.default_rng([config.eval_seed, 99]))
    return ExperimentResult(
        ablation=config.model.ablation,
        lam=config.train.lam,
        seed=config.train.seed,
        dice_pooled=summary["dice_pooled"] / 100,
        dice_mean=summary["dice_mean"] / 100,
        auprc=summary["auprc"] / 100,
        recon_error=float(np.mean(errs)),
        prevalence=float(truths.mean()),
        baseline_dice=base_dice,
        baseline_auprc=base_auprc,
        best_epoch=ckpt.epoch,
        train_seconds=seconds,
        history=ckpt.history,
    )


def sweep(
    config: ExperimentConfig,
    ablations: Sequence[str] = ("full",),
    lams: Sequence[float] = (0.5,),
    seeds: Sequence[int] = (0,),
    on_result=None,
) -> list[ExperimentResult]:
    """Run every (ablation, lambda, seed) combination on one shared phantom dataset."""
    records = generate_phantom_dataset(config.phantom)
    healthy = healthy_holdout(config.phantom, config.healthy_test)
    results = []
    for ablation in ablations:
        for lam in lams:
            for seed in seeds:
                res = run_phantom_experiment(config.variant(ablation, lam, seed), records, healthy)
                results.append(res)
                if on_result is not None:
                    on_result(res)
    return results
