"""scikit-learn style front end.

``fit`` takes healthy volumes only; ``transform`` returns residual maps,
``score_samples`` the median-filtered, brain-masked maps used for ranking,
and ``predict`` the thresholded segmentations.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import VolumeRecord
from .inference import reconstruct_volume, residual_map
from .io import Checkpoint, load_checkpoint
from .model import ModelConfig
from .postprocessing import postprocess
from .training import TrainConfig, fit, model_from_checkpoint


def check_volumes(X, name: str = "X", multiple_of: int = 1) -> list[np.ndarray]:
    """Coerce ``X`` (a 4-D array or a sequence of 3-D arrays) to a list of float volumes."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError(f"{name} must hold several volumes; wrap a single volume in a list")
    volumes = [np.asarray(v, dtype=np.float64) for v in X]
    if not volumes:
        raise ValueError(f"{name} is empty")
    for i, v in enumerate(volumes):
        if v.ndim != 3:
            raise ValueError(f"{name}[{i}] must be an (h, w, d) volume, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"{name}[{i}] contains non-finite values")
        if v.shape[0] % multiple_of or v.shape[1] % multiple_of:
            raise ValueError(f"{name}[{i}]: in-plane size {v.shape[:2]} must be divisible by {multiple_of}")
    return volumes


class MCDDPMDetector(BaseEstimator):
    """Reconstruction-based anomaly segmenter trained on healthy volumes."""

    def __init__(
        self,
        T: int = 1000,
        t_test: int = 500,
        lr: float = 1e-5,
        batch_size: int = 8,
        max_epochs: int = 1600,
        lam: float = 0.5,
        p_norm: int = 2,
        ablation: str = "full",
        latent_channels: int = 4,
        bridge_hidden: int = 32,
        base_width: int = 32,
        depth: int = 3,
        attention_heads: int = 4,
        patch_size: tuple[int, int] = (48, 48),
        checkpoint_every: int = 1,
        median_kernel: int = 5,
        erosion_iterations: int = 3,
        theta: float = 0.2,
        repeats: int = 1,
        seed: int = 0,
    ):
        self.T = T
        self.t_test = t_test
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lam = lam
        self.p_norm = p_norm
        self.ablation = ablation
        self.latent_channels = latent_channels
        self.bridge_hidden = bridge_hidden
        self.base_width = base_width
        self.depth = depth
        self.attention_heads = attention_heads
        self.patch_size = patch_size
        self.checkpoint_every = checkpoint_every
        self.median_kernel = median_kernel
        self.erosion_iterations = erosion_iterations
        self.theta = theta
        self.repeats = repeats
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            ablation=self.ablation,
            latent_channels=self.latent_channels,
            bridge_hidden=self.bridge_hidden,
            base_width=self.base_width,
            depth=self.depth,
            attention_heads=self.attention_heads,
        )

    def _train_config(self) -> TrainConfig:
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
            patch_sizes=(tuple(self.patch_size),),
        )

    def fit(self, X, y=None, X_val=None):
        """Train on healthy volumes; ``X_val`` (healthy) drives checkpoint selection."""
        if y is not None:
            raise ValueError("training is unsupervised: y must be None")
        train_cfg, model_cfg = self._train_config(), self._model_config()
        volumes = check_volumes(X, multiple_of=2**self.depth)
        records = [VolumeRecord(v, f"train_{i:04d}", "train") for i, v in enumerate(volumes)]
        val = None
        if X_val is not None:
            val = [VolumeRecord(v, f"val_{i:04d}", "val") for i, v in enumerate(check_volumes(X_val, "X_val"))]
        self._set_checkpoint(fit(records, train_cfg, model_cfg, val))
        return self

    def _set_checkpoint(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.model_, self.schedule_ = model_from_checkpoint(ckpt)
        self.history_ = list(ckpt.history)
        self.best_epoch_ = ckpt.epoch

    @classmethod
    def from_checkpoint(cls, ckpt, **overrides) -> "MCDDPMDetector":
        """Rebuild a fitted detector from a checkpoint object or file."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        params = {}
        valid = cls().get_params()
        for source in (ckpt.model_config, ckpt.train_config):
            params.update({k: v for k, v in source.items() if k in valid})
        if ckpt.train_config.get("patch_sizes"):
            params["patch_size"] = tuple(ckpt.train_config["patch_sizes"][0])
        params.update(overrides)
        est = cls(**params)
        est._set_checkpoint(ckpt)
        return est

    def reconstruct(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [
            reconstruct_volume(v, self.model_, self.schedule_, self.t_test, self.seed, repeats=self.repeats)
            for v in check_volumes(X, multiple_of=2**self.depth)
        ]

    def transform(self, X) -> list[np.ndarray]:
        """Raw residual maps ``|V - V_hat|^p``."""
        volumes = check_volumes(X)
        return [residual_map(v, r, self.p_norm) for v, r in zip(volumes, self.reconstruct(volumes))]

    def _postprocess(self, X):
        volumes = check_volumes(X)
        return [
            postprocess(m, v, self.theta, self.median_kernel, self.erosion_iterations)
            for v, m in zip(volumes, self.transform(volumes))
        ]

    def score_samples(self, X) -> list[np.ndarray]:
        """Median-filtered residuals, zero outside the eroded brain mask."""
        return [filtered * mask for filtered, mask, _ in self._postprocess(X)]

    def predict(self, X) -> list[np.ndarray]:
        """Binary anomaly segmentations."""
        return [seg for _, _, seg in self._postprocess(X)]
