"""Scikit-learn style front door for the whole method.

WaterFlowSegmenter.fit trains the rectified-flow generator on image/mask
pairs (optionally with depth maps, which unlock the physical-prior encoder);
predict samples masks with the one-step regime by default. All constructor
arguments follow the sklearn convention of being stored verbatim, so
get_params/set_params/clone work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ContractError, ShapeError
from .flow import SamplerConfig, TrainConfig, Trainer, TrainItem, sample
from .metrics import s_measure
from .net import Network
from .priors import DEFAULT_STAGE_MAP, compute_priors, stage_input_channels, stage_inputs
from .rng import INIT, RngState
from .validation import check_binary, check_finite, check_in_unit_range


class WaterFlowSegmenter(BaseEstimator):
    """Saliency mask generator trained as a conditional rectified flow.

    Parameters mirror the pipeline defaults; `epochs`/`max_steps` control
    training length, `steps` the number of Euler steps at predict time.
    """

    def __init__(self, epochs: int = 20, max_steps: int | None = None, lr: float = 2.5e-5,
                 weight_decay: float = 0.01, batch: int = 8, accum: int = 4,
                 prior_dropout: float = 0.5, bins: int = 8, steps: int = 1,
                 threshold: float = 0.5, seed: int = 0,
                 channels: tuple = (16, 32, 64, 64), head_channels: int = 8,
                 time_dim: int = 64, stage_map: tuple = DEFAULT_STAGE_MAP):
        self.epochs = epochs
        self.max_steps = max_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch = batch
        self.accum = accum
        self.prior_dropout = prior_dropout
        self.bins = bins
        self.steps = steps
        self.threshold = threshold
        self.seed = seed
        self.channels = channels
        self.head_channels = head_channels
        self.time_dim = time_dim
        self.stage_map = stage_map

    # -- input validation ----------------------------------------------------

    def _check_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ShapeError(f"X must be (n_samples, 3, H, W), got {X.shape}")
        h, w = X.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image dims must be divisible by 32, got {h}x{w}")
        check_finite(X, "X")
        check_in_unit_range(X, "X")
        return X

    def _check_masks(self, y, hw) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 3 or y.shape[1:] != hw:
            raise ShapeError(f"y must be (n_samples, {hw[0]}, {hw[1]}), got {y.shape}")
        check_binary(y, "y")
        return y

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y, depth=None):
        """Train on images X (n, 3, H, W) and masks y (n, H, W).

        depth (n, H, W), when given, enables the physical-prior path; without
        it the model trains unconditionally on the zero-prior branch.
        """
        X = self._check_images(X)
        hw = X.shape[2:]
        y = self._check_masks(y, hw)
        if len(X) != len(y):
            raise ShapeError(f"X has {len(X)} samples but y has {len(y)}")
        dropout = self.prior_dropout
        items = []
        if depth is None:
            dropout = 1.0
            items = [TrainItem(I=xi, G=yi, groups=None) for xi, yi in zip(X, y)]
        else:
            depth = np.asarray(depth, dtype=np.float64)
            if depth.shape != (len(X), *hw):
                raise ShapeError(f"depth must be {(len(X), *hw)}, got {depth.shape}")
            for xi, yi, zi in zip(X, y, depth):
                stack = compute_priors(xi, zi, bins=self.bins)
                items.append(TrainItem(I=xi, G=yi, groups=stage_inputs(stack, self.stage_map)))

        n = len(items)
        per_step = min(self.batch, n)
        accum = min(self.accum, per_step)
        micro = per_step // accum
        cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, betas=(0.9, 0.999),
                          micro_batch=micro, accum_steps=accum, prior_dropout=dropout)
        rng = RngState(self.seed)
        network = Network(rng.stream(INIT).generator(), channels=self.channels,
                          head_channels=self.head_channels, time_dim=self.time_dim,
                          stage_in_channels=stage_input_channels(self.stage_map))
        trainer = Trainer(network, items, rng, cfg)
        total = self.epochs * trainer.steps_per_epoch
        if self.max_steps is not None:
            total = min(total, self.max_steps)
        history = trainer.run(total)

        self.network_ = network
        self.trainer_ = trainer
        self.history_ = history
        self.n_steps_ = trainer.step_index
        self.image_shape_ = hw
        return self

    def _require_fitted(self):
        if not hasattr(self, "network_"):
            raise ContractError("this WaterFlowSegmenter instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel mask probabilities, shape (n_samples, H, W)."""
        self._require_fitted()
        X = self._check_images(X)
        if X.shape[2:] != self.image_shape_:
            raise ShapeError(f"fitted for {self.image_shape_}, got {X.shape[2:]}")
        cfg = SamplerConfig(steps=self.steps, seed=self.seed, threshold=self.threshold)
        return np.stack([sample(self.network_, xi, cfg, index=i).prob[0] for i, xi in enumerate(X)])

    def predict(self, X) -> np.ndarray:
        """Binary masks in {0, 1}, shape (n_samples, H, W)."""
        probs = self.predict_proba(X)
        return (probs >= self.threshold).astype(np.float64)

    def score(self, X, y) -> float:
        """Mean S-measure of predicted probability maps against true masks."""
        probs = self.predict_proba(X)
        y = self._check_masks(y, probs.shape[1:])
        return float(np.mean([s_measure(p, g) for p, g in zip(probs, y)]))
