"""scikit-learn style facade over the segmentation engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import network, optim
from .config import default_config
from .data import Sample
from .metrics import confusion, prf1
from .seeding import derive_seed
from .validation import check_divisible, check_image_batch, check_mask_batch


class MLCSegmenter(BaseEstimator):
    """Binary image segmenter with a fit/predict interface.

    X is an N x 3 x H x W float batch in [0, 1] with H and W divisible by 32;
    y holds binary masks, N x H x W or N x 1 x H x W. A fraction of the
    samples is held out to pick the best epoch. `config` is a ModelConfig;
    None selects the default architecture.
    """

    def __init__(self, config=None, max_epochs: int = 20, batch_size: int = 4,
                 lr: float = 0.001, validation_fraction: float = 0.2,
                 threshold: float = 0.5, augment: bool = False, seed: int = 0):
        self.config = config
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.augment = augment
        self.seed = seed

    def fit(self, X, y):
        cfg = self.config if self.config is not None else default_config()
        X = check_image_batch(X, cfg.input_channels)
        y = check_mask_batch(y, n=X.shape[0])
        if y.shape[2:] != X.shape[2:]:
            raise ValueError(f"mask extents {y.shape[2:]} != image extents {X.shape[2:]}")
        check_divisible(X.shape[2], X.shape[3])
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        samples = [Sample(id=f"s{i:04d}", image=X[i], mask=y[i]) for i in range(X.shape[0])]
        n_val = int(round(len(samples) * self.validation_fraction))
        if 0 < n_val < len(samples):
            order = np.random.default_rng(derive_seed(self.seed, "split")).permutation(len(samples))
            val = [samples[i] for i in order[:n_val]]
            tr = [samples[i] for i in order[n_val:]]
        else:
            # Too few samples to hold any out: select on the training set.
            val = samples
            tr = samples
        params = network.init_params(cfg, derive_seed(self.seed, "init"))
        run = optim.TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size,
                                lr=self.lr, seed=self.seed, augment=self.augment)
        result = optim.train(cfg, params, tr, val, run)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = list(result.log)
        self.best_epoch_ = result.best_epoch
        self.best_val_loss_ = result.best_val_loss
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Probability maps, N x 1 x H x W."""
        check_is_fitted(self, "params_")
        X = check_image_batch(X, self.config_.input_channels)
        check_divisible(X.shape[2], X.shape[3])
        chunks = [
            network.predict_map(self.params_, X[i : i + self.batch_size], self.config_)
            for i in range(0, X.shape[0], self.batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        """Binary masks at the configured threshold, N x 1 x H x W."""
        proba = self.predict_proba(X)
        return (proba >= self.threshold).astype(np.float32)

    def score(self, X, y) -> float:
        """Mean per-image F1 against binary masks."""
        y = check_mask_batch(y)
        proba = self.predict_proba(X)
        if y.shape != proba.shape:
            raise ValueError(f"mask shape {y.shape} does not match predictions {proba.shape}")
        f1s = [
            prf1(confusion(proba[i], y[i], self.threshold))["f1"]
            for i in range(proba.shape[0])
        ]
        return float(np.mean(f1s))
