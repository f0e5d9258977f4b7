"""Scikit-learn style wrapper around one image-fitting run."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import bench
from .image_core import Image, check_rects
from .mipfield import mse, psnr, reconstruct, reconstruct_array


def check_image(X) -> Image:
    """Coerce ``X`` (an :class:`Image`, (H, W) or (H, W, 3) array in [0, 1]) to an Image."""
    if isinstance(X, Image):
        return X
    arr = np.asarray(X)
    if arr.dtype == object:
        raise TypeError("image data must be numeric")
    return Image(arr)


def check_blocks(X, width: int, height: int) -> np.ndarray:
    """Validate block rectangles: an (n, 4) integer array of x, y, w, h rows."""
    arr = np.asarray(X)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("block coordinates must be integers")
    if arr.ndim == 1 and arr.size == 4:
        arr = arr[None, :]
    return check_rects(arr, width, height)


class MCBlockRegressor(BaseEstimator):
    """Fit a mip-pyramid color field to one image with a chosen batch sampler.

    ``fit`` trains on an image; ``predict`` renders block colors; ``transform``
    reconstructs the image; ``score`` is the reconstruction PSNR in dB.
    """

    def __init__(self, strategy="mcblock", iterations=2000, batch_size=1024,
                 learning_rate=1.0, optimizer="normalized", lam=5000.0,
                 eps_init=1e-3, eps_L=1e-2, eps_C=1e-4, min_block_side=1,
                 checkpoint_every=100, random_state=0):
        self.strategy = strategy
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.lam = lam
        self.eps_init = eps_init
        self.eps_L = eps_L
        self.eps_C = eps_C
        self.min_block_side = min_block_side
        self.checkpoint_every = checkpoint_every
        self.random_state = random_state

    def _train_config(self) -> bench.TrainConfig:
        return bench.TrainConfig(
            iterations=int(self.iterations), batch_size=int(self.batch_size),
            learning_rate=float(self.learning_rate), optimizer=self.optimizer,
            lam=float(self.lam), eps_init=float(self.eps_init), eps_L=float(self.eps_L),
            eps_C=float(self.eps_C), min_block_side=int(self.min_block_side),
            checkpoint_every=int(self.checkpoint_every))

    def fit(self, X, y=None):
        img = check_image(X)
        strategy = self.strategy
        if isinstance(strategy, str):
            strategy = bench.parse_strategy(strategy)
        strategy = replace(strategy, lam=float(self.lam))
        seed = 0 if self.random_state is None else int(self.random_state)
        m = bench.run(strategy, img, self._train_config(), seed=seed)
        self.metrics_ = m
        self.field_ = m.field
        self.forest_ = m.forest
        self.partition_ = m.partition
        self.n_iter_ = m.final.iteration
        self.image_shape_ = img.shape
        return self

    def _check_fitted(self):
        if not hasattr(self, "field_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit() first")

    def predict(self, X) -> np.ndarray:
        """Rendered RGB color of each block in ``X`` (n, 4); returns (n, 3)."""
        self._check_fitted()
        rects = check_blocks(X, self.field_.width, self.field_.height)
        return self.field_.render(rects)

    def transform(self, X=None, mode: str = "block") -> np.ndarray:
        """Reconstructed (H, W, 3) image; ``mode`` is "block" or "pixel"."""
        self._check_fitted()
        if mode not in ("block", "pixel"):
            raise ValueError(f"mode must be 'block' or 'pixel', got {mode!r}")
        if mode == "block" and self.partition_ is not None:
            return reconstruct_array(self.field_, self.partition_)
        return reconstruct_array(self.field_, "pixel")

    def fit_transform(self, X, y=None, **kw) -> np.ndarray:
        return self.fit(X, y).transform(**kw)

    def score(self, X, y=None) -> float:
        """PSNR (dB) of the block-mode reconstruction against image ``X``."""
        self._check_fitted()
        img = check_image(X)
        if img.shape != self.image_shape_:
            raise ValueError(f"image shape {img.shape} does not match fitted {self.image_shape_}")
        part = "pixel" if self.partition_ is None else self.partition_
        return psnr(mse(reconstruct(self.field_, part), img))
