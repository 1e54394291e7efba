"""scikit-learn style wrapper around the training pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cloud import softmax_rows
from .config import Config
from .exceptions import InvalidInputError
from .metrics import psnr
from .scenes import Dataset
from .trainer import build_state, render_view, train
from .validation import check_points, check_timestamp


class DynamicSplatModel(BaseEstimator):
    """Fit a dynamic Gaussian scene to a :class:`~stdrgs.scenes.Dataset`.

    ``fit`` trains on the dataset's training cameras, ``predict`` renders
    ``(camera, t)`` requests, ``transform`` returns the per-Gaussian mask
    distribution and ``score`` is the mean held-out PSNR. Any other tunable
    goes through ``config`` (a dict of :class:`~stdrgs.config.Config` fields).
    """

    def __init__(self, iterations=8000, use_stdr=True, lambda_temp=0.1, lambda_spatial=0.2, warm_up_end=3000,
                 reg_end=6000, seed=0, config=None):
        self.iterations = iterations
        self.use_stdr = use_stdr
        self.lambda_temp = lambda_temp
        self.lambda_spatial = lambda_spatial
        self.warm_up_end = warm_up_end
        self.reg_end = reg_end
        self.seed = seed
        self.config = config

    def _config(self):
        d = dict(self.config or {})
        d.update(iterations=self.iterations, use_stdr=self.use_stdr, lambda_temp=self.lambda_temp,
                 lambda_spatial=self.lambda_spatial, warm_up_end=self.warm_up_end, reg_end=self.reg_end,
                 seed=self.seed)
        return Config.from_dict(d)

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise InvalidInputError("fit expects a stdrgs.scenes.Dataset")
        check_points(X.init_points, X.init_colors)
        cfg = self._config()
        state = build_state(cfg, X.init_points, X.init_colors, X.K)
        self.state_ = train(cfg, X.split("train"), state=state)
        self.n_gaussians_ = state.cloud.n
        self.K_ = X.K
        return self

    def predict(self, X):
        """Render each ``(camera, t)`` pair; returns an ``(n, H, W, 3)`` array."""
        check_is_fitted(self, "state_")
        images = [render_view(self.state_, cam, check_timestamp(t, self.K_)) for cam, t in X]
        if not images:
            raise InvalidInputError("predict needs at least one (camera, t) request")
        return np.stack(images)

    def transform(self, X=None):
        """Mask distribution (N x K); ``X`` is ignored."""
        check_is_fitted(self, "state_")
        st = self.state_
        return st.cached_probs.copy() if st.cached_probs is not None else softmax_rows(st.cloud.mask)

    def score(self, X: Dataset, y=None):
        """Mean PSNR over the held-out frames (training frames when none are held out)."""
        check_is_fitted(self, "state_")
        frames = X.split("heldout") or X.split("train")
        return float(np.mean([psnr(render_view(self.state_, f.camera, f.t), f.image) for f in frames]))
