"""Estimator-style front end for the trainable models.

Thin scikit-learn style wrappers (fit/predict/transform plus get_params)
around the training loops, so the translators and the diffusion refiner
compose with pipelines and grid search like any other estimator. Fitted
state lives in trailing-underscore attributes and serializes through the
package checkpoint format.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, RefineParams, refine, sample, train_denoiser, upscale
from .errors import DataError
from .legend import PARK_LEGEND, ClassMap, encode_classmap, quantize_to_classes
from .nets import forward
from .training import TrainConfig, fit_cyclegan, fit_pix2pix
from .validation import check_raster_batch


class ColorQuantizer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping rasters to legend class-id grids."""

    def __init__(self, legend=PARK_LEGEND):
        self.legend = legend

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        X = check_raster_batch(X, "X")
        return np.stack([quantize_to_classes(img, self.legend).data for img in X])

    def inverse_transform(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 2:
            ids = ids[None]
        return np.stack([encode_classmap(ClassMap(grid, self.legend)) for grid in ids])


class _TranslatorBase(BaseEstimator):
    def _train_config(self) -> TrainConfig:
        keys = TrainConfig.__dataclass_fields__
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in keys})

    def _save_params(self, out: Path) -> None:
        lines = [f"{k} = {v}" for k, v in sorted(self.get_params().items())]
        (out / "params.txt").write_text("\n".join(lines) + "\n")

    @staticmethod
    def _load_params(path: Path) -> dict:
        params = {}
        for line in (path / "params.txt").read_text().splitlines():
            key, _, raw = line.partition(" = ")
            for cast in (int, float):
                try:
                    params[key] = cast(raw)
                    break
                except ValueError:
                    continue
            else:
                params[key] = raw
        return params


class Pix2PixTranslator(_TranslatorBase):
    """Paired image-to-image translator (conditional adversarial training)."""

    def __init__(self, epochs=30, batch_size=4, learning_rate=2e-4, beta1=0.5,
                 seed=0, eval_every=0, base_width=16, depth=3, disc_depth=3,
                 norm="instance", adversarial="bce", lambda_l1=100.0,
                 lambda_cycle=10.0, lambda_identity=5.0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.seed = seed
        self.eval_every = eval_every
        self.base_width = base_width
        self.depth = depth
        self.disc_depth = disc_depth
        self.norm = norm
        self.adversarial = adversarial
        self.lambda_l1 = lambda_l1
        self.lambda_cycle = lambda_cycle
        self.lambda_identity = lambda_identity

    def fit(self, X, y):
        X = check_raster_batch(X, "X")
        y = check_raster_batch(y, "y")
        self.generator_, self.discriminator_, self.history_ = fit_pix2pix(
            X, y, self._train_config()
        )
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "generator_")
        X = check_raster_batch(X, "X")
        return np.clip(forward(self.generator_, X), 0.0, 1.0)

    def save(self, out_dir) -> None:
        check_is_fitted(self, "generator_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "G.ckpt", self.generator_, extra={"role": "generator"})
        save_checkpoint(out / "D.ckpt", self.discriminator_, extra={"role": "discriminator"})
        self._save_params(out)

    @classmethod
    def load(cls, out_dir) -> "Pix2PixTranslator":
        out = Path(out_dir)
        est = cls(**cls._load_params(out))
        est.generator_, _ = load_checkpoint(out / "G.ckpt")
        est.discriminator_, _ = load_checkpoint(out / "D.ckpt")
        est.history_ = None
        return est


class CycleGanTranslator(_TranslatorBase):
    """Unpaired two-domain translator with cycle and identity penalties."""

    def __init__(self, epochs=30, batch_size=4, learning_rate=2e-4, beta1=0.5,
                 seed=0, eval_every=0, base_width=16, depth=3, disc_depth=3,
                 norm="instance", adversarial="bce", lambda_l1=100.0,
                 lambda_cycle=10.0, lambda_identity=5.0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.seed = seed
        self.eval_every = eval_every
        self.base_width = base_width
        self.depth = depth
        self.disc_depth = disc_depth
        self.norm = norm
        self.adversarial = adversarial
        self.lambda_l1 = lambda_l1
        self.lambda_cycle = lambda_cycle
        self.lambda_identity = lambda_identity

    def fit(self, X, Y):
        X = check_raster_batch(X, "X")
        Y = check_raster_batch(Y, "Y")
        self.weights_, self.history_ = fit_cyclegan(X, Y, self._train_config())
        return self

    def predict(self, X) -> np.ndarray:
        """Translate from the first domain into the second (G direction)."""
        check_is_fitted(self, "weights_")
        X = check_raster_batch(X, "X")
        return np.clip(forward(self.weights_["G"], X), 0.0, 1.0)

    def predict_inverse(self, Y) -> np.ndarray:
        """Translate from the second domain back into the first (F)."""
        check_is_fitted(self, "weights_")
        Y = check_raster_batch(Y, "Y")
        return np.clip(forward(self.weights_["F"], Y), 0.0, 1.0)

    def save(self, out_dir) -> None:
        check_is_fitted(self, "weights_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, weights in self.weights_.items():
            save_checkpoint(out / f"{name}.ckpt", weights, extra={"role": name})
        self._save_params(out)

    @classmethod
    def load(cls, out_dir) -> "CycleGanTranslator":
        out = Path(out_dir)
        est = cls(**cls._load_params(out))
        est.weights_ = {}
        for name in ("G", "F", "D_X", "D_Y"):
            path = out / f"{name}.ckpt"
            if not path.exists():
                raise DataError(f"missing checkpoint {path}")
            est.weights_[name], _ = load_checkpoint(path)
        est.history_ = None
        return est


class DiffusionRefiner(_TranslatorBase):
    """Noise-predictor wrapper: fit on images, transform refines them."""

    def __init__(self, timesteps=200, beta_sum=10.0, strength=0.3, epochs=30,
                 batch_size=4, learning_rate=1e-3, beta1=0.5, seed=0,
                 eval_every=0, base_width=16, depth=3, norm="instance",
                 time_embedding_dim=32):
        self.timesteps = timesteps
        self.beta_sum = beta_sum
        self.strength = strength
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.seed = seed
        self.eval_every = eval_every
        self.base_width = base_width
        self.depth = depth
        self.norm = norm
        self.time_embedding_dim = time_embedding_dim

    def _schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(T=self.timesteps, beta_sum=self.beta_sum)

    def fit(self, X, y=None):
        X = check_raster_batch(X, "X")
        self.schedule_ = self._schedule()
        self.denoiser_, self.history_ = train_denoiser(
            X, self._train_config(), self.schedule_,
            time_embedding_dim=self.time_embedding_dim,
        )
        return self

    def transform(self, X) -> np.ndarray:
        """Refine each image at the configured strength (seeded per image)."""
        check_is_fitted(self, "denoiser_")
        X = check_raster_batch(X, "X")
        out = [
            refine(img, RefineParams(strength=self.strength, seed=self.seed + i),
                   self.denoiser_, self.schedule_)
            for i, img in enumerate(X)
        ]
        return np.stack(out)

    def sample(self, size: tuple[int, int], seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "denoiser_")
        return sample(size, self.denoiser_, self.schedule_, seed=seed)

    def upscale(self, img: np.ndarray, per_side_factor: int = 8,
                stage_strength: float = 0.15, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "denoiser_")
        return upscale(img, self.denoiser_, self.schedule_,
                       per_side_factor=per_side_factor,
                       stage_strength=stage_strength, seed=seed)

    def save(self, out_dir) -> None:
        check_is_fitted(self, "denoiser_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "denoiser.ckpt", self.denoiser_, extra=self.schedule_.to_header())
        self._save_params(out)

    @classmethod
    def load(cls, out_dir) -> "DiffusionRefiner":
        out = Path(out_dir)
        est = cls(**cls._load_params(out))
        est.denoiser_, extra = load_checkpoint(out / "denoiser.ckpt")
        est.schedule_ = NoiseSchedule.from_header(extra)
        est.history_ = None
        return est
