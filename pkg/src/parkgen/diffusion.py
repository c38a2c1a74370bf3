"""Denoising diffusion: noising/denoising kernels, denoiser training,
image refinement and staged resolution expansion.

The forward kernel is the closed form x_t = sqrt(a_t)*x0 + sqrt(1-a_t)*eps
with a_t the running product of (1 - beta). Reverse steps follow the
posterior-mean update with sigma_t^2 = beta_t and a deterministic final
step. Images cross this module's boundary in [0, 1]; internally the chain
runs in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, NumericsError, StructureError
from .nets import ArchSpec, Weights, init_module, make_module, module_from_weights, weights_from_module
from .training import History, TrainConfig, _epoch_batches
from .validation import check_raster

PURE_NOISE_CEILING = 1e-4  # required alpha_bar at the final step


class NoiseSchedule:
    """Beta schedule with cached alphas and running alpha products."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise StructureError("betas must be a non-empty 1-D sequence")
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise StructureError("every beta must lie in (0, 1)")
        if (np.diff(betas) < 0).any():
            raise StructureError("betas must be non-decreasing")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[-1] >= PURE_NOISE_CEILING:
            raise StructureError(
                f"final alpha_bar {self.alpha_bars[-1]:.3g} >= {PURE_NOISE_CEILING}; "
                "the chain must end in (numerically) pure noise"
            )

    @property
    def T(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, T: int = 200, beta_sum: float = 10.0, end_to_start_ratio: float = 200.0):
        """Linear schedule scaled so the betas sum to beta_sum.

        The default leaves alpha_bar at the last step below exp(-beta_sum),
        i.e. well under the pure-noise ceiling for beta_sum = 10.
        """
        if T < 1:
            raise StructureError(f"T must be >= 1, got {T}")
        b0 = 2.0 * beta_sum / (T * (1.0 + end_to_start_ratio))
        return cls(np.linspace(b0, end_to_start_ratio * b0, T))

    def alpha_bar(self, t):
        """Running product at step t, with the t = 0 identity convention."""
        t = np.asarray(t)
        if (t < 0).any() or (t > self.T).any():
            raise StructureError(f"t must lie in [0, {self.T}], got {t}")
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])

    def to_header(self) -> dict:
        header = {
            "schedule_T": self.T,
            "schedule_beta_start": repr(float(self.betas[0])),
            "schedule_beta_end": repr(float(self.betas[-1])),
        }
        rebuilt = np.linspace(self.betas[0], self.betas[-1], self.T)
        if not np.array_equal(rebuilt, self.betas):
            header["schedule_betas"] = ",".join(repr(float(b)) for b in self.betas)
        return header

    @classmethod
    def from_header(cls, extra: dict) -> "NoiseSchedule":
        try:
            if "schedule_betas" in extra:
                return cls([float(v) for v in extra["schedule_betas"].split(",")])
            T = int(extra["schedule_T"])
            b0 = float(extra["schedule_beta_start"])
            b1 = float(extra["schedule_beta_end"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"checkpoint header carries no valid schedule: {exc}") from None
        return cls(np.linspace(b0, b1, T))


@dataclass(frozen=True)
class RefineParams:
    strength: float = 0.3
    prompt: str = "urban park, top view"  # provenance metadata only
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise StructureError(f"strength must lie in [0, 1], got {self.strength}")


def _broadcast_ab(ab: np.ndarray, target: np.ndarray) -> np.ndarray:
    ab = np.asarray(ab, dtype=np.float64)
    if ab.ndim == 0:
        return ab
    return ab.reshape(ab.shape + (1,) * (target.ndim - 1))


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption of x0 to step t given unit Gaussian eps.

    t may be a scalar or one value per leading-axis sample; t = 0 returns
    x0 unchanged.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise StructureError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    ab = _broadcast_ab(sched.alpha_bar(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    x_t: np.ndarray, t: int, eps_pred: np.ndarray, sched: NoiseSchedule, z: np.ndarray | None = None
) -> np.ndarray:
    """One posterior-mean denoising step from x_t to x_{t-1}.

    Stochastic for t >= 2 with injected noise z (None means zero noise);
    the final t = 1 step is deterministic by contract.
    """
    t = int(t)
    if not 1 <= t <= sched.T:
        raise StructureError(f"t must lie in [1, {sched.T}], got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_pred.shape != x_t.shape:
        raise StructureError(f"eps_pred shape {eps_pred.shape} must match x_t {x_t.shape}")
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    ab = sched.alpha_bars[t - 1]
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(alpha)
    if t == 1:
        if z is not None and np.any(z):
            raise StructureError("the final step (t = 1) is deterministic; z must be zero")
        return mean
    if z is None:
        return mean
    return mean + np.sqrt(beta) * z


def train_denoiser(
    schemes: np.ndarray,
    config: TrainConfig,
    sched: NoiseSchedule | None = None,
    time_embedding_dim: int = 32,
    checkpoint_fn=None,
):
    """Fit the noise predictor on scheme images; returns (weights, history).

    Minimizes the mean squared error between predicted and true noise at
    uniformly sampled steps. Deterministic for a given config seed.
    """
    sched = sched or NoiseSchedule.linear()
    schemes = np.asarray(schemes, dtype=np.float64)
    if schemes.ndim != 4 or schemes.shape[0] < 1:
        raise StructureError(f"expected a non-empty (N, H, W, C) corpus, got {schemes.shape}")
    spec = ArchSpec(
        "diffusion_unet",
        in_channels=schemes.shape[3],
        out_channels=schemes.shape[3],
        base_width=config.base_width,
        depth=config.depth,
        norm=config.norm,
        time_embedding_dim=time_embedding_dim,
    )
    net = make_module(spec)
    init_module(net, config.seed, zero_head=True)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=(config.beta1, 0.999))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    x0_all = schemes * 2.0 - 1.0

    history = History()
    for epoch in range(1, config.epochs + 1):
        total, batches = 0.0, 0
        for idx in _epoch_batches(schemes.shape[0], config.batch_size, rng):
            x0 = x0_all[idx]
            t = rng.integers(1, sched.T + 1, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            x_t = forward_diffuse(x0, t, eps, sched)
            xt_t = torch.from_numpy(x_t.transpose(0, 3, 1, 2)).float()
            eps_t = torch.from_numpy(eps.transpose(0, 3, 1, 2)).float()
            pred = net(xt_t, torch.from_numpy(t))
            loss = torch.mean((pred - eps_t) ** 2)
            if not torch.isfinite(loss):
                raise NumericsError(f"NaN loss in term 'mse' at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        record = {"mse": total / batches}
        if config.eval_every and epoch % config.eval_every == 0 and checkpoint_fn is not None:
            checkpoint_fn(epoch, weights_from_module(spec, net, config.seed))
        history.append(epoch, record)
    return weights_from_module(spec, net, config.seed), history


def _predictor(weights: Weights):
    if weights.spec.kind != "diffusion_unet":
        raise StructureError(f"need a noise-predictor checkpoint, got {weights.spec.kind}")
    net = module_from_weights(weights).eval()

    def predict(x: np.ndarray, t: int) -> np.ndarray:
        xt = torch.from_numpy(x.transpose(2, 0, 1)[None]).float()
        with torch.no_grad():
            out = net(xt, torch.tensor([t]))
        return out[0].numpy().transpose(1, 2, 0).astype(np.float64)

    return predict


def _check_refine_size(spec: ArchSpec, img: np.ndarray) -> None:
    m = 2**spec.depth
    if img.shape[0] % m or img.shape[1] % m:
        raise StructureError(
            f"image size {img.shape[0]}x{img.shape[1]} incompatible with the "
            f"checkpoint (needs multiples of {m})"
        )


def refine(
    scheme: np.ndarray, params: RefineParams, weights: Weights, sched: NoiseSchedule
) -> np.ndarray:
    """Partially re-noise a scheme to step round(strength*T), then denoise.

    strength 0 returns the input unchanged; strength 1 starts from pure
    noise, so the output depends only on the seed (an unconditional
    sample). Deterministic in (input, seed, checkpoint).
    """
    scheme = check_raster(scheme, "scheme")
    predict = _predictor(weights)
    _check_refine_size(weights.spec, scheme)
    t_star = int(round(params.strength * sched.T))
    if t_star == 0:
        return scheme.copy()

    rng = np.random.Generator(np.random.PCG64(params.seed))
    x0 = scheme * 2.0 - 1.0
    eps = rng.standard_normal(x0.shape)
    x = eps if t_star == sched.T else forward_diffuse(x0, t_star, eps, sched)
    for t in range(t_star, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = reverse_step(x, t, predict(x, t), sched, z)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def sample(
    size: tuple[int, int], weights: Weights, sched: NoiseSchedule, seed: int = 0
) -> np.ndarray:
    """Unconditional sample: the strength-1 chain from pure noise."""
    blank = np.zeros((size[0], size[1], weights.spec.out_channels))
    return refine(blank, RefineParams(strength=1.0, seed=seed), weights, sched)


def upscale(
    img: np.ndarray,
    weights: Weights,
    sched: NoiseSchedule,
    per_side_factor: int = 8,
    stage_strength: float = 0.15,
    seed: int = 0,
) -> np.ndarray:
    """Alternate x2 nearest-neighbour upsampling with low-strength refines.

    log2(per_side_factor) stages; the default factor of 8 multiplies the
    pixel count by 64. stage_strength 0 degenerates to pure interpolation.
    """
    img = check_raster(img, "image")
    f = int(per_side_factor)
    if f < 1 or f & (f - 1):
        raise StructureError(f"per_side_factor must be a power of 2, got {per_side_factor}")
    out = img.copy()
    stage = 0
    while f > 1:
        out = np.repeat(np.repeat(out, 2, axis=0), 2, axis=1)
        if stage_strength > 0.0:
            out = refine(out, RefineParams(strength=stage_strength, seed=seed + stage), weights, sched)
        f //= 2
        stage += 1
    return out


def pad_canvas(img: np.ndarray, margin_fraction: float):
    """Center the image on an enlarged white canvas.

    Returns (padded, crop) where crop = (top, left, height, width) inverts
    the padding via crop_canvas.
    """
    img = check_raster(img, "image")
    if margin_fraction < 0:
        raise StructureError(f"margin_fraction must be >= 0, got {margin_fraction}")
    h, w = img.shape[:2]
    mh, mw = round(h * margin_fraction), round(w * margin_fraction)
    canvas = np.ones((h + 2 * mh, w + 2 * mw, 3), dtype=np.float64)
    canvas[mh : mh + h, mw : mw + w] = img
    return canvas, (mh, mw, h, w)


def crop_canvas(padded: np.ndarray, crop: tuple[int, int, int, int]) -> np.ndarray:
    top, left, h, w = crop
    if top + h > padded.shape[0] or left + w > padded.shape[1]:
        raise StructureError(f"crop {crop} exceeds canvas {padded.shape[:2]}")
    return padded[top : top + h, left : left + w].copy()
