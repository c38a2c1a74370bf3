"""Optimization loops for the translation tasks, plus checkpointed inference.

Runs are fully deterministic for a given config seed: weight init, batch
order and unpaired shuffling all derive from it. Histories record every
loss term per epoch; a non-finite term aborts the run naming the epoch and
term. Checkpoints are written at the end of training and, when eval_every
is set, at each evaluation epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericsError, StructureError
from .legend import ClassMap, encode_classmap, quantize_to_classes
from .losses import CycleGANObjective, Pix2PixObjective, cyclegan_losses, pix2pix_losses
from .nets import ArchSpec, Weights, forward, init_module, make_module, weights_from_module

TASKS = ("seg_extract", "env_to_layout_supervised", "env_to_layout_unpaired", "layout_to_scheme")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    eval_every: int = 0  # epochs between evaluation checkpoints; 0 disables
    base_width: int = 16
    depth: int = 3          # unet levels / residual blocks
    disc_depth: int = 3
    norm: str = "instance"
    adversarial: str = "bce"
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0

    def __post_init__(self):
        if self.epochs < 0:
            raise StructureError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise StructureError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise StructureError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1:
            raise StructureError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if self.eval_every < 0:
            raise StructureError(f"eval_every must be >= 0, got {self.eval_every}")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in vars(self).items())

    @staticmethod
    def from_text(text: str) -> "TrainConfig":
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, raw = (part.strip() for part in line.partition("="))
            if not eq:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            if key not in TrainConfig.__dataclass_fields__:
                raise ConfigError(f"line {lineno}: unknown training option {key!r}")
            kind = TrainConfig.__dataclass_fields__[key].type
            try:
                values[key] = {"str": str, "int": int, "float": float}[kind](raw)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad {kind} value {raw!r} for {key}") from None
        try:
            return TrainConfig(**values)
        except StructureError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class History:
    """Per-epoch loss terms and evaluation metrics."""

    records: list[dict] = field(default_factory=list)

    def append(self, epoch: int, values: dict) -> None:
        for term, v in values.items():
            if not np.isfinite(v):
                raise NumericsError(f"non-finite value for term {term!r} at epoch {epoch}")
        self.records.append({"epoch": epoch, **values})

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "term", "value"])
            for rec in self.records:
                for term, value in rec.items():
                    if term != "epoch":
                        writer.writerow([rec["epoch"], term, f"{value:.10g}"])

    def summary(self) -> str:
        if not self.records:
            return "no completed epochs\n"
        lines = [f"epochs completed: {len(self.records)}"]
        last = self.records[-1]
        for term, value in last.items():
            if term != "epoch":
                lines.append(f"final {term}: {value:.6g}")
        return "\n".join(lines) + "\n"


def _to_torch(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float()


def _abort_on_nan(terms: dict, epoch: int) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericsError(f"NaN loss in term {name!r} at epoch {epoch}")


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit_pix2pix(
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    eval_fn=None,
    checkpoint_fn=None,
):
    """Train the paired translator; returns (G, D weights, history)."""
    if x.shape[0] != y.shape[0]:
        raise StructureError(f"paired corpus sizes differ: {x.shape[0]} vs {y.shape[0]}")
    gen_spec = ArchSpec(
        "unet_gen", in_channels=x.shape[3], out_channels=y.shape[3],
        base_width=config.base_width, depth=config.depth, norm=config.norm,
    )
    disc_spec = ArchSpec(
        "patch_disc", in_channels=x.shape[3] + y.shape[3],
        base_width=config.base_width, depth=config.disc_depth, norm=config.norm,
    )
    obj = Pix2PixObjective(lambda_l1=config.lambda_l1, adversarial=config.adversarial)

    G, D = make_module(gen_spec), make_module(disc_spec)
    init_module(G, config.seed)
    init_module(D, config.seed + 1)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.learning_rate, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.learning_rate, betas=(config.beta1, 0.999))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    xt, yt = _to_torch(x), _to_torch(y)

    history = History()
    for epoch in range(1, config.epochs + 1):
        sums, batches = {}, 0
        for idx in _epoch_batches(x.shape[0], config.batch_size, rng):
            bi = torch.from_numpy(idx)
            loss_g, loss_d, terms = pix2pix_losses(G, D, xt[bi], yt[bi], obj)
            _abort_on_nan({**terms, "g_total": loss_g, "d_total": loss_d}, epoch)
            # the discriminator loss only sees detached fakes, so its graph
            # survives the generator backward pass
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            batches += 1
            for name, value in {**terms, "g_total": loss_g, "d_total": loss_d}.items():
                sums[name] = sums.get(name, 0.0) + float(value.detach())
        record = {name: total / batches for name, total in sums.items()}
        if config.eval_every and epoch % config.eval_every == 0:
            if eval_fn is not None:
                record.update(eval_fn(weights_from_module(gen_spec, G, config.seed)))
            if checkpoint_fn is not None:
                checkpoint_fn(epoch, weights_from_module(gen_spec, G, config.seed))
        history.append(epoch, record)

    return (
        weights_from_module(gen_spec, G, config.seed),
        weights_from_module(disc_spec, D, config.seed + 1),
        history,
    )


def fit_cyclegan(
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    eval_fn=None,
    checkpoint_fn=None,
):
    """Train the unpaired translator pair; returns (weights dict, history).

    The dict holds G (x to y), F (y to x) and the two discriminators.
    """
    gen_xy = ArchSpec(
        "resnet_gen", in_channels=x.shape[3], out_channels=y.shape[3],
        base_width=config.base_width, depth=config.depth, norm=config.norm,
    )
    gen_yx = ArchSpec(
        "resnet_gen", in_channels=y.shape[3], out_channels=x.shape[3],
        base_width=config.base_width, depth=config.depth, norm=config.norm,
    )
    disc_x = ArchSpec(
        "patch_disc", in_channels=x.shape[3],
        base_width=config.base_width, depth=config.disc_depth, norm=config.norm,
    )
    disc_y = ArchSpec(
        "patch_disc", in_channels=y.shape[3],
        base_width=config.base_width, depth=config.disc_depth, norm=config.norm,
    )
    obj = CycleGANObjective(
        lambda_cycle=config.lambda_cycle,
        lambda_identity=config.lambda_identity,
        adversarial=config.adversarial,
    )

    G, F = make_module(gen_xy), make_module(gen_yx)
    DX, DY = make_module(disc_x), make_module(disc_y)
    for i, module in enumerate((G, F, DX, DY)):
        init_module(module, config.seed + i)
    gen_params = list(G.parameters()) + list(F.parameters())
    disc_params = list(DX.parameters()) + list(DY.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(disc_params, lr=config.learning_rate, betas=(config.beta1, 0.999))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    xt, yt = _to_torch(x), _to_torch(y)

    history = History()
    for epoch in range(1, config.epochs + 1):
        sums, batches = {}, 0
        # unpaired: each epoch pairs a fresh shuffle of x with one of y
        y_order = rng.permutation(y.shape[0])
        for k, idx in enumerate(_epoch_batches(x.shape[0], config.batch_size, rng)):
            y_idx = y_order[(k * config.batch_size + np.arange(idx.size)) % y.shape[0]]
            xb, yb = xt[torch.from_numpy(idx)], yt[torch.from_numpy(y_idx)]
            loss_g, loss_dx, loss_dy, terms = cyclegan_losses(G, F, DX, DY, xb, yb, obj)
            _abort_on_nan({**terms, "g_total": loss_g}, epoch)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            opt_d.zero_grad()
            (loss_dx + loss_dy).backward()
            opt_d.step()
            batches += 1
            for name, value in {**terms, "g_total": loss_g}.items():
                sums[name] = sums.get(name, 0.0) + float(value.detach())
        record = {name: total / batches for name, total in sums.items()}
        if config.eval_every and epoch % config.eval_every == 0:
            if eval_fn is not None:
                record.update(eval_fn(weights_from_module(gen_xy, G, config.seed)))
            if checkpoint_fn is not None:
                checkpoint_fn(epoch, weights_from_module(gen_xy, G, config.seed))
        history.append(epoch, record)

    weights = {
        "G": weights_from_module(gen_xy, G, config.seed),
        "F": weights_from_module(gen_yx, F, config.seed + 1),
        "D_X": weights_from_module(disc_x, DX, config.seed + 2),
        "D_Y": weights_from_module(disc_y, DY, config.seed + 3),
    }
    return weights, history


# ---------------------------------------------------------------------------
# Task-level wiring: pick domain pairs out of a scene corpus.
# ---------------------------------------------------------------------------

def mask_to_site_interior(scene_env: ClassMap) -> np.ndarray:
    """Encoded environment with everything outside the site set to Background.

    This is the interior-only conditioning variant: the model sees the site
    footprint but none of the surrounding urban context.
    """
    data = scene_env.data.copy()
    site = data == scene_env.legend.mask_class_id()
    data[~site] = scene_env.legend.class_id("Background")
    return encode_classmap(ClassMap(data, scene_env.legend))


def task_arrays(task: str, corpus, interior_only: bool = False):
    """(input batch, output batch) for a task, both (N, H, W, 3) in [0, 1]."""
    if task not in TASKS:
        raise StructureError(f"unknown task {task!r}; expected one of {TASKS}")
    scenes = corpus.scenes if hasattr(corpus, "scenes") else list(corpus)
    if not scenes:
        raise StructureError("empty corpus")
    if task == "seg_extract":
        x = np.stack([s.remote for s in scenes])
        y = np.stack([encode_classmap(s.environment) for s in scenes])
    elif task in ("env_to_layout_supervised", "env_to_layout_unpaired"):
        if interior_only:
            x = np.stack([mask_to_site_interior(s.environment) for s in scenes])
        else:
            x = np.stack([encode_classmap(s.environment) for s in scenes])
        y = np.stack([encode_classmap(s.layout) for s in scenes])
    else:  # layout_to_scheme
        x = np.stack([encode_classmap(s.layout) for s in scenes])
        y = np.stack([s.scheme for s in scenes])
    return x, y


def _pixel_accuracy_eval(x_eval, truth_maps, legend):
    def eval_fn(gen_weights):
        correct = total = 0
        out = forward(gen_weights, x_eval)
        for img, truth in zip(out, truth_maps):
            pred = quantize_to_classes(np.clip(img, 0, 1), legend)
            correct += int((pred.data == truth.data).sum())
            total += truth.data.size
        return {"eval_pixel_accuracy": correct / total}

    return eval_fn


def train_task(
    task: str,
    corpus,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    eval_corpus=None,
    interior_only: bool = False,
):
    """Train one pipeline stage on a corpus; returns (checkpoints, history).

    checkpoints is a name -> Weights dict whose "primary" entry (always
    present under key "G") maps the task's input domain to its output
    domain. With out_dir set, final checkpoints, the history CSV/summary
    and the config are persisted there.
    """
    x, y = task_arrays(task, corpus, interior_only=interior_only)

    eval_fn = None
    if eval_corpus is not None and task == "seg_extract":
        scenes = eval_corpus.scenes[:8]
        eval_fn = _pixel_accuracy_eval(
            np.stack([s.remote for s in scenes]),
            [s.environment for s in scenes],
            scenes[0].environment.legend,
        )

    out = Path(out_dir) if out_dir is not None else None
    checkpoint_fn = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

        def checkpoint_fn(epoch: int, weights: Weights) -> None:
            save_checkpoint(out / f"G_epoch{epoch:04d}.ckpt", weights, extra={"task": task, "epoch": epoch})

    if task == "env_to_layout_supervised":
        g, d, history = fit_pix2pix(x, y, config, eval_fn=eval_fn, checkpoint_fn=checkpoint_fn)
        checkpoints = {"G": g, "D": d}
    else:
        weights, history = fit_cyclegan(x, y, config, eval_fn=eval_fn, checkpoint_fn=checkpoint_fn)
        checkpoints = weights

    if out is not None:
        for name, weights in checkpoints.items():
            save_checkpoint(out / f"{name}.ckpt", weights, extra={"task": task, "epochs": config.epochs})
        history.to_csv(out / "history.csv")
        (out / "history.txt").write_text(history.summary())
        (out / "config.txt").write_text(config.to_text())
    return checkpoints, history


def infer(weights: Weights, img: np.ndarray) -> np.ndarray:
    """Run a generator checkpoint on one raster; pure in (weights, img)."""
    if weights.spec.kind not in ("unet_gen", "resnet_gen"):
        raise StructureError(f"infer needs a generator checkpoint, got {weights.spec.kind}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise StructureError(f"expected one (H, W, C) raster, got shape {arr.shape}")
    out = forward(weights, arr[None])[0]
    return np.clip(out, 0.0, 1.0)
