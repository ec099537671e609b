"""SGD training loop with the polynomial learning-rate decay.

Both segmentation models in the pipeline train through this loop; they
differ only in their inputs (single-side scans with interpolated labels vs
whole scans with propagated labels).  The learning rate at epoch t follows

    lr = lr0 * (1 - t / T) ** exponent

with exponent 0.9.  Runs are reproducible with a fixed seed and one loading
worker; with more workers batch composition order is timing-dependent, which
the checkpoint records as deterministic=False.
"""

from __future__ import annotations

import csv
import io
import json
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..core import ClassId
from ..errors import DivergedLoss, EpochOutOfRange, NoUsableVoxels
from .augment import AugmentationConfig, augment
from .losses import dice_ce_loss
from .model import UNet3D, UNet3DConfig, build_model
from .sampling import sample_patch


@dataclass
class TrainingConfig:
    patch_size: tuple[int, int, int] = (96, 160, 160)
    batch_size: int = 2
    lr0: float = 0.01
    epochs: int = 500
    poly_exponent: float = 0.9
    iterations_per_epoch: int = 250
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 0.0
    foreground_oversample_prob: float = 0.33
    seed: int = 0
    num_workers: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def lr_schedule(t: int, cfg: TrainingConfig) -> float:
    """Polynomial decay from lr0 at t=0 to exactly 0 at t=T."""
    if not 0 <= t <= cfg.epochs:
        raise EpochOutOfRange(f"epoch {t} outside [0, {cfg.epochs}]")
    if cfg.epochs == 0:
        return cfg.lr0
    return cfg.lr0 * (1.0 - t / cfg.epochs) ** cfg.poly_exponent


@dataclass
class TrainingCase:
    case_id: str
    image: np.ndarray  # (z, y, x) float32, already z-score normalized
    labels: np.ndarray  # (z, y, x) uint8, classes {0..4}


@dataclass
class Checkpoint:
    """Weights plus everything needed to rebuild and audit the model."""

    unet_cfg: UNet3DConfig
    train_cfg: TrainingConfig
    state_dict: dict
    epoch: int
    loss_history: list[float] = field(default_factory=list)
    deterministic: bool = True

    def build(self) -> UNet3D:
        model = build_model(self.unet_cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path) -> None:
        torch.save(
            {
                "unet_cfg": json.dumps(asdict(self.unet_cfg)),
                "train_cfg": json.dumps(asdict(self.train_cfg)),
                "state_dict": self.state_dict,
                "epoch": self.epoch,
                "loss_history_csv": self.history_csv(),
                "deterministic": self.deterministic,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        unet_raw = json.loads(blob["unet_cfg"])
        train_raw = json.loads(blob["train_cfg"])
        train_raw["patch_size"] = tuple(train_raw["patch_size"])
        history = []
        reader = csv.DictReader(io.StringIO(blob["loss_history_csv"]))
        for row in reader:
            history.append(float(row["mean_loss"]))
        return cls(
            unet_cfg=UNet3DConfig(**unet_raw),
            train_cfg=TrainingConfig(**train_raw),
            state_dict=blob["state_dict"],
            epoch=int(blob["epoch"]),
            loss_history=history,
            deterministic=bool(blob["deterministic"]),
        )

    def history_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["epoch", "lr", "mean_loss"])
        for t, loss in enumerate(self.loss_history):
            w.writerow([t, f"{lr_schedule(t, self.train_cfg):.8f}", f"{loss:.8f}"])
        return out.getvalue()


def _downsampled_targets(target, ignore, num_levels):
    """Strided (nearest) target/mask pyramids for deep supervision."""
    targets, ignores = [target], [ignore]
    for _ in range(num_levels - 1):
        targets.append(targets[-1][:, ::2, ::2, ::2])
        ignores.append(ignores[-1][:, ::2, ::2, ::2])
    return targets, ignores


def _batch_loss(model, images, targets, ignores, deep_supervision):
    scores = model(images)
    if not deep_supervision:
        return dice_ce_loss(scores, targets, ignores)
    tgt_pyr, ign_pyr = _downsampled_targets(targets, ignores, len(scores))
    weights = [0.5**k for k in range(len(scores))]
    total_w = sum(weights)
    loss = 0.0
    for s, t, m, w in zip(scores, tgt_pyr, ign_pyr, weights):
        loss = loss + (w / total_w) * dice_ce_loss(s, t, m)
    return loss


def _sample_supervised(case, cfg: TrainingConfig, rng):
    """Draw patches until one carries supervision.

    Sparse-label cases can yield all-IGNORE patches (for example when the
    patch misses the annotated slice band entirely); those teach nothing, so
    resample, falling back to a forced foreground center which is never
    ignored.
    """
    for _ in range(20):
        img, lbl, ignore = sample_patch(
            case.image, case.labels, cfg.patch_size,
            cfg.foreground_oversample_prob, rng,
        )
        if not ignore.all():
            return img, lbl
    img, lbl, ignore = sample_patch(case.image, case.labels, cfg.patch_size, 1.0, rng)
    if ignore.all():
        raise NoUsableVoxels(f"case {case.case_id}: cannot draw a supervised patch")
    return img, lbl


def _make_batch(cases, cfg: TrainingConfig, aug_cfg: AugmentationConfig, rng):
    imgs, lbls = [], []
    for _ in range(cfg.batch_size):
        case = cases[rng.integers(len(cases))]
        # geometric augmentation can push supervision out of bounds; redraw
        for _ in range(20):
            img, lbl = _sample_supervised(case, cfg, rng)
            img, lbl = augment(img, lbl, aug_cfg, rng)
            if (lbl != int(ClassId.IGNORE)).any():
                break
        imgs.append(img)
        lbls.append(lbl.astype(np.int64))
    images = torch.from_numpy(np.stack(imgs)).unsqueeze(1)
    targets = torch.from_numpy(np.stack(lbls))
    ignores = targets == int(ClassId.IGNORE)
    targets = torch.where(ignores, torch.zeros_like(targets), targets)
    return images, targets, ignores


def _batch_stream(cases, cfg, aug_cfg, total_batches):
    """Yield batches; multi-worker mode prefetches in threads (unordered)."""
    if cfg.num_workers <= 1:
        rng = np.random.default_rng(cfg.seed)
        for _ in range(total_batches):
            yield _make_batch(cases, cfg, aug_cfg, rng)
        return
    out: queue.Queue = queue.Queue(maxsize=cfg.num_workers * 2)
    counter = iter(range(total_batches))
    lock = threading.Lock()

    def worker(worker_id):
        rng = np.random.default_rng((cfg.seed, worker_id))
        while True:
            with lock:
                if next(counter, None) is None:
                    break
            out.put(_make_batch(cases, cfg, aug_cfg, rng))

    threads = [
        threading.Thread(target=worker, args=(w,), daemon=True)
        for w in range(cfg.num_workers)
    ]
    for t in threads:
        t.start()
    for _ in range(total_batches):
        yield out.get()
    for t in threads:
        t.join()


def train(
    cases: list[TrainingCase],
    unet_cfg: UNet3DConfig,
    train_cfg: TrainingConfig,
    aug_cfg: AugmentationConfig | None = None,
) -> Checkpoint:
    """Run the full SGD schedule over the given cases and return a checkpoint."""
    if not cases:
        raise ValueError("training set is empty")
    aug_cfg = aug_cfg or AugmentationConfig.disabled()
    torch.manual_seed(train_cfg.seed)
    model = build_model(unet_cfg, train_cfg.patch_size)
    model.train()
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=train_cfg.lr0,
        momentum=train_cfg.momentum,
        nesterov=train_cfg.nesterov,
        weight_decay=train_cfg.weight_decay,
    )
    history: list[float] = []
    batches = _batch_stream(
        cases, train_cfg, aug_cfg, train_cfg.epochs * train_cfg.iterations_per_epoch
    )
    for epoch in range(train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_losses = []
        for _ in range(train_cfg.iterations_per_epoch):
            images, targets, ignores = next(batches)
            optimizer.zero_grad()
            loss = _batch_loss(model, images, targets, ignores, unet_cfg.deep_supervision)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise DivergedLoss(f"loss {value} at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    model.eval()
    return Checkpoint(
        unet_cfg=unet_cfg,
        train_cfg=train_cfg,
        state_dict={k: v.clone() for k, v in model.state_dict().items()},
        epoch=train_cfg.epochs,
        loss_history=history,
        deterministic=train_cfg.num_workers <= 1,
    )
