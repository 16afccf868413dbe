"""Camera-model classification training: patch sampling, the three-phase
learning-rate schedule, the optimization loop with rate-distortion logging,
and beta sweeps for regularization selection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .model import (ConstrainedConvSpec, EncoderConfig, FingerprintNet,
                    save_checkpoint)
from .objective import LossBreakdown, LossWeights, rate_kl, distortion_ce, total_loss
from .synth import SplitData

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the component snapshot."""

    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainingConfig:
    epochs: int = 40
    patches_per_epoch: int = 10_000
    batch_size: int = 64
    base_lr: float = 1e-3
    final_linear_lr: float = 5e-5
    phase_constant: int = 10
    phase_linear: int = 25
    phase_exp: int = 5
    exp_decay: float = 0.9
    optimizer: str = "adam"
    seed: int = 0
    val_patches: int = 2048
    checkpoint_every: int = 0   # epochs; 0 = final checkpoint only
    z_samples: int = 1
    log_every: int = 1          # steps per JSONL record

    def __post_init__(self):
        if self.phase_constant + self.phase_linear + self.phase_exp != self.epochs:
            raise ValueError("phase lengths must sum to epochs")
        if self.patches_per_epoch % self.batch_size != 0:
            raise ValueError("batch_size must divide patches_per_epoch")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def paper_scale_training() -> TrainingConfig:
    """Full-scale schedule: 700 epochs, 100k patches/epoch, 1e-4 -> 5e-6 -> x0.9."""
    return TrainingConfig(epochs=700, patches_per_epoch=100_000, batch_size=200,
                          base_lr=1e-4, final_linear_lr=5e-6,
                          phase_constant=100, phase_linear=530, phase_exp=70)


@dataclass
class RDPoint:
    rate: float
    distortion: float
    beta: float
    epoch: int
    split: str

    def __post_init__(self):
        if self.rate < 0 or self.distortion < 0:
            raise ValueError("rate and distortion must be nonnegative")


@dataclass
class TrainResult:
    net: FingerprintNet
    rd_trace: list[RDPoint]
    accuracy_trace: list[tuple[int, float]]
    checkpoints: list[str] = field(default_factory=list)
    final_loss: float = float("nan")


def lr_at(epoch: int, config: TrainingConfig) -> float:
    """Learning rate of the piecewise schedule at an epoch.

    Constant, then linear from base to final (endpoints attained exactly),
    then one multiplicative decay factor per epoch.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    c, l = config.phase_constant, config.phase_linear
    if epoch < c:
        return config.base_lr
    if epoch < c + l:
        t = 1.0 if l == 1 else (epoch - c) / (l - 1)
        return config.base_lr + t * (config.final_linear_lr - config.base_lr)
    return config.final_linear_lr * config.exp_decay ** (epoch - (c + l - 1))


def sample_patches(data: SplitData, count: int, patch_size: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced random crops: uniform class, uniform image, uniform position.

    Returns (patches (N, P, P, 3) float64, labels (N,) int64).
    """
    patches = np.empty((count, patch_size, patch_size, 3))
    labels = np.empty(count, dtype=np.int64)
    groups = data.by_class()
    class_ids = [c for c in data.class_ids if groups[c]]
    if count > 0 and not class_ids:
        raise ValueError("dataset has no usable images")
    for n in range(count):
        cls = class_ids[rng.integers(0, len(class_ids))]
        img = data.images[groups[cls][rng.integers(0, len(groups[cls]))]]
        h, w = img.shape[:2]
        r = int(rng.integers(0, h - patch_size + 1))
        c = int(rng.integers(0, w - patch_size + 1))
        patches[n] = img[r:r + patch_size, c:c + patch_size]
        labels[n] = cls
    return patches, labels


def _to_batch(patches: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(patches).permute(0, 3, 1, 2).to(dtype)


@torch.no_grad()
def evaluate_classifier(net: FingerprintNet, patches: torch.Tensor,
                        labels: torch.Tensor, batch_size: int = 512
                        ) -> tuple[float, float, float]:
    """Deterministic validation pass with z = mu: (accuracy, distortion, rate)."""
    was_training = net.training
    net.eval()
    correct, ce_sum, rate_sum, n = 0, 0.0, 0.0, 0
    for i in range(0, patches.shape[0], batch_size):
        xb = patches[i:i + batch_size]
        yb = labels[i:i + batch_size]
        mu, sigma = net(xb)
        probs = net.decode(mu)
        correct += int((probs.argmax(dim=-1) == yb).sum())
        ce_sum += float(distortion_ce(probs, yb)) * xb.shape[0]
        rate_sum += float(rate_kl(mu, sigma).mean()) * xb.shape[0]
        n += xb.shape[0]
    if was_training:
        net.train()
    return correct / n, ce_sum / n, rate_sum / n


def train(net: FingerprintNet, train_data: SplitData, val_data: SplitData,
          config: TrainingConfig, weights: LossWeights,
          out_dir: str | Path | None = None) -> TrainResult:
    """Optimize the total loss with the scheduled learning rate.

    Logs one JSONL record per `log_every` steps, one validation RD point and
    accuracy entry per epoch, and checkpoints at the configured cadence.
    Bit-reproducible for a fixed seed in single-threaded mode.
    """
    if len(set(train_data.labels)) < 2:
        raise ValueError("training data must contain at least 2 classes")
    dtype = next(net.parameters()).dtype
    patch = net.encoder_config.patch_size

    data_rng = np.random.default_rng([config.seed, 0xDA7A])
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    val_rng = np.random.default_rng([config.seed, 0x7A1])

    n_val = min(config.val_patches, 50_000)
    vp, vl = sample_patches(val_data, n_val, patch, val_rng)
    val_x, val_y = _to_batch(vp, dtype), torch.from_numpy(vl)

    if config.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=config.base_lr)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=config.base_lr, momentum=0.9)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    rd_trace: list[RDPoint] = []
    acc_trace: list[tuple[int, float]] = []
    checkpoints: list[str] = []
    steps_per_epoch = config.patches_per_epoch // config.batch_size
    step = 0
    final_loss = float("nan")
    try:
        for epoch in range(config.epochs):
            net.train()
            lr = lr_at(epoch, config)
            for g in opt.param_groups:
                g["lr"] = lr
            d_sum = r_sum = 0.0
            for _ in range(steps_per_epoch):
                pb, lb = sample_patches(train_data, config.batch_size, patch, data_rng)
                xb, yb = _to_batch(pb, dtype), torch.from_numpy(lb)
                breakdown = total_loss(net, xb, yb, weights, generator=noise_gen,
                                       z_samples=config.z_samples)
                loss = breakdown.total
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, breakdown.scalars())
                opt.zero_grad()
                loss.backward()
                opt.step()
                d_sum += float(breakdown.distortion)
                r_sum += float(breakdown.rate)
                final_loss = float(loss)
                if log_fh is not None and step % config.log_every == 0:
                    log_fh.write(json.dumps(breakdown.log_record(step, weights.beta)) + "\n")
                step += 1
            rd_trace.append(RDPoint(rate=r_sum / steps_per_epoch,
                                    distortion=d_sum / steps_per_epoch,
                                    beta=weights.beta, epoch=epoch, split="train"))
            acc, val_d, val_r = evaluate_classifier(net, val_x, val_y)
            rd_trace.append(RDPoint(rate=val_r, distortion=val_d, beta=weights.beta,
                                    epoch=epoch, split="val"))
            acc_trace.append((epoch, acc))
            log.info("epoch %d lr %.2e val acc %.3f D %.4f R %.4f",
                     epoch, lr, acc, val_d, val_r)
            if (out_dir is not None and config.checkpoint_every > 0
                    and (epoch + 1) % config.checkpoint_every == 0):
                cp = out_dir / f"checkpoint_ep{epoch:04d}.ckpt"
                save_checkpoint(cp, net, torch_rng=noise_gen)
                checkpoints.append(str(cp))
        if out_dir is not None:
            cp = out_dir / "checkpoint_final.ckpt"
            save_checkpoint(cp, net, torch_rng=noise_gen)
            checkpoints.append(str(cp))
            _write_traces(out_dir, rd_trace, acc_trace)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(net=net, rd_trace=rd_trace, accuracy_trace=acc_trace,
                       checkpoints=checkpoints, final_loss=final_loss)


def _write_traces(out_dir: Path, rd_trace: list[RDPoint],
                  acc_trace: list[tuple[int, float]]):
    with open(out_dir / "rd_trace.csv", "w") as fh:
        fh.write("epoch,split,beta,rate,distortion\n")
        for p in rd_trace:
            fh.write(f"{p.epoch},{p.split},{p.beta:.10g},{p.rate:.10g},{p.distortion:.10g}\n")
    with open(out_dir / "accuracy.csv", "w") as fh:
        fh.write("epoch,val_accuracy\n")
        for epoch, acc in acc_trace:
            fh.write(f"{epoch},{acc:.10g}\n")


@dataclass
class SweepRun:
    beta: float
    final_point: RDPoint
    val_accuracy: float
    checkpoint: str


def beta_sweep(train_data: SplitData, val_data: SplitData, betas: list[float],
               config: TrainingConfig, weights: LossWeights,
               conv_spec: ConstrainedConvSpec, encoder: EncoderConfig,
               num_classes: int, out_dir: str | Path) -> list[SweepRun]:
    """One independent training run per beta.

    Data sampling shares the sweep seed; model init gets a per-run seed.
    Partial results survive a failing run.
    """
    if not betas:
        raise ValueError("betas list must be non-empty")
    if any(b < 0 for b in betas):
        raise ValueError("betas must be nonnegative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs: list[SweepRun] = []
    failures: list[tuple[float, Exception]] = []
    for i, beta in enumerate(betas):
        run_dir = out_dir / f"beta_{i}_{beta:g}"
        torch.manual_seed(config.seed + 1000 * (i + 1))  # per-run model seed
        net = FingerprintNet(conv_spec, encoder, num_classes)
        w = LossWeights(beta=beta, lam=weights.lam,
                        omega1=weights.omega1, omega2=weights.omega2)
        try:
            result = train(net, train_data, val_data, config, w, out_dir=run_dir)
        except TrainingDiverged as exc:
            log.error("beta %g run failed: %s", beta, exc)
            failures.append((beta, exc))
            continue
        val_points = [p for p in result.rd_trace if p.split == "val"]
        runs.append(SweepRun(beta=beta, final_point=val_points[-1],
                             val_accuracy=result.accuracy_trace[-1][1],
                             checkpoint=result.checkpoints[-1]))
    _write_sweep_csv(out_dir / "rd_sweep.csv", runs)
    if failures and not runs:
        raise failures[0][1]
    return runs


def _write_sweep_csv(path: Path, runs: list[SweepRun]):
    with open(path, "w") as fh:
        fh.write("beta,rate,distortion,val_accuracy,checkpoint\n")
        for r in runs:
            fh.write(f"{r.beta:.10g},{r.final_point.rate:.10g},"
                     f"{r.final_point.distortion:.10g},{r.val_accuracy:.10g},"
                     f"{r.checkpoint}\n")


def training_config_from_dict(d: dict) -> TrainingConfig:
    return TrainingConfig(**d)


def config_snapshot(config: TrainingConfig, weights: LossWeights,
                    conv_spec: ConstrainedConvSpec, encoder: EncoderConfig) -> dict:
    snap = {"training": asdict(config), "loss": asdict(weights),
            "conv_spec": asdict(conv_spec), "encoder": asdict(encoder)}
    snap["encoder"]["group_kernels"] = list(snap["encoder"]["group_kernels"])
    return snap
