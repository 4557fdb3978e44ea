"""Paired-data ingestion, patch sampling, Adam with cosine annealing and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from qsamnet.autograd import Tensor, mse, no_grad
from qsamnet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from qsamnet.layers import Module
from qsamnet.model import NetConfig, QSAMNet
from qsamnet.quaternion import encode_batch, load_png

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class NonFiniteError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# data


class PairedDataset:
    """``root/rainy`` and ``root/clean`` images matched by file name."""

    def __init__(self, root, cache: bool = True):
        self.root = Path(root)
        rainy_dir, clean_dir = self.root / "rainy", self.root / "clean"
        if not rainy_dir.is_dir() or not clean_dir.is_dir():
            raise FileNotFoundError(f"{self.root} must contain rainy/ and clean/ directories")
        self.names = sorted(p.name for p in rainy_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        missing = [n for n in self.names if not (clean_dir / n).is_file()]
        if missing:
            raise FileNotFoundError(f"no clean partner for {missing[:5]}")
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        name = self.names[i]
        rainy = load_png(self.root / "rainy" / name)
        clean = load_png(self.root / "clean" / name)
        if rainy.shape != clean.shape:
            raise ValueError(f"{name}: rainy {rainy.shape} and clean {clean.shape} differ in size")
        if self._cache is not None:
            self._cache[i] = (rainy, clean)
        return rainy, clean


def sample_patch(rainy: np.ndarray, clean: np.ndarray, patch: int, rng: np.random.Generator):
    """Identical random crop (and 50 % horizontal flip) of an aligned pair.

    Images smaller than ``patch`` are reflect-padded first.
    """
    h, w = rainy.shape[:2]
    ph, pw = max(0, patch - h), max(0, patch - w)
    if ph or pw:
        pad = ((0, ph), (0, pw), (0, 0))
        rainy, clean = np.pad(rainy, pad, mode="reflect"), np.pad(clean, pad, mode="reflect")
        h, w = rainy.shape[:2]
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    r = rainy[top : top + patch, left : left + patch]
    c = clean[top : top + patch, left : left + patch]
    if rng.random() < 0.5:
        r, c = r[:, ::-1], c[:, ::-1]
    return r, c


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    """Batch composition depends only on (seed, iteration), which makes resuming exact."""
    return np.random.default_rng([seed, iteration])


def make_batch(dataset: PairedDataset, batch: int, patch: int, seed: int, iteration: int):
    rng = batch_rng(seed, iteration)
    idx = rng.integers(0, len(dataset), size=batch)
    pairs = [sample_patch(*dataset[int(i)], patch, rng) for i in idx]
    rainy = encode_batch([p[0] for p in pairs])
    clean = encode_batch([p[1] for p in pairs])
    return rainy, clean


# ---------------------------------------------------------------------------
# optimisation


def mse_loss(out: Tensor, target) -> Tensor:
    """Mean squared error over batch, components and pixels."""
    return mse(out, target)


def cosine_lr(t: int, total: int, lr_start: float = 2e-4, lr_end: float = 1e-7) -> float:
    """Single cosine anneal from ``lr_start`` at ``t=0`` to ``lr_end`` at ``t=total``."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if total <= 0 or t >= total:
        return lr_end if t >= total else lr_start
    return lr_end + (lr_start - lr_end) * (1.0 + math.cos(math.pi * t / total)) / 2.0


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        bad = [k for k, p in self.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradients in {bad[:5]}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(tensors[f"v/{k}"], dtype=self.params[k].dtype)
        self.t = t

    def scalars(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.t}


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    state.step(lr)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch: int = 2
    patch: int = 256
    lr_start: float = 2e-4
    lr_end: float = 1e-7
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.patch % 16:
            raise ValueError(f"patch size must be divisible by 16, got {self.patch}")
        if not self.lr_end < self.lr_start:
            raise ValueError("lr_end must be below lr_start")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be positive and iterations non-negative")


@dataclass
class LossRecord:
    iteration: int
    lr: float
    loss_stage1: float
    loss_stage2: float

    @property
    def loss_total(self) -> float:
        return self.loss_stage1 + self.loss_stage2


@dataclass
class TrainResult:
    net: QSAMNet
    optimizer: Adam
    records: list[LossRecord] = field(default_factory=list)
    checkpoint: Checkpoint | None = None


def make_checkpoint(net: QSAMNet, opt: Adam, train_cfg: TrainConfig, iteration: int) -> Checkpoint:
    config = {"net": net.config.to_dict(), "train": asdict(train_cfg), "optimizer": opt.scalars()}
    rng_state = json.dumps({"scheme": "seed+iteration", "seed": train_cfg.seed, "next": iteration}).encode()
    return Checkpoint(config, net.state_dict(), opt.state_tensors(), iteration, rng_state)


def restore(ckpt: Checkpoint) -> tuple[QSAMNet, Adam, TrainConfig]:
    """Rebuild the network, optimiser and training config stored in ``ckpt``."""
    net = QSAMNet(NetConfig.from_dict(ckpt.config["net"]))
    net.load_state_dict(ckpt.params)
    opt_cfg = ckpt.config.get("optimizer", {})
    opt = Adam(dict(net.named_parameters()), opt_cfg.get("beta1", 0.9), opt_cfg.get("beta2", 0.999), opt_cfg.get("eps", 1e-8))
    if ckpt.optimizer:
        opt.load_state_tensors(ckpt.optimizer, int(opt_cfg.get("step", ckpt.iteration)))
    train_cfg = TrainConfig(**ckpt.config["train"]) if "train" in ckpt.config else TrainConfig()
    return net, opt, train_cfg


def train(
    dataset: PairedDataset,
    cfg: TrainConfig,
    net_config: NetConfig | None = None,
    resume: Checkpoint | None = None,
    out_dir=None,
    stop_at: int | None = None,
    on_record: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """Run the two-stage deep-supervision loop.

    ``loss = MSE(X1, J) + MSE(X2, J)``, Adam, learning rate from :func:`cosine_lr`.
    ``stop_at`` ends the run early (the schedule still spans ``cfg.iterations``), which is
    how interrupted runs are simulated.  With ``out_dir`` set, loss records go to
    ``loss.csv`` and checkpoints to ``ckpt_XXXXXXX.qsam`` / ``final.qsam``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if resume is not None:
        net, opt, _ = restore(resume)
        start = resume.iteration
    else:
        net = QSAMNet(net_config or NetConfig(seed=cfg.seed))
        opt = Adam(dict(net.named_parameters()))
        start = 0
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    if net.config.divisor > cfg.patch or cfg.patch % net.config.divisor:
        raise ValueError(f"patch {cfg.patch} incompatible with {len(net.config.widths)} scales")

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        fresh = not start or not csv_path.is_file() or csv_path.stat().st_size == 0
        fh = open(csv_path, "w" if not start else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["iteration", "lr", "loss_stage1", "loss_stage2", "loss_total"])

    result = TrainResult(net, opt)
    try:
        for it in range(start, end):
            rainy, clean = make_batch(dataset, cfg.batch, cfg.patch, cfg.seed, it)
            lr = cosine_lr(it, cfg.iterations, cfg.lr_start, cfg.lr_end)
            net.zero_grad()
            x1, x2 = net(rainy)
            l1, l2 = mse_loss(x1, clean), mse_loss(x2, clean)
            loss = l1 + l2
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"loss became non-finite at iteration {it}")
            loss.backward()
            opt.step(lr)
            rec = LossRecord(it, lr, float(l1.data), float(l2.data))
            result.records.append(rec)
            if writer is not None:
                writer.writerow([it, f"{lr:.9g}", f"{rec.loss_stage1:.9g}", f"{rec.loss_stage2:.9g}", f"{rec.loss_total:.9g}"])
            if on_record is not None:
                on_record(rec)
            if it % 100 == 0:
                log.info("iter %d lr %.3g loss %.6f", it, lr, rec.loss_total)
            done = it + 1
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < end:
                save_checkpoint(out / f"ckpt_{done:07d}.qsam", make_checkpoint(net, opt, cfg, done))
    finally:
        if writer is not None:
            fh.close()
    result.checkpoint = make_checkpoint(net, opt, cfg, end)
    if out is not None:
        save_checkpoint(out / "final.qsam", result.checkpoint)
    return result


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry ``i`` averages ``values[max(0, i-window+1) : i+1]``."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def restore_images(net: Module, rainy: np.ndarray, batch: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Inference on a ``(N, 4, H, W)`` array; returns stage-1 and stage-2 restorations."""
    outs1, outs2 = [], []
    with no_grad():
        for i in range(0, len(rainy), batch):
            x1, x2 = net(rainy[i : i + batch])
            outs1.append(x1.data)
            outs2.append(x2.data)
    return np.concatenate(outs1), np.concatenate(outs2)


def load_for_inference(path) -> QSAMNet:
    net, _, _ = restore(load_checkpoint(path))
    return net
