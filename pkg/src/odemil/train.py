"""Learning-rate schedules, batch assembly and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .datagen import SystemRecord, apply_noise
from .infer import instances_to_tensors, rms_scale, scale_system
from .model import ModelConfig, MultiInstanceSeq2Seq, load_checkpoint, save_checkpoint, sequence_loss
from .tokenizer import Vocab, build_vocab, encode_system

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CosineParams:
    warmup: int = 1000
    cycle: int = 30_000
    period_mult: float = 1.1
    shrink: float = 0.75
    lr_max: float = 2e-4
    lr_min: float = 1e-9


@dataclass(frozen=True)
class NoamParams:
    warmup: int = 2000
    lr_max: float = 4e-4  # 2D; 1e-4 for 3D


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 55
    schedule: str = "cosine"
    cosine: CosineParams = field(default_factory=CosineParams)
    noam: NoamParams = field(default_factory=NoamParams)
    total_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float | None = None  # None: 0.999, or 0.98 under the Noam schedule
    eps: float = 1e-8
    rescale: bool = True
    scale_convention: str = "rms"
    sigma: float | None = None  # None: use each record's sigma
    log_every: int = 10

    def __post_init__(self):
        if self.schedule not in ("cosine", "noam"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.cosine.warmup < 1 or self.noam.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if not self.cosine.lr_min < self.cosine.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @property
    def betas(self) -> tuple[float, float]:
        if self.beta2 is not None:
            return self.beta1, self.beta2
        return self.beta1, 0.98 if self.schedule == "noam" else 0.999

    def lr(self, step: int) -> float:
        if self.schedule == "noam":
            return noam_schedule(step, self.noam)
        return cosine_schedule(step, self.cosine)

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_schedule(step: int, p: CosineParams = CosineParams()) -> float:
    """Linear warmup to ``lr_max``, then cosine cycles with growing length and
    shrinking peak.  Warmup happens once."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < p.warmup:
        return p.lr_max * step / p.warmup
    t = step - p.warmup
    length, peak = float(p.cycle), p.lr_max
    while t >= length:
        t -= length
        length *= p.period_mult
        peak *= p.shrink
    return p.lr_min + 0.5 * (peak - p.lr_min) * (1 + math.cos(math.pi * t / length))


def cycle_bounds(k: int, p: CosineParams = CosineParams()) -> tuple[float, float, float]:
    """(start step, length, peak) of the ``k``-th cosine cycle, ``k`` from 0."""
    start, length, peak = float(p.warmup), float(p.cycle), p.lr_max
    for _ in range(k):
        start += length
        length *= p.period_mult
        peak *= p.shrink
    return start, length, peak


def noam_schedule(step: int, p: NoamParams = NoamParams()) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step == 0:
        return 0.0
    return p.lr_max * min(step / p.warmup, math.sqrt(p.warmup / step))


# --- batches --------------------------------------------------------------

def make_batches(records: Sequence[SystemRecord], batch_size: int,
                 rng: np.random.Generator) -> Iterator[list[SystemRecord]]:
    """One shuffled pass over ``records`` in batches (the last one may be short)."""
    for r in records:
        if r.n_instances < 1:
            raise ValueError(f"record {r.id} has no instances")
    order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


@dataclass
class Batch:
    ids: torch.Tensor        # (N, s, slots) trajectory tokens, all instances flat
    slot_mask: torch.Tensor  # (N, s, slots)
    counts: list[int]        # instances per system, in batch order
    tgt: torch.Tensor        # (B, L) BOS ... EOS PAD...
    record_ids: list[int]
    scales: list[float]

    @property
    def tgt_in(self):
        return self.tgt[:, :-1]

    @property
    def tgt_out(self):
        return self.tgt[:, 1:]


def collate(records: Sequence[SystemRecord], rng: np.random.Generator | None, cfg: TrainConfig,
            d_max: int = 4, vocab: Vocab | None = None) -> Batch:
    """Noise (fresh draw from ``rng``), rescale and tokenize a list of records.

    Targets are the rescaled systems, so training sees the same frame as
    inference.
    """
    vocab = vocab or build_vocab()
    groups, targets, scales = [], [], []
    for rec in records:
        sigma = rec.sigma if cfg.sigma is None else cfg.sigma
        inst = rec.instances
        if sigma > 0:
            if rng is None:
                raise ValueError("noisy records need an rng")
            inst = [apply_noise(tr, sigma, rng) for tr in inst]
        system = rec.system
        R = 1.0
        if cfg.rescale:
            inst, R = rms_scale(inst, cfg.scale_convention)
            system = scale_system(system, R)
        groups.append(inst)
        targets.append(encode_system(system, vocab))
        scales.append(R)
    ids, mask, counts = instances_to_tensors(groups, d_max, vocab)
    L = max(len(t) for t in targets)
    tgt = torch.full((len(targets), L), vocab.pad, dtype=torch.long)
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = torch.tensor(t)
    return Batch(ids, mask, counts, tgt, [r.id for r in records], scales)


# --- optimization ---------------------------------------------------------

class NonFiniteLoss(RuntimeError):
    pass


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=cfg.betas, eps=cfg.eps)


def batch_loss(model, batch: Batch, pad_id: int) -> torch.Tensor:
    logits = model(batch.ids, batch.slot_mask, batch.counts, batch.tgt_in)
    return sequence_loss(logits, batch.tgt_out, pad_id)


def train_step(model, optimizer, batch: Batch, lr: float, cfg: TrainConfig,
               pad_id: int | None = None) -> dict:
    pad_id = build_vocab().pad if pad_id is None else pad_id
    model.train()
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, pad_id)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()} on records {batch.record_ids}")
    loss.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
    if cfg.clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    if lr > 0:
        optimizer.step()
    return {"loss": loss.item(), "grad_norm": norm, "lr": lr}


LOG_FIELDS = ("step", "lr", "loss", "grad_norm")


def train(records: Sequence[SystemRecord], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir=None, resume=None, callback=None) -> tuple[MultiInstanceSeq2Seq, list[dict]]:
    """Train for ``cfg.total_steps`` optimizer steps, cycling over ``records``.

    With ``out_dir`` a CSV log (``train_log.csv``) and checkpoints are written;
    ``resume`` continues the step counter, schedule and optimizer state.
    """
    if not records:
        raise ValueError("empty training corpus")
    torch.manual_seed(cfg.seed)
    vocab = build_vocab()
    step = 0
    if resume is not None:
        model, blob = load_checkpoint(resume, model_cfg)
        optimizer = make_optimizer(model, cfg)
        if blob.get("optimizer"):
            optimizer.load_state_dict(blob["optimizer"])
        step = int(blob.get("step", 0))
    else:
        model = MultiInstanceSeq2Seq(model_cfg)
        optimizer = make_optimizer(model, cfg)
    # data order depends on (seed, epoch) only, so resuming replays the same stream
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fresh = resume is None or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_FIELDS)
    history = []
    per_epoch = math.ceil(len(records) / cfg.batch_size)
    t0 = time.time()
    try:
        while step < cfg.total_steps:
            epoch, offset = divmod(step, per_epoch)
            rng = np.random.default_rng([cfg.seed, epoch])
            batches = list(make_batches(records, cfg.batch_size, rng))
            for recs in batches[offset:]:
                if step >= cfg.total_steps:
                    break
                noise_rng = np.random.default_rng([cfg.seed, step, 1])
                batch = collate(recs, noise_rng, cfg, model_cfg.d_max, vocab)
                rec = train_step(model, optimizer, batch, cfg.lr(step), cfg, vocab.pad)
                rec["step"] = step
                history.append(rec)
                if writer is not None:
                    writer.writerow([step, f"{rec['lr']:.6g}", f"{rec['loss']:.6f}",
                                     f"{rec['grad_norm']:.6f}"])
                if cfg.log_every and step % cfg.log_every == 0:
                    log.info("step %d lr %.3g loss %.4f |g| %.3f (%.0fs)", step, rec["lr"],
                             rec["loss"], rec["grad_norm"], time.time() - t0)
                step += 1
                if callback is not None:
                    callback(step, rec, model)
                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"ckpt_{step:07d}.pt", model, step, optimizer)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pt", model, step, optimizer,
                        extra={"train_config": cfg.to_dict()})
    model.eval()
    return model, history
