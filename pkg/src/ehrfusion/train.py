"""Optimization protocol: AdamW, warmup + plateau schedule, early stopping.

One fold trains with shuffled mini-batches, BCE on the sigmoid output,
decoupled weight decay, linear warmup over the first five epochs, halving on
a seven-epoch validation plateau, termination after twenty-one epochs
without improvement, and retention of the minimum-validation-loss
checkpoint. Checkpoints serialize to a deterministic binary container that
round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codes import EmbeddingTable, build_embedding_matrix, random_table
from .cohort import FoldData
from .config import ExperimentConfig
from .model import Batch, PreparedPatient, collate, forward_batch, init_params, track_params

IMPROVEMENT_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class AdamW:
    """Decoupled weight decay: the decay shrink applies before the moment
    update is added, both scaled by the scheduled learning rate."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr_mult: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_mult
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient for {k!r}")
            p -= lr * self.wd * p
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class LrSchedule:
    """Warmup multiplier epoch/warmup for the first epochs, then
    0.5**halvings; a halving fires after ``patience`` consecutive
    non-improving validation epochs and resets its own counter."""

    def __init__(self, warmup_epochs: int, patience: int, factor: float = 0.5):
        self.warmup = warmup_epochs
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.stale = 0
        self.halvings = 0

    def multiplier(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError("epochs are 1-indexed")
        if epoch <= self.warmup:
            return epoch / self.warmup
        return self.factor ** self.halvings

    def observe(self, val_loss: float) -> bool:
        """Record an epoch's validation loss; True if a halving fired."""
        if val_loss < self.best - IMPROVEMENT_EPS:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.halvings += 1
            self.stale = 0
            return True
        return False


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_loss: float
    config_hash: str
    seed: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)   # one dict per epoch
    stopped_early: bool = False


def fold_seed(base_seed: int, fold: int) -> int:
    return base_seed + 1000 * (fold + 1)


def build_fold_embedding(cfg: ExperimentConfig, vocab: list[str], fold: int,
                         table: EmbeddingTable | None) -> np.ndarray | None:
    if cfg.modality == "labs-only":
        return None
    seed = fold_seed(cfg.seed, fold)
    if cfg.embedding_source == "random":
        table = random_table(vocab, cfg.embed_dim, seed)
    elif table is None:
        raise ValueError("embedding_source='file' requires a loaded embedding table")
    return build_embedding_matrix(table, vocab, seed)


def _eval_loss(params: dict[str, np.ndarray], patients: list[PreparedPatient],
               cfg: ExperimentConfig) -> float:
    """Mean BCE over a patient set, dropout off, batched."""
    total, n = 0.0, 0
    for lo in range(0, len(patients), cfg.batch_size):
        chunk = patients[lo:lo + cfg.batch_size]
        pt = track_params(None, params)
        logits, _ = forward_batch(pt, collate(chunk, cfg), cfg, train=False)
        labels = np.array([p.label for p in chunk], dtype=float)
        loss = ad.bce_with_logits(logits, labels, pos_weight=cfg.pos_weight)
        total += loss.item() * len(chunk)
        n += len(chunk)
    return total / n


def train_fold(cfg: ExperimentConfig, data: FoldData,
               embedding_table: EmbeddingTable | None = None,
               log_path=None) -> TrainResult:
    """Full protocol on one fold; returns the best checkpoint and epoch log."""
    seed = fold_seed(cfg.seed, data.fold)
    emb = build_fold_embedding(cfg, data.vocab, data.fold, embedding_table)
    params = init_params(cfg, data.vocab, emb, seed)
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    sched = LrSchedule(cfg.warmup_epochs, cfg.plateau_patience, cfg.plateau_factor)
    shuffle_rng = np.random.default_rng(seed + 1)
    drop_rng = np.random.default_rng(seed + 2)

    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    stale = 0
    log: list[dict] = []
    stopped_early = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t_start = time.perf_counter()
            mult = sched.multiplier(epoch)
            order = shuffle_rng.permutation(len(data.train))
            train_loss, seen = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [data.train[i] for i in order[lo:lo + cfg.batch_size]]
                tape = ad.Tape()
                pt = track_params(tape, params)
                logits, _ = forward_batch(pt, collate(chunk, cfg), cfg,
                                          train=True, drop_rng=drop_rng)
                labels = np.array([p.label for p in chunk], dtype=float)
                loss = ad.bce_with_logits(logits, labels, pos_weight=cfg.pos_weight)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                grads = ad.grad(tape, loss, pt)
                opt.step(grads, lr_mult=mult)
                train_loss += loss.item() * len(chunk)
                seen += len(chunk)
            val_loss = _eval_loss(params, data.val, cfg)
            entry = {
                "epoch": epoch,
                "train_loss": train_loss / seen,
                "val_loss": val_loss,
                "lr": cfg.lr * mult,
                "seconds": time.perf_counter() - t_start,
            }
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()

            if val_loss < best_loss - IMPROVEMENT_EPS:
                best_loss = val_loss
                best_epoch = epoch
                best_params = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
            sched.observe(val_loss)
            if stale >= cfg.early_stop_patience:
                stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint(params=best_params, epoch=best_epoch, val_loss=float(best_loss),
                      config_hash=cfg.config_hash(), seed=seed)
    return TrainResult(checkpoint=ckpt, log=log, stopped_early=stopped_early)


# ---------------------------------------------------------------------------
# checkpoint serialization: deterministic binary container

_MAGIC = b"EHRCKPT1\n"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    payload = b"".join(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes()
                       for n in names)
    manifest = []
    offset = 0
    for n in names:
        arr = ckpt.params[n]
        manifest.append({"name": n, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = {
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "params": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "seed": ckpt.seed,
        "val_loss": ckpt.val_loss,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"unsupported checkpoint version tag {magic!r}")
        meta = json.loads(fh.readline())
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    params = {}
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        params[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(params=params, epoch=meta["epoch"], val_loss=meta["val_loss"],
                      config_hash=meta["config_hash"], seed=meta["seed"])
