"""Loss, Adam optimizer, cosine schedule, dataset splitting, and the loop."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .seeding import make_rng


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 0.0
    split: tuple = (0.8, 0.1, 0.1)
    dropout_p: float = 0.6
    master_seed: int = 0
    monte_carlo_runs: int = 10

    def __post_init__(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter set."""

    m: dict
    v: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3


def init_adam(params: dict, lr: float = 1e-3) -> AdamState:
    m = {name: np.zeros_like(p.data) for name, p in params.items()}
    v = {name: np.zeros_like(p.data) for name, p in params.items()}
    return AdamState(m=m, v=v, lr=lr)


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update over every parameter with a gradient."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at epoch 0 down to lr_min at the end."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def cross_entropy(probs: T.Tensor, labels: np.ndarray, eps: float = 1e-12) -> T.Tensor:
    """Mean negative log-probability of the true class."""
    b, k = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros((b, k), dtype=probs.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = T.tsum(T.mul(T.log(T.add(probs, T.Tensor(np.asarray(eps, probs.data.dtype)))),
                          T.Tensor(onehot)))
    return T.scale(picked, -1.0 / b)


def split_dataset(manifest, split: tuple, seed: int):
    """Stratified (train, val, test) index split, stratified by (class, JNR).

    Each stratum is shuffled with its own derived stream and sliced by the
    ratios; strata smaller than 10 fall back to the same proportional
    slicing with a warning.  The three arrays are disjoint and exhaustive.
    """
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    records = manifest.records if hasattr(manifest, "records") else manifest
    strata = {}
    for i, rec in enumerate(records):
        key = (rec.class_label, rec.jnr_db)
        strata.setdefault(key, []).append(i)
    rng = make_rng(seed, "split")
    train, val, test = [], [], []
    for key in sorted(strata):
        idx = np.array(strata[key])
        if len(idx) < 10:
            warnings.warn(
                f"stratum {key} has only {len(idx)} samples; split is proportional "
                "but may miss some subsets"
            )
        perm = rng.permutation(len(idx))
        idx = idx[perm]
        n_train = int(math.floor(split[0] * len(idx)))
        n_val = int(math.floor(split[1] * len(idx)))
        train.extend(idx[:n_train])
        val.extend(idx[n_train : n_train + n_val])
        test.extend(idx[n_train + n_val :])
    return (np.array(sorted(train), dtype=np.int64),
            np.array(sorted(val), dtype=np.int64),
            np.array(sorted(test), dtype=np.int64))


@dataclass
class FeatureDataset:
    """In-memory feature arrays: dual images plus labels and JNR tags."""

    tfi: np.ndarray  # [N, 1, S, S]
    psd: np.ndarray  # [N, 1, S, S]
    labels: np.ndarray  # [N] int64
    jnr_db: np.ndarray  # [N] float64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureDataset":
        return FeatureDataset(self.tfi[idx], self.psd[idx], self.labels[idx],
                              self.jnr_db[idx])


@dataclass
class Batch:
    tfi: T.Tensor
    psd: T.Tensor
    labels: np.ndarray


def iter_batches(dataset: FeatureDataset, order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(T.Tensor(dataset.tfi[idx]), T.Tensor(dataset.psd[idx]),
                    dataset.labels[idx])


def train_epoch(model, dataset: FeatureDataset, state: AdamState, batch_size: int,
                rng: np.random.Generator) -> dict:
    """One pass of shuffled mini-batches: forward, CE, backward, Adam."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = model.named_parameters()
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    for batch in iter_batches(dataset, order, batch_size):
        probs = model.forward(batch.tfi, batch.psd, training=True, rng=rng)
        loss = cross_entropy(probs, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite training loss: {value}")
        for p in params.values():
            p.grad = None
        loss.backward()
        adam_step(params, state)
        total_loss += value * len(batch.labels)
    return {"train_loss": total_loss / len(dataset), "lr": state.lr,
            "steps": state.step_count}


def evaluate(model, dataset: FeatureDataset, batch_size: int = 64):
    """Eval-mode loss, accuracy, and per-sample predictions; mutates nothing."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    order = np.arange(len(dataset))
    total_loss = 0.0
    preds = np.empty(len(dataset), dtype=np.int64)
    start = 0
    with T.no_grad():
        for batch in iter_batches(dataset, order, batch_size):
            probs = model.forward(batch.tfi, batch.psd, training=False)
            loss = cross_entropy(probs, batch.labels)
            total_loss += loss.item() * len(batch.labels)
            preds[start : start + len(batch.labels)] = probs.data.argmax(axis=1)
            start += len(batch.labels)
    accuracy = float(np.mean(preds == dataset.labels))
    return total_loss / len(dataset), accuracy, preds


def fit(model, train_set: FeatureDataset, val_set: FeatureDataset, cfg: TrainConfig,
        run_index: int = 0, log_fn=None, stop_at_val_accuracy: float = None) -> list:
    """Full training loop; one log record per epoch.

    Per-run randomness (batch order, dropout) derives from
    (master_seed, run_index) so independent runs vary while any single run
    is exactly reproducible.
    """
    params = model.named_parameters()
    state = init_adam(params, lr=cfg.lr_max)
    history = []
    for epoch in range(cfg.epochs):
        state.lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        rng = make_rng(cfg.master_seed, "epoch", run_index, epoch)
        stats = train_epoch(model, train_set, state, cfg.batch_size, rng)
        val_loss, val_acc, _ = evaluate(model, val_set, cfg.batch_size)
        record = {"epoch": epoch, "lr": state.lr, "train_loss": stats["train_loss"],
                  "val_loss": val_loss, "val_accuracy": val_acc}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if stop_at_val_accuracy is not None and val_acc >= stop_at_val_accuracy:
            break
    return history
