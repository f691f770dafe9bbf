"""Classifier training: cross-entropy objective, momentum SGD, two-phase schedule.

Phase 1 (frozen_trunk) trains only the fresh head and FA tensors at the FA
learning rate while adopted trunk tensors stay bit-identical; phase 2
(full_finetune) unfreezes everything, with the trunk on its own rate while
the FA group continues its decayed schedule. The learning rate of each group
is scaled by lr_decay_factor at every decay epoch. One TSV row per epoch
records epoch, phase, lr_main, lr_fa, train_loss, train_acc, val_acc.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .codec import LatentSample
from .config import get_bool, get_float, get_int, get_int_list
from .net import Net, forward_classify, nearest_resize, save_net
from .params import ParamStore
from .tensor import Tensor

log = logging.getLogger("latentclass")

METRIC_COLUMNS = ("epoch", "phase", "lr_main", "lr_fa", "train_loss", "train_acc", "val_acc")


@dataclass
class TrainConfig:
    phase1_epochs: int = 20
    total_epochs: int = 70
    lr_main: float = 0.01
    lr_fa_initial: float = 0.01
    lr_decay_epochs: Tuple[int, ...] = (40, 60)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 32
    lambda_reg: float = 0.0
    augment: bool = True
    two_phase: bool = True
    seed: int = 0

    def __post_init__(self):
        # phase1_epochs >= total_epochs keeps the trunk frozen for the whole run
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError(f"lr_decay_factor must be in (0,1), got {self.lr_decay_factor}")
        if self.lr_main <= 0 or self.lr_fa_initial <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def train_config_from_flat(cfg: Dict[str, str], seed: int = 0) -> TrainConfig:
    d = TrainConfig()
    return TrainConfig(
        phase1_epochs=get_int(cfg, "train.phase1_epochs", d.phase1_epochs, lo=0),
        total_epochs=get_int(cfg, "train.total_epochs", d.total_epochs, lo=1),
        lr_main=get_float(cfg, "train.lr_main", d.lr_main),
        lr_fa_initial=get_float(cfg, "train.lr_fa", d.lr_fa_initial),
        lr_decay_epochs=tuple(get_int_list(cfg, "train.lr_decay_epochs",
                                           list(d.lr_decay_epochs), sep=",")),
        lr_decay_factor=get_float(cfg, "train.lr_decay_factor", d.lr_decay_factor),
        momentum=get_float(cfg, "train.momentum", d.momentum),
        weight_decay=get_float(cfg, "train.weight_decay", d.weight_decay),
        batch_size=get_int(cfg, "train.batch_size", d.batch_size, lo=1),
        lambda_reg=get_float(cfg, "train.lambda_reg", d.lambda_reg),
        augment=get_bool(cfg, "train.augment", d.augment),
        two_phase=get_bool(cfg, "train.two_phase", d.two_phase),
        seed=seed,
    )


# -- loss ------------------------------------------------------------------------


def classification_loss(logits: Tensor, targets: Sequence[int],
                        reg_weights: Sequence[Tensor] = (),
                        lam: float = 0.0) -> Tensor:
    """Mean cross-entropy plus lam * (1/2) sum of squared regularized weights."""
    k = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    b = 1 if logits.ndim == 1 else logits.shape[0]
    if t.size != b:
        raise ValueError(f"{b} logit rows but {t.size} targets")
    if np.any(t < 0) or np.any(t >= k):
        bad = t[(t < 0) | (t >= k)][0]
        raise ValueError(f"target {bad} out of range for {k} classes")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), t] = 1.0
    rows = logits if logits.ndim == 2 else T.reshape(logits, (1, k))
    # constant shift keeps exp in range; it cancels in (lse - picked)
    shift = Tensor(rows.data.max(axis=-1, keepdims=True).copy())
    z = T.add(rows, T.mul(shift, -1.0))
    lse = T.log(T.tsum(T.exp(z), axis=-1))
    picked = T.tsum(T.mul(z, Tensor(onehot, dtype=logits.dtype)), axis=-1)
    loss = T.tmean(T.add(lse, T.mul(picked, -1.0)))
    if lam != 0.0 and reg_weights:
        sq = [T.tsum(T.mul(w, w)) for w in reg_weights]
        total = sq[0]
        for s in sq[1:]:
            total = T.add(total, s)
        loss = T.add(loss, T.mul(total, 0.5 * lam))
    return loss


def regularized_weights(store: ParamStore) -> List[Tensor]:
    """Trainable conv/linear weights; biases and norm scales/shifts excluded."""
    return [t for n, t in store.trainable_items() if n.endswith(".weight")]


# -- optimizer ----------------------------------------------------------------------


class SgdState:
    """Per-parameter momentum buffers, created lazily on first gradient."""

    def __init__(self):
        self.velocity: Dict[str, np.ndarray] = {}


def sgd_step(named_params: Sequence[Tuple[str, Tensor]], state: SgdState,
             lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v."""
    for name, t in named_params:
        g = t.grad
        if g is None:
            continue
        update = g if weight_decay == 0.0 else g + weight_decay * t.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            state.velocity[name] = v
        v *= momentum
        v += update
        t.data -= lr * v


# -- data plumbing ----------------------------------------------------------------------


def split_samples(samples: Sequence, val_fraction: float = 0.2) -> Tuple[list, list]:
    """Per-class deterministic split: last val_fraction of each class to validation.

    Works for LatentSample lists and (array, label) tuples alike.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    label_of = lambda s: s.label if isinstance(s, LatentSample) else s[1]
    by_class: Dict[int, list] = {}
    for s in samples:
        by_class.setdefault(label_of(s), []).append(s)
    train, val = [], []
    for lab in sorted(by_class):
        items = by_class[lab]
        n_val = max(1, int(round(val_fraction * len(items))))
        train.extend(items[: len(items) - n_val])
        val.extend(items[len(items) - n_val :])
    return train, val


def _augment_pair(y: np.ndarray, sigma: Optional[np.ndarray],
                  rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Joint random crop (>=75% area) + nearest resize back + horizontal flip.

    Crop geometry is shared between the latent and its scale map so the pair
    stays spatially aligned.
    """
    h, w = y.shape[-2], y.shape[-1]
    min_area = 0.75 * h * w
    options = [(ch, cw) for ch in range(1, h + 1) for cw in range(1, w + 1)
               if ch * cw >= min_area]
    ch, cw = options[rng.integers(len(options))]
    r0 = int(rng.integers(h - ch + 1))
    c0 = int(rng.integers(w - cw + 1))
    flip = bool(rng.integers(2))

    def apply(a: np.ndarray) -> np.ndarray:
        out = a[..., r0 : r0 + ch, c0 : c0 + cw]
        if (ch, cw) != (h, w):
            out = nearest_resize(out, h, w)
        if flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    return apply(y), None if sigma is None else apply(sigma)


def _batch_arrays(net: Net, samples: Sequence, idx: np.ndarray,
                  augment_rng: Optional[np.random.Generator]):
    """Stack a batch; latent variants get (y, sigma, labels), pixel (x, None, labels)."""
    if net.cfg.is_latent_input:
        ys, sigmas, labels = [], [], []
        want_sigma = net.cfg.head == "y_and_sigma"
        for i in idx:
            smp: LatentSample = samples[i]
            y, sg = smp.y_hat, smp.sigma_hat
            if net.cfg.latent_resize:
                r = net.cfg.latent_resize
                y, sg = nearest_resize(y, r, r), nearest_resize(sg, r, r)
            if augment_rng is not None:
                y, sg = _augment_pair(y, sg, augment_rng)
            ys.append(y)
            sigmas.append(sg)
            labels.append(smp.label)
        y_arr = np.stack(ys).astype(T.DTYPE)
        s_arr = np.stack(sigmas).astype(T.DTYPE) if want_sigma else None
        return y_arr, s_arr, np.asarray(labels)
    xs, labels = [], []
    for i in idx:
        img, label = samples[i]
        if augment_rng is not None:
            img, _ = _augment_pair(img, None, augment_rng)
        xs.append(img)
        labels.append(label)
    return np.stack(xs).astype(T.DTYPE), None, np.asarray(labels)


# -- evaluation ------------------------------------------------------------------------


def evaluate(net: Net, samples: Sequence, batch_size: int = 32) -> Tuple[float, np.ndarray, float]:
    """Top-1 accuracy (argmax, lowest index wins ties), per-class accuracy, mean loss."""
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    k = net.cfg.num_classes
    hits = np.zeros(k, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    losses = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(samples)))
            y, sg, labels = _batch_arrays(net, samples, idx, None)
            logits = forward_classify(net, y, sg, mode="eval")
            losses.append(float(classification_loss(logits, labels).data) * len(idx))
            pred = np.argmax(logits.data, axis=-1)
            for p, t in zip(pred, labels):
                counts[t] += 1
                if p == t:
                    hits[t] += 1
    top1 = float(hits.sum()) / float(counts.sum())
    per_class = np.divide(hits, np.maximum(counts, 1), dtype=np.float64)
    return top1, per_class, float(np.sum(losses)) / float(counts.sum())


# -- fit ----------------------------------------------------------------------------------


def _group_lr(base: float, epoch: int, cfg: TrainConfig) -> float:
    lr = base
    for e in cfg.lr_decay_epochs:
        if epoch >= e:
            lr *= cfg.lr_decay_factor
    return lr


def fit(net: Net, train_samples: Sequence, val_samples: Sequence, cfg: TrainConfig,
        out_dir: str, config_digest: str = "") -> Tuple[str, List[tuple]]:
    """Train per the two-phase schedule; returns (best checkpoint path, metric rows)."""
    if not train_samples:
        raise ValueError("cannot fit on an empty training set")
    os.makedirs(out_dir, exist_ok=True)
    from . import io as lio  # local import keeps module load light

    fresh = set(net.fresh_names())
    state = SgdState()
    rows: List[tuple] = []
    best_path = os.path.join(out_dir, "best.lckp")
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    best_val = -1.0
    n = len(train_samples)

    for epoch in range(cfg.total_epochs):
        two_phase_now = cfg.two_phase and epoch < cfg.phase1_epochs
        phase = "frozen_trunk" if two_phase_now else "full_finetune"
        if net.phase != phase:
            net.set_phase(phase)
            if epoch > 0:
                log.info("epoch %d: phase transition to %s", epoch, phase)
        lr_main = _group_lr(cfg.lr_main, epoch, cfg)
        lr_fa = _group_lr(cfg.lr_fa_initial, epoch, cfg)

        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_loss, epoch_hits, epoch_count = 0.0, 0, 0
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart : bstart + cfg.batch_size]
            aug_rng = (np.random.default_rng([cfg.seed, epoch, bstart + 1])
                       if cfg.augment else None)
            y, sg, labels = _batch_arrays(net, train_samples, idx, aug_rng)
            logits = forward_classify(net, y, sg, mode="train")
            loss = classification_loss(logits, labels,
                                       regularized_weights(net.store), cfg.lambda_reg)
            net.store.zero_grads()
            T.backward(loss)
            groups = [(name, t) for name, t in net.store.trainable_items()]
            fa_group = [(nm, t) for nm, t in groups if nm in fresh]
            main_group = [(nm, t) for nm, t in groups if nm not in fresh]
            sgd_step(fa_group, state, lr_fa, cfg.momentum, cfg.weight_decay)
            sgd_step(main_group, state, lr_main, cfg.momentum, cfg.weight_decay)
            epoch_loss += float(loss.data) * len(idx)
            epoch_hits += int((np.argmax(logits.data, axis=-1) == labels).sum())
            epoch_count += len(idx)

        val_acc, _, _ = evaluate(net, val_samples, cfg.batch_size) if val_samples else (0.0, None, 0.0)
        rows.append((epoch, phase, lr_main, lr_fa,
                     epoch_loss / epoch_count, epoch_hits / epoch_count, val_acc))
        lio.write_tsv(metrics_path, METRIC_COLUMNS, rows)
        if val_acc > best_val:
            best_val = val_acc
            save_net(best_path, net, config_digest, epoch)
        log.info("epoch %d [%s] loss %.4f train_acc %.3f val_acc %.3f",
                 epoch, phase, rows[-1][4], rows[-1][5], val_acc)

    save_net(os.path.join(out_dir, "final.lckp"), net, config_digest, cfg.total_epochs - 1)
    if best_val < 0:
        save_net(best_path, net, config_digest, cfg.total_epochs - 1)
    return best_path, rows
