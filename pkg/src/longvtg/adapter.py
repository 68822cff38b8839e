"""Residual bottleneck adapter over frame features, trained with in-batch NCE.

``adapt(v) = W2 @ relu(W1 @ v + b1) + b2 + v``. Gradients are written out by
hand for exactly this architecture; tests check them against central finite
differences.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import make_optimizer
from .core import DimensionMismatch, EmptyRange, GroundingError

log = logging.getLogger(__name__)

ADAPTER_MAGIC = b"CFA1"
_ADAPTER_HEADER = struct.Struct("<4sII")


class InsufficientData(GroundingError, ValueError):
    pass


@dataclass
class AdapterParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        dh, d = self.W1.shape
        if dh < 1:
            raise ValueError("bottleneck width must be >= 1")
        if self.b1.shape != (dh,) or self.W2.shape != (d, dh) or self.b2.shape != (d,):
            raise DimensionMismatch("inconsistent adapter parameter shapes")

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, dim: int, bottleneck: int | None = None) -> "AdapterParams":
        dh = bottleneck or max(1, dim // 4)
        return cls(np.zeros((dh, dim)), np.zeros(dh), np.zeros((dim, dh)), np.zeros(dim))

    @classmethod
    def initial(cls, dim: int, bottleneck: int | None = None, seed: int = 0) -> "AdapterParams":
        """Random down-projection, zero up-projection: the identity map at start."""
        p = cls.zeros(dim, bottleneck)
        rng = np.random.default_rng(seed)
        p.W1 = rng.standard_normal(p.W1.shape) / np.sqrt(dim)
        return p

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "AdapterParams":
        return AdapterParams(*(a.copy() for a in self.arrays()))

    def axpy(self, alpha: float, other: "AdapterParams") -> "AdapterParams":
        return AdapterParams(*(a + alpha * b for a, b in zip(self.arrays(), other.arrays())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def apply(self, frames) -> np.ndarray:
        """Adapt a ``(n, d)`` block of frames (or a single ``(d,)`` vector)."""
        x = np.asarray(frames, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"feature dim {x.shape[-1]} != adapter dim {self.dim}")
        hidden = np.maximum(x @ self.W1.T + self.b1, 0.0)
        return hidden @ self.W2.T + self.b2 + x


def adapt(v, p: AdapterParams) -> np.ndarray:
    return p.apply(v)


def adapt_sequence(frames, p: AdapterParams | None) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    return x if p is None else p.apply(x)


def proposal_feature(adapted, start: int, end: int) -> np.ndarray:
    """Mean of the adapted frames in ``[start, end)``."""
    if end <= start:
        raise EmptyRange(f"empty frame range [{start}, {end})")
    if start < 0 or end > len(adapted):
        raise EmptyRange(f"range [{start}, {end}) outside sequence of length {len(adapted)}")
    return np.asarray(adapted[start:end], dtype=np.float64).mean(axis=0)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def nce_loss(proposal_features, queries) -> float:
    """In-batch NCE: row ``i`` of each array is one (positive proposal, query) pair.

    Every positive is contrasted with all batch proposals under its own query;
    the loss is summed over positives.
    """
    H = np.atleast_2d(np.asarray(proposal_features, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if H.shape != Q.shape:
        raise DimensionMismatch(f"proposal block {H.shape} != query block {Q.shape}")
    logp = _log_softmax_rows(Q @ H.T)
    return float(-np.trace(logp))


def nce_grad_features(proposal_features, queries) -> np.ndarray:
    """d(nce_loss)/d(proposal_features)."""
    H = np.atleast_2d(np.asarray(proposal_features, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    P = np.exp(_log_softmax_rows(Q @ H.T))
    P[np.diag_indices_from(P)] -= 1.0
    return P.T @ Q


def pooled_features(frame_blocks, p: AdapterParams | None) -> np.ndarray:
    return np.stack([adapt_sequence(block, p).mean(axis=0) for block in frame_blocks])


def pooled_backward(frame_blocks, grad_pooled, p: AdapterParams) -> AdapterParams:
    """Backpropagate gradients on mean-pooled adapted features into ``p``.

    ``frame_blocks[j]`` holds the raw frames averaged into output ``j`` and
    ``grad_pooled[j]`` is the loss gradient with respect to that output. The
    residual path carries no parameters. ReLU'(0) is taken as 0.
    """
    g = AdapterParams.zeros(p.dim, p.bottleneck)
    for block, gh in zip(frame_blocks, grad_pooled):
        x = np.asarray(block, dtype=np.float64)
        gh = np.asarray(gh, dtype=np.float64)
        if not np.any(gh):
            continue
        pre = x @ p.W1.T + p.b1
        hidden = np.maximum(pre, 0.0)
        g.W2 += np.outer(gh, hidden.mean(axis=0))
        g.b2 += gh
        d_hidden = (p.W2.T @ gh) / len(x)
        d_pre = (pre > 0.0) * d_hidden[None, :]
        g.W1 += d_pre.T @ x
        g.b1 += d_pre.sum(axis=0)
    return g


def adapter_grad(batch, p: AdapterParams) -> AdapterParams:
    """Gradient of the batch NCE loss; ``batch`` is a list of (frames, q_cls)."""
    blocks = [np.atleast_2d(frames) for frames, _ in batch]
    Q = np.stack([np.asarray(q, dtype=np.float64) for _, q in batch])
    H = pooled_features(blocks, p)
    return pooled_backward(blocks, nce_grad_features(H, Q), p)


def batch_nce_loss(batch, p: AdapterParams | None) -> float:
    blocks = [np.atleast_2d(frames) for frames, _ in batch]
    Q = np.stack([np.asarray(q, dtype=np.float64) for _, q in batch])
    return nce_loss(pooled_features(blocks, p), Q)


@dataclass
class AdapterTrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_patience: int = 3
    seed: int = 0
    lambda_adapt: float = 0.2
    bottleneck: int | None = None
    val_fraction: float = 0.2
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a non-degenerate NCE loss")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _batches(items, size):
    return [items[i : i + size] for i in range(0, len(items), size)]


def _mean_loss(items, p, size):
    batches = [b for b in _batches(items, size) if len(b) > 1]
    if not batches:
        return 0.0
    return float(np.mean([batch_nce_loss(b, p) for b in batches]))


def split_holdout(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(n * fraction)) if n >= 4 else 0
    n_val = max(n_val, 2) if n_val else 0
    if n - n_val < 2:
        n_val = 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_adapter(items, cfg: AdapterTrainConfig, init: AdapterParams | None = None):
    """Minimize the batch NCE loss with halve-on-increase and early stopping.

    ``items`` is a sequence of ``(gt_frames, q_cls)`` pairs. An epoch whose
    full training loss is higher than the previous epoch's is rolled back and
    the learning rate halved, so the recorded training loss never increases.
    Returns ``(params, history)`` where params are those with the best
    held-out loss.
    """
    items = list(items)
    if len(items) < 2:
        raise InsufficientData("adapter training needs at least 2 instances")
    dim = np.asarray(items[0][1]).shape[-1]
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else AdapterParams.initial(dim, cfg.bottleneck, cfg.seed)
    train_idx, val_idx = split_holdout(len(items), cfg.val_fraction, rng)
    train = [items[i] for i in train_idx]
    val = [items[i] for i in val_idx] or train

    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    hist = TrainHistory()
    prev = _mean_loss(train, p, cfg.batch_size)
    best_val = _mean_loss(val, p, cfg.batch_size)
    best = p.copy()
    hist.train_loss.append(prev)
    hist.val_loss.append(best_val)
    hist.learning_rate.append(opt.lr)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        candidate, cand_opt = p.copy(), opt.clone()
        order = rng.permutation(len(train))
        for b in _batches([train[i] for i in order], cfg.batch_size):
            if len(b) < 2:
                continue
            candidate = AdapterParams(*cand_opt.step(candidate.arrays(), adapter_grad(b, candidate).arrays()))
        loss = _mean_loss(train, candidate, cfg.batch_size)
        if not np.isfinite(loss) or loss > prev or not candidate.all_finite():
            opt.lr *= 0.5
            hist.train_loss.append(prev)
        else:
            p, prev, opt = candidate, loss, cand_opt
            hist.train_loss.append(loss)
        hist.learning_rate.append(opt.lr)
        v = _mean_loss(val, p, cfg.batch_size)
        hist.val_loss.append(v)
        if v < best_val:
            best_val, best, stale = v, p.copy(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("adapter early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break
    return best, hist


def write_adapter(path, p: AdapterParams) -> None:
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in p.arrays())
    Path(path).write_bytes(_ADAPTER_HEADER.pack(ADAPTER_MAGIC, p.dim, p.bottleneck) + body)


def read_adapter(path) -> AdapterParams:
    from .datastore import BadMagic, TruncatedFile

    data = Path(path).read_bytes()
    if len(data) < _ADAPTER_HEADER.size:
        raise TruncatedFile(f"{path}: shorter than adapter header")
    magic, d, dh = _ADAPTER_HEADER.unpack_from(data)
    if magic != ADAPTER_MAGIC:
        raise BadMagic(f"{path}: bad adapter magic {magic!r}")
    shapes = [(dh, d), (dh,), (d, dh), (d,)]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(data) != _ADAPTER_HEADER.size + 4 * sum(sizes):
        raise TruncatedFile(f"{path}: adapter body has wrong size")
    flat = np.frombuffer(data, dtype="<f4", offset=_ADAPTER_HEADER.size).astype(np.float64)
    parts, pos = [], 0
    for shape, size in zip(shapes, sizes):
        parts.append(flat[pos : pos + size].reshape(shape))
        pos += size
    return AdapterParams(*parts)
