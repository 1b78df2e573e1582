"""Cross-entropy, the pairwise smoothness penalty, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12
DENOM_FLOOR = 1e-8


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_ovm: float = 1.0
    n_sample_pairs: int = 1000

    def __post_init__(self):
        if self.lambda_ovm < 0:
            raise ValueError("lambda_ovm must be >= 0")
        if self.n_sample_pairs < 1:
            raise ValueError("n_sample_pairs must be >= 1")


def _indices(mask) -> np.ndarray:
    mask = np.asarray(mask)
    return np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)


def cross_entropy(y_pred: Tensor, labels: np.ndarray, mask) -> Tensor:
    idx = _indices(mask)
    if idx.size == 0:
        raise ContractError("cross_entropy: empty mask")
    picked = ad.pick(y_pred, idx, labels[idx])
    return ad.scale(ad.sum_all(ad.log(picked, floor=LOG_FLOOR)), -1.0 / idx.size)


def sample_pairs(mask, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """``n_pairs`` ordered pairs (i != j) drawn uniformly with replacement from ``mask``."""
    idx = _indices(mask)
    m = idx.size
    if m < 2:
        raise ContractError(f"sample_pairs: need at least 2 nodes, got {m}")
    first = rng.integers(0, m, size=n_pairs)
    # second index uniform over the other m-1 positions
    second = rng.integers(0, m - 1, size=n_pairs)
    second = second + (second >= first)
    return np.stack([idx[first], idx[second]], axis=1)


def l_ovm(x_tilde: Tensor, labels: np.ndarray, pairs: np.ndarray) -> Tensor:
    """|pairs| divided by the summed cosine distance of the different-label pairs; 0 if that sum vanishes."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    neg = pairs[labels[pairs[:, 0]] != labels[pairs[:, 1]]]
    if neg.size == 0:
        return Tensor(0.0)
    cos = ad.cosine_rows(ad.gather_rows(x_tilde, neg[:, 0]), ad.gather_rows(x_tilde, neg[:, 1]))
    denom = ad.sub(Tensor(float(len(neg))), ad.sum_all(cos))
    if denom.item() < DENOM_FLOOR:
        return Tensor(0.0)
    return ad.scale(ad.reciprocal(denom), float(len(pairs)))


def total_loss(y_pred: Tensor, x_tilde: Tensor, labels: np.ndarray, mask, cfg: LossConfig, pairs=None, rng=None) -> Tensor:
    ce = cross_entropy(y_pred, labels, mask)
    if cfg.lambda_ovm == 0.0:
        return ce
    if pairs is None:
        if rng is None:
            raise ContractError("total_loss: pass either pairs or an rng to sample them")
        pairs = sample_pairs(mask, cfg.n_sample_pairs, rng)
    return ad.add(ad.scale(l_ovm(x_tilde, labels, pairs), cfg.lambda_ovm), ce)
