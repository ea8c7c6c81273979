"""Single-level prototypical contrastive loss.

``l_ins`` pulls same-cluster instances in a batch together, ``l_proto`` pulls
each instance towards its own cluster prototype with a per-cluster density as
temperature. Both are sums over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nnkit as nk
from .datamap import PrototypeSet
from .errors import ContractError


@dataclass(frozen=True)
class ContrastiveConfig:
    lam: float = 0.01
    tau: float = 0.1
    alpha: float = 10.0
    phi_floor: float = 1e-3
    density_scale: float = 1.0
    exclude_self_in_denominator: bool = False
    reduction: str = "mean"


@dataclass
class ContrastiveBatch:
    embeddings: nk.Value  # (r, D), unit rows
    labels: Sequence[str]
    prototypes: PrototypeSet
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.embeddings.data.ndim != 2 or len(self.labels) != self.embeddings.shape[0]:
            raise ContractError("need one label per embedding row")
        norms = np.linalg.norm(self.embeddings.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("contrastive embeddings must be unit-normalised")


def l_ins(batch: ContrastiveBatch, exclude_self: bool = False) -> nk.Value:
    """Instance-wise term. Positives exclude the anchor itself; the softmax
    denominator runs over the whole batch unless ``exclude_self``."""
    r = batch.embeddings.shape[0]
    if r < 2:
        raise ContractError(f"instance-wise loss needs at least 2 samples, got {r}")
    v = batch.embeddings
    labels = np.asarray(batch.labels, dtype=object)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(r, dtype=bool)
    pos = same & off_diag
    n_pos = pos.sum(axis=1)
    weights = np.where(n_pos[:, None] > 0, pos / np.maximum(n_pos, 1)[:, None], 0.0)

    logits = (v @ v.T) / batch.tau
    mask = off_diag if exclude_self else None
    log_prob = logits - nk.logsumexp(logits, axis=1, keepdims=True, mask=mask)
    return -(log_prob * nk.constant(weights)).sum()


def l_proto(batch: ContrastiveBatch) -> nk.Value:
    """Instance-prototype term over the present clusters; prototypes are constants."""
    protos = batch.prototypes
    own = np.array([protos.index(c) for c in batch.labels])
    onehot = np.zeros((len(own), len(protos.clusters)))
    onehot[np.arange(len(own)), own] = 1.0
    logits = (batch.embeddings @ nk.constant(protos.vectors.T)) / nk.constant(protos.density[None, :])
    log_prob = logits - nk.logsumexp(logits, axis=1, keepdims=True)
    return -(log_prob * nk.constant(onehot)).sum()


def combined_loss(l_reg: nk.Value, batch: ContrastiveBatch, lam: float, exclude_self: bool = False, reduction: str = "sum"):
    """``l_reg + lam * (l_ins + l_proto)`` and the component values for logging.

    With ``reduction='mean'`` the contrastive sum is divided by the batch size
    so it is on the same per-sample footing as a batch-mean ``l_reg``. A
    single-sample batch has no instance pairs and contributes ``l_ins = 0``.
    """
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if reduction not in ("sum", "mean"):
        raise ContractError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    r = batch.embeddings.shape[0]
    ins = l_ins(batch, exclude_self) if r >= 2 else nk.constant(0.0)
    proto = l_proto(batch)
    contrastive = ins + proto
    if reduction == "mean":
        contrastive = contrastive / float(r)
    total = l_reg + contrastive * lam
    parts = {"L_reg": float(l_reg.data), "L_ins": float(ins.data), "L_proto": float(proto.data), "total": float(total.data)}
    return total, parts
