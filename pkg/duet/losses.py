"""
Identity classification and metric-learning losses.

The training objective is softmax cross-entropy on the classifier logits
plus a batch-hard triplet loss on the embeddings, weighted 1:1.
"""

import numpy as np
from dataclasses import dataclass
from typing import Tuple
from duet import ops
from duet.tensor import Array_T, Tensor


class LossError(Exception):
    pass


@dataclass(frozen=True)
class EmbeddingBatch:
    """B embeddings of D channels with one identity label each."""
    embeddings: Tensor
    labels: Array_T

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, 'labels', labels)
        if self.embeddings.ndim != 2:
            raise LossError(f'Embeddings must be [B, D], got {self.embeddings.shape}')
        if labels.shape != (self.embeddings.shape[0],):
            raise LossError(f'{labels.shape[0]} labels for {self.embeddings.shape[0]} embeddings')

    def pk(self) -> Tuple[int, int]:
        """(P, K): P identities with exactly K instances each.

        Raises:
            LossError: uneven class sizes, a class with a single instance,
                or a single class
        """
        ids, counts = np.unique(self.labels, return_counts=True)
        if len(set(counts.tolist())) != 1:
            raise LossError(f'PK batch needs equal instances per identity, '
                            f'got counts {sorted(set(counts.tolist()))}')
        self._check_triplet_ready(ids, counts)
        return len(ids), int(counts[0])

    def _check_triplet_ready(self, ids: Array_T, counts: Array_T) -> None:
        if (counts < 2).any():
            lonely = ids[counts < 2].tolist()
            raise LossError(f'Identities {lonely} have a single instance, no positive exists')
        if len(ids) < 2:
            raise LossError('Triplet mining needs at least two identities in the batch')

    def check_triplet_ready(self) -> None:
        ids, counts = np.unique(self.labels, return_counts=True)
        self._check_triplet_ready(ids, counts)


@dataclass(frozen=True)
class LossReport:
    softmax_loss: float
    triplet_loss: float
    combined: float
    active_triplet_fraction: float


def softmax_ce(logits: Tensor, labels: Array_T) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise LossError(f'Logits must be [B, num_ids], got {logits.shape}')
    bad = (labels < 0) | (labels >= logits.shape[1])
    if bad.any():
        raise LossError(f'Label {int(labels[bad][0])} outside [0, {logits.shape[1]})')
    return ops.softmax_cross_entropy(logits, labels)


def _hardest(batch: EmbeddingBatch,
             margin: float,
             normalize: bool) -> Tuple[Tensor, float]:
    batch.check_triplet_ready()
    embeddings = ops.l2_normalize(batch.embeddings) if normalize else batch.embeddings
    distance = ops.pairwise_distance(embeddings)
    same = batch.labels[:, None] == batch.labels[None, :]
    positives = same & ~np.eye(len(batch.labels), dtype=bool)
    hardest_positive = ops.masked_max(distance, positives)
    hardest_negative = ops.masked_min(distance, ~same)
    per_anchor = ops.relu(ops.shift(ops.sub(hardest_positive, hardest_negative), margin))
    active = float((per_anchor.data > 0).mean())
    return ops.mean_all(per_anchor), active


def batch_hard_triplet(batch: EmbeddingBatch,
                       margin: float = 0.3,
                       normalize: bool = False) -> Tensor:
    """Mean over anchors of max(0, margin + d(a, hardest p) - d(a, hardest n)).

    Positives exclude the anchor itself; d is Euclidean with 1e-12 inside
    the square root.
    """
    loss, _ = _hardest(batch, margin, normalize)
    return loss


def combined_loss(logits: Tensor,
                  batch: EmbeddingBatch,
                  margin: float = 0.3,
                  use_triplet: bool = True,
                  normalize: bool = False) -> Tuple[Tensor, LossReport]:
    """Softmax plus triplet loss at equal weight.

    Returns:
        The differentiable total and a report of its components.
    """
    softmax = softmax_ce(logits, batch.labels)
    if not use_triplet:
        value = softmax.item()
        return softmax, LossReport(value, 0.0, value, 0.0)
    batch.pk()
    triplet, active = _hardest(batch, margin, normalize)
    total = ops.add(softmax, triplet)
    return total, LossReport(softmax.item(), triplet.item(), total.item(), active)
