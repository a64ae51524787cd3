"""Instance-level weakly supervised contrastive learning.

Contrastive partners for an anchor are drawn from the current batch's query
embeddings, the batch's momentum-branch key embeddings, and a FIFO queue of
past keys.  Every member carries a class label: instances from negative bags
are always labeled 0 (their class is certain), everything else carries the
classifier's predicted class.  Members whose label matches the anchor's form
its *family*; the rest form the *non-family*.

The anchor loss is::

    loss(q) = -(1/|F|) sum_{e+ in F} log( exp(q.e+ / tau)
                                          / sum_{e- in F'} exp(q.e- / tau) )

The denominator runs over the non-family only, so the loss can be negative
when the anchor already sits closer to its family than to every non-family
member.  ``include_family_in_denominator`` adds the paired family term to
each denominator, recovering the conventional non-negative InfoNCE form.
Log-sum-exp terms are max-shifted for stability, and gradients flow only
through the anchor; all pool members are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError, ValidationError

DEFAULT_QUEUE_CAPACITY = 8192
UNIT_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class QueueEntry:
    embedding: np.ndarray  # unit norm, shape (dim,)
    label: int
    is_true_negative: bool


class EmbeddingQueue:
    """Fixed-capacity FIFO of labeled key embeddings (oldest evicted first).

    Backed by a preallocated ring buffer so per-step reads are cheap; the
    loss is permutation-invariant over pool members, so the hot path reads
    the buffer in storage order via :meth:`raw_views` while :meth:`entries`
    and :meth:`snapshot` reconstruct insertion order.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY, dim: int = 128):
        if capacity < 1:
            raise ConfigurationError(f"queue capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ConfigurationError(f"embedding dim must be >= 1, got {dim}")
        self.capacity = capacity
        self.dim = dim
        self._emb = np.zeros((capacity, dim))
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._flags = np.zeros(capacity, dtype=bool)
        self._head = 0  # index of the oldest entry
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def enqueue(self, key_embedding: np.ndarray, predicted_label: int,
                from_negative_bag: bool) -> None:
        """Append one key.  Instances from negative bags are stored with the
        definite label 0 regardless of the classifier's prediction."""
        emb = np.asarray(key_embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise DimensionError(
                f"key embedding shape {emb.shape} != ({self.dim},)")
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValidationError(
                f"key embedding must be unit norm (got ||k|| = {norm:.8f})")
        if from_negative_bag:
            label, flag = 0, True
        else:
            label, flag = int(predicted_label), False
        if self._size < self.capacity:
            slot = (self._head + self._size) % self.capacity
            self._size += 1
        else:  # full: overwrite the oldest entry and advance the head
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        self._emb[slot] = emb
        self._labels[slot] = label
        self._flags[slot] = flag

    def _fifo_indices(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % self.capacity

    def entries(self) -> tuple[QueueEntry, ...]:
        idx = self._fifo_indices()
        return tuple(
            QueueEntry(embedding=self._emb[i].copy(), label=int(self._labels[i]),
                       is_true_negative=bool(self._flags[i]))
            for i in idx)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Insertion-ordered copies: (embeddings (m, dim), labels, flags)."""
        idx = self._fifo_indices()
        return self._emb[idx], self._labels[idx], self._flags[idx]

    def raw_views(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Zero-copy storage-order views of the live entries.  Valid until the
        next enqueue; order is deterministic but not insertion order."""
        if self._size < self.capacity:
            sl = slice(0, self._size)
            return self._emb[sl], self._labels[sl], self._flags[sl]
        return self._emb, self._labels, self._flags


@dataclass
class ContrastivePool:
    """Labeled candidate partners for one anchor (the anchor itself excluded)."""

    embeddings: np.ndarray  # (m, dim)
    labels: np.ndarray  # (m,)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def build_pool(anchor_id: int, batch_q: np.ndarray, batch_k: np.ndarray,
               labels: np.ndarray, queue: EmbeddingQueue) -> ContrastivePool:
    """Union of batch query embeddings, batch key embeddings, and the queue,
    minus the anchor's own query embedding.  The anchor's own key embedding
    stays in the pool (it always lands in the family).

    ``labels`` holds the effective class per batch instance (true-negative
    override already applied); the same label covers an instance's query and
    key embeddings.
    """
    batch_q = np.asarray(batch_q, dtype=np.float64)
    batch_k = np.asarray(batch_k, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = batch_q.shape[0]
    if batch_k.shape != batch_q.shape or labels.shape != (n,):
        raise DimensionError("batch_q, batch_k, and labels must agree in length")
    if not (0 <= anchor_id < n):
        raise UsageError(f"anchor_id {anchor_id} is not in the batch of {n}")
    keep = np.arange(n) != anchor_id
    queue_emb, queue_labels, _ = queue.snapshot()
    emb = np.vstack([batch_q[keep], batch_k, queue_emb])
    lab = np.concatenate([labels[keep], labels, queue_labels])
    return ContrastivePool(embeddings=emb, labels=lab)


def split_family(pool: ContrastivePool,
                 anchor_pred: int) -> tuple[ContrastivePool, ContrastivePool]:
    """Partition the pool by label match against the anchor's class."""
    mask = pool.labels == int(anchor_pred)
    family = ContrastivePool(pool.embeddings[mask], pool.labels[mask])
    non_family = ContrastivePool(pool.embeddings[~mask], pool.labels[~mask])
    return family, non_family


def _as_embeddings(members) -> np.ndarray:
    if isinstance(members, ContrastivePool):
        return members.embeddings
    return np.asarray(members, dtype=np.float64)


def iwscl_loss(anchor_q: np.ndarray, family, non_family, tau: float,
               include_family_in_denominator: bool = False,
               ) -> tuple[float, np.ndarray]:
    """Single-anchor contrastive loss and its gradient w.r.t. the anchor.

    The gradient is taken with respect to the (already unit-norm) anchor
    vector itself; backprop through the normalization happens at the call
    site.  Family and non-family must both be non-empty; the training loop
    skips anchors for which either set is empty.
    """
    if tau <= 0.0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    q = np.asarray(anchor_q, dtype=np.float64)
    fam = _as_embeddings(family)
    non = _as_embeddings(non_family)
    if fam.shape[0] == 0:
        raise UsageError("family is empty; skip this anchor instead")
    if non.shape[0] == 0:
        raise UsageError("non-family is empty; skip this anchor instead")
    if fam.shape[1] != q.shape[0] or non.shape[1] != q.shape[0]:
        raise DimensionError("member dimension does not match the anchor")

    sims_f = fam @ q / tau
    sims_n = non @ q / tau
    shift = sims_n.max()
    exp_n = np.exp(sims_n - shift)
    lse_n = shift + np.log(exp_n.sum())
    weights_n = exp_n / exp_n.sum()  # softmax over the non-family

    if not include_family_in_denominator:
        loss = float(lse_n - sims_f.mean())
        grad = (weights_n @ non - fam.mean(axis=0)) / tau
        return loss, grad

    # Denominator additionally contains the paired family term.
    lse_each = np.logaddexp(lse_n, sims_f)  # per family member
    loss = float((lse_each - sims_f).mean())
    a = np.exp(sims_f - lse_each)  # weight of the family member in its own term
    coef = float((1.0 - a).mean())
    non_avg = weights_n @ non
    grad = (coef * non_avg - ((1.0 - a) / fam.shape[0]) @ fam) / tau
    return loss, grad


PoolSegments = list[tuple[np.ndarray, np.ndarray]]


def _segment_sims(q: np.ndarray, segments: PoolSegments,
                  tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Similarities (n, M) against the logical concatenation of segments,
    computed blockwise so the pool is never materialized."""
    n = q.shape[0]
    sizes = [seg.shape[0] for seg, _ in segments]
    total = int(sum(sizes))
    sims = np.empty((n, total))
    labels = np.empty(total, dtype=np.int64)
    offset = 0
    for (emb, lab), size in zip(segments, sizes):
        np.matmul(q, emb.T, out=sims[:, offset:offset + size])
        labels[offset:offset + size] = lab
        offset += size
    sims /= tau
    return sims, labels


def _segment_matmul(weights: np.ndarray, segments: PoolSegments) -> np.ndarray:
    """weights (n, M) times the logical concatenation of segment embeddings."""
    out = None
    offset = 0
    for emb, _ in segments:
        size = emb.shape[0]
        part = weights[:, offset:offset + size] @ emb
        out = part if out is None else out + part
        offset += size
    return out


def pooled_contrastive_loss(q: np.ndarray, segments, anchor_labels: np.ndarray,
                            own_column: np.ndarray, tau: float,
                            include_family_in_denominator: bool = False,
                            ) -> tuple[float, np.ndarray, int, np.ndarray]:
    """Vectorized anchor-averaged loss against one shared member pool.

    ``segments`` is either a single (pool_emb, pool_labels) pair or a list of
    such pairs forming the pool by concatenation (members are constants).
    ``own_column[i]`` gives the column holding anchor i's own query embedding
    (-1 when absent) so it can be excluded from its own pool.  Anchors whose
    family or non-family is empty are skipped; the loss averages over the
    contributing anchors and the returned gradient rows of skipped anchors
    are zero.

    Returns (mean_loss, grad_q, n_skipped, per_anchor_losses) where skipped
    anchors carry nan in per_anchor_losses.

    Because embeddings are unit norm, |sims| <= 1/tau, so the shifted
    exponentials cannot overflow even across the family/non-family split.
    """
    if tau <= 0.0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    if isinstance(segments, tuple) and len(segments) == 2 and not isinstance(
            segments[0], tuple):
        segments = [segments]
    n = q.shape[0]
    per_anchor = np.full(n, np.nan)
    grad_q = np.zeros_like(q)
    total = int(sum(seg.shape[0] for seg, _ in segments))
    if total == 0:
        return 0.0, grad_q, n, per_anchor

    sims, pool_labels = _segment_sims(q, segments, tau)
    rows = np.arange(n)
    match = pool_labels[None, :] == anchor_labels[:, None]
    fam_mask = match.copy()
    has_own = own_column >= 0
    fam_mask[rows[has_own], own_column[has_own]] = False
    non_mask = ~match
    non_mask[rows[has_own], own_column[has_own]] = False
    fam_count = fam_mask.sum(axis=1)
    non_count = non_mask.sum(axis=1)
    contrib = (fam_count > 0) & (non_count > 0)
    n_skipped = int(n - contrib.sum())
    if not np.any(contrib):
        return 0.0, grad_q, n_skipped, per_anchor

    shift = np.max(sims, axis=1, where=non_mask, initial=-np.inf)
    shift = np.where(contrib, shift, 0.0)
    exp_shifted = np.exp(sims - shift[:, None])
    exp_non = exp_shifted * non_mask
    z_non = exp_non.sum(axis=1)
    z_non_safe = np.where(z_non > 0.0, z_non, 1.0)
    lse_non = shift + np.log(z_non_safe)

    fam_count_safe = np.where(fam_count > 0, fam_count, 1)
    fam_mean_sims = (sims * fam_mask).sum(axis=1) / fam_count_safe

    scale = 1.0 / float(contrib.sum())
    if not include_family_in_denominator:
        losses = lse_non - fam_mean_sims
        combined = exp_non
        combined /= z_non_safe[:, None]  # softmax over the non-family
        combined -= fam_mask / fam_count_safe[:, None]
        combined *= contrib[:, None]
        grad_q = scale * _segment_matmul(combined, segments) / tau
    else:
        weights_non = exp_non / z_non_safe[:, None]
        neg_inf = -np.inf
        sims_fam = np.where(fam_mask, sims, neg_inf)
        lse_each = np.logaddexp(lse_non[:, None], sims_fam)
        per_member = np.where(fam_mask, lse_each - sims_fam, 0.0)
        losses = per_member.sum(axis=1) / fam_count_safe
        a = np.where(fam_mask, np.exp(sims_fam - lse_each), 0.0)
        coef = ((1.0 - a) * fam_mask).sum(axis=1) / fam_count_safe
        fam_part = (1.0 - a) * fam_mask / fam_count_safe[:, None]
        combined = coef[:, None] * weights_non - fam_part
        combined *= contrib[:, None]
        grad_q = scale * _segment_matmul(combined, segments) / tau

    per_anchor[contrib] = losses[contrib]
    mean_loss = float(losses[contrib].mean())
    return mean_loss, grad_q, n_skipped, per_anchor


def batch_contrastive_loss(q: np.ndarray, k: np.ndarray, labels: np.ndarray,
                           queue: EmbeddingQueue, tau: float,
                           include_family_in_denominator: bool = False,
                           ) -> tuple[float, np.ndarray, int]:
    """Anchor-averaged loss for a batch against (batch_q, batch_k, queue).

    Each batch instance acts as an anchor whose pool is the remaining query
    embeddings, every key embedding (its own included), and the queue.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = q.shape[0]
    if k.shape != q.shape or labels.shape != (n,):
        raise DimensionError("q, k, and labels must agree in length")
    queue_emb, queue_labels, _ = queue.raw_views()
    segments = [(q, labels), (k, labels), (queue_emb, queue_labels)]
    own = np.arange(n)
    loss, grad_q, skipped, _ = pooled_contrastive_loss(
        q, segments, labels, own, tau, include_family_in_denominator)
    return loss, grad_q, skipped
