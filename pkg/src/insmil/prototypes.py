"""Prototype bank and moving-average soft pseudo labels.

Two unit-norm prototype vectors summarize the negative (class 0) and
positive (class 1) regions of embedding space.  Instances from positive bags
receive a soft label that drifts toward the one-hot class of their nearest
prototype, ``s <- alpha * s + (1 - alpha) * onehot(argmax_r q . mu_r)``;
instances from negative bags carry the frozen hard label [1, 0] because their
class is certain.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError, ValidationError
from .nn import softmax_xent

UNIT_NORM_TOLERANCE = 1e-6


class PrototypeBank:
    """Running-average class representatives, re-normalized after each update.

    A class's first update copies the embedding verbatim (and marks the class
    initialized); later updates blend ``mu <- Norm(beta * mu + (1 - beta) * q)``.
    Embeddings from negative bags always update the negative prototype,
    whatever the classifier predicted.
    """

    def __init__(self, dim: int = 128, beta: float = 0.99):
        if dim < 1:
            raise ConfigurationError(f"prototype dim must be >= 1, got {dim}")
        if not (0.0 <= beta <= 1.0):
            raise ConfigurationError(f"beta must lie in [0, 1], got {beta}")
        self.dim = dim
        self.beta = beta
        self.mu = np.zeros((2, dim))
        self.initialized = [False, False]

    def both_initialized(self) -> bool:
        return self.initialized[0] and self.initialized[1]

    def _check_unit(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValidationError(f"embedding shape {q.shape} != ({self.dim},)")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValidationError(
                f"prototype updates require unit-norm embeddings (||q|| = {norm:.8f})")
        return q

    def update(self, q: np.ndarray, predicted_class: int,
               from_negative_bag: bool) -> None:
        q = self._check_unit(q)
        r = 0 if from_negative_bag else int(predicted_class)
        if r not in (0, 1):
            raise ValidationError(f"predicted_class must be 0 or 1, got {predicted_class}")
        if not self.initialized[r]:
            self.mu[r] = q
            self.initialized[r] = True
            return
        blended = self.beta * self.mu[r] + (1.0 - self.beta) * q
        norm = float(np.linalg.norm(blended))
        if norm <= 1e-12:
            # Exactly antipodal blend; unreachable for beta < 1 with unit inputs.
            return
        self.mu[r] = blended / norm

    def assign(self, q: np.ndarray) -> int:
        """Nearest-prototype class by inner product; exact ties go negative."""
        q = self._check_unit(q)
        if not self.both_initialized():
            raise UsageError("both prototypes must be initialized before assignment")
        s0 = float(self.mu[0] @ q)
        s1 = float(self.mu[1] @ q)
        return 1 if s1 > s0 else 0


class PseudoLabelStore:
    """Per-instance soft labels on the 2-simplex.

    Instances flagged as negative-bag members are initialized to the frozen
    hard label [1, 0]; everything else starts at the bag-inherited label
    [0, 1] (the classic noisy starting point) and is moved by ``generate``.
    ``positive_init`` overrides the positive-bag starting value, e.g.
    (0.5, 0.5) for a maximum-entropy start.
    """

    def __init__(self, negative_mask: np.ndarray, alpha: float = 0.9,
                 positive_init: tuple[float, float] = (0.0, 1.0)):
        if not (0.0 <= alpha <= 1.0):
            raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
        if (len(positive_init) != 2 or min(positive_init) < 0.0
                or abs(sum(positive_init) - 1.0) > 1e-9):
            raise ConfigurationError(
                f"positive_init must lie on the 2-simplex, got {positive_init}")
        negative_mask = np.asarray(negative_mask, dtype=bool)
        if negative_mask.ndim != 1:
            raise ConfigurationError("negative_mask must be one flag per instance")
        self.alpha = alpha
        self.negative_mask = negative_mask.copy()
        n = negative_mask.shape[0]
        self.s = np.empty((n, 2))
        self.s[:] = positive_init
        self.s[negative_mask] = (1.0, 0.0)
        self.frozen = negative_mask.copy()

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def assign_negative(self, instance_id: int) -> None:
        """Pin a negative-bag instance to the hard label [1, 0] (idempotent)."""
        if not self.negative_mask[instance_id]:
            raise UsageError(
                f"instance {instance_id} belongs to a positive bag; definite "
                "negative labels apply only to negative-bag instances")
        self.s[instance_id] = (1.0, 0.0)
        self.frozen[instance_id] = True

    def generate(self, instance_id: int, q: np.ndarray, bank: PrototypeBank) -> bool:
        """Move one positive-bag instance's label toward its nearest prototype.

        Returns False (skipped) while either prototype is uninitialized.
        """
        if self.negative_mask[instance_id] or self.frozen[instance_id]:
            raise UsageError(
                f"instance {instance_id} carries a frozen negative label; "
                "pseudo-label updates apply only to positive-bag instances")
        if not bank.both_initialized():
            return False
        z = np.zeros(2)
        z[bank.assign(q)] = 1.0
        self.s[instance_id] = self.alpha * self.s[instance_id] + (1.0 - self.alpha) * z
        return True


def instance_cls_loss(classifier_logits: np.ndarray,
                      s_batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of classifier predictions against soft pseudo labels."""
    return softmax_xent(classifier_logits, s_batch)
