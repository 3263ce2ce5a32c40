"""Queue scoring and pruning: score the k+1 candidates, adjust the oldest and
newest, drop the worst, point at the best remaining.

The adjustment divides the oldest score by beta and multiplies the newest by
beta. With beta = num/den this is done exactly over the integers by weighting
index 0 with den^2, interior indices with num*den, and index k with num^2 -
the same positive rescaling, so ordering is preserved and the proof circuit
compares identical integers. Ties break toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import frequency
from .errors import ConfigError, ProtocolStateError
from .modelcore import QueueState


@dataclass(frozen=True)
class DefenseParams:
    k: int = 3
    beta_num: int = 7
    beta_den: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("queue length must be >= 1")
        if not 0 < self.beta_num <= self.beta_den:
            raise ConfigError("beta must lie in (0, 1]")

    def weights(self, count):
        """Integer adjustment weight per position in the k+1 temporary list."""
        w = [self.beta_num * self.beta_den] * count
        w[0] = self.beta_den * self.beta_den
        w[-1] = self.beta_num * self.beta_num
        return w


@dataclass(frozen=True)
class DefenseOutcome:
    removed_index: int           # position in the k+1 temporary list
    bm_index: int                # position in the pruned k-list
    adjusted_scores: tuple
    raw_scores: tuple


class QuantizedTaxicabScorer:
    """Normative scorer: exact integer low-frequency taxicab mass of each update."""

    name = "taxicab"

    def score_all(self, updates):
        return [frequency.poison_score(u) for u in updates]


class FloatTaxicabScorer:
    name = "taxicab-float"

    def score_all(self, updates):
        return [frequency.poison_score_float(u) for u in updates]


class FloatL2Scorer:
    name = "l2"

    def score_all(self, updates):
        return [float(np.linalg.norm(frequency.masked_spectrum_float(u))) for u in updates]


class FloatCosineScorer:
    """Cosine distance of each masked spectrum to the candidate-list mean."""

    name = "cosine"

    def score_all(self, updates):
        specs = [frequency.masked_spectrum_float(u) for u in updates]
        ref = np.mean(specs, axis=0)
        ref_norm = np.linalg.norm(ref)
        out = []
        for s in specs:
            denom = np.linalg.norm(s) * ref_norm
            out.append(1.0 if denom == 0 else float(1.0 - np.dot(s, ref) / denom))
        return out


SCORERS = {
    "taxicab": QuantizedTaxicabScorer,
    "taxicab-float": FloatTaxicabScorer,
    "l2": FloatL2Scorer,
    "cosine": FloatCosineScorer,
}


def _argmax_low(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def _argmin_low(values):
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best


def detect_poisoned(queue, new_ckpt, params, scorer=None):
    """Score the queue plus the newcomer, prune the worst, repoint the best.

    Returns the pruned QueueState and the DefenseOutcome over the temporary
    k+1 list (oldest first, newcomer last).
    """
    if queue.k != params.k:
        raise ProtocolStateError(f"queue holds {queue.k} checkpoints, expected {params.k}")
    scorer = scorer or QuantizedTaxicabScorer()
    candidates = list(queue.checkpoints) + [new_ckpt]
    raw = scorer.score_all([c.update for c in candidates])
    weights = params.weights(len(candidates))
    adjusted = [w * s for w, s in zip(weights, raw)]
    removed = _argmax_low(adjusted)
    survivors = [c for i, c in enumerate(candidates) if i != removed]
    surviving_adjusted = [a for i, a in enumerate(adjusted) if i != removed]
    bm = _argmin_low(surviving_adjusted)
    outcome = DefenseOutcome(
        removed_index=removed,
        bm_index=bm,
        adjusted_scores=tuple(adjusted),
        raw_scores=tuple(raw),
    )
    return QueueState(checkpoints=tuple(survivors), bm_index=bm), outcome


def gold_standard(queue, new_ckpt, poisoned_flags):
    """Oracle defense: drop the newest poisoned candidate (else the oldest),
    point at the most recent benign survivor."""
    candidates = list(queue.checkpoints) + [new_ckpt]
    flags = list(poisoned_flags)
    if len(flags) != len(candidates):
        raise ConfigError("oracle flags must cover the k+1 candidates")
    poisoned_positions = [i for i, f in enumerate(flags) if f]
    removed = poisoned_positions[-1] if poisoned_positions else 0
    survivors = [c for i, c in enumerate(candidates) if i != removed]
    surviving_flags = [f for i, f in enumerate(flags) if i != removed]
    benign = [i for i, f in enumerate(surviving_flags) if not f]
    bm = benign[-1] if benign else len(survivors) - 1
    outcome = DefenseOutcome(
        removed_index=removed, bm_index=bm, adjusted_scores=(), raw_scores=()
    )
    return QueueState(checkpoints=tuple(survivors), bm_index=bm), outcome


def secure_init_select(checkpoints, k, scorer=None):
    """Bootstrap selection over the N one-round checkpoints: keep the k with
    the lowest raw scores (round order), point at the global argmin."""
    if len(checkpoints) < k:
        raise ConfigError(f"secure init needs at least {k} clients")
    scorer = scorer or QuantizedTaxicabScorer()
    raw = scorer.score_all([c.update for c in checkpoints])
    order = sorted(range(len(checkpoints)), key=lambda i: (raw[i], i))
    kept = sorted(order[:k])
    best_global = order[0]
    bm = kept.index(best_global)
    queue = QueueState(
        checkpoints=tuple(checkpoints[i] for i in kept), bm_index=bm
    )
    return queue, [raw[i] for i in kept]
