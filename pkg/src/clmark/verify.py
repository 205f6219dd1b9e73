"""Ownership verification core.

Density statistics S and S' (mean pairwise cosine similarity of clean and
watermarked query outputs), their difference delta, a one-sided one-sample
t-test of the per-batch deltas against a threshold tau, and TPR/FPR
threshold sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from clmark.errors import InvalidInputError

LEVEL_FEATURE = "feature"
LEVEL_SOFT = "soft"
LEVEL_HARD = "hard"
LEVELS = (LEVEL_FEATURE, LEVEL_SOFT, LEVEL_HARD)

DECISION_INFRINGING = "Infringing"
DECISION_NOT_PROVEN = "NotProven"


@dataclass(frozen=True)
class OutputBatch:
    """A batch of suspect-model outputs at one verification level."""

    level: str
    vectors: np.ndarray  # (n, d); one-hot rows for the hard-label level

    def __post_init__(self):
        if self.level not in LEVELS:
            raise InvalidInputError(f"unknown level {self.level!r}")
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInputError("vectors must be a 2-D (n, d) array")
        if self.level == LEVEL_HARD:
            ok = np.all(np.isin(v, (0.0, 1.0))) and np.all(v.sum(axis=1) == 1.0)
            if not ok:
                raise InvalidInputError("hard-label vectors must be valid one-hots")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class VerifyConfig:
    threshold: float = 0.10
    batches: int = 5
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.batches < 2:
            raise InvalidInputError("need at least 2 batches for the t-test")
        if not (0 < self.alpha < 1):
            raise InvalidInputError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class VerificationReport:
    S: float
    S_prime: float
    delta: float
    per_batch_deltas: tuple[float, ...]
    t_statistic: float
    p_value: float
    decision: str
    level: str
    threshold: float
    alpha: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "S_prime": self.S_prime,
            "delta": self.delta,
            "per_batch_deltas": list(self.per_batch_deltas),
            "t_statistic": self.t_statistic,
            "p_value": self.p_value,
            "decision": self.decision,
            "level": self.level,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "metadata": self.metadata,
        }


def mean_pairwise_cosine(batch: OutputBatch) -> float:
    """Mean cosine similarity over all unordered pairs in the batch.

    For one-hot hard labels this equals the fraction of agreeing pairs.
    """
    v = batch.vectors
    n = batch.n
    if n < 2:
        raise InvalidInputError("need at least 2 vectors for pairwise similarity")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("zero vector has undefined cosine similarity")
    vh = v / norms[:, np.newaxis]
    gram = vh @ vh.T
    total = (gram.sum() - np.trace(gram)) / 2.0
    return float(total * 2.0 / (n * (n - 1)))


def compute_delta(clean: OutputBatch, watermarked: OutputBatch):
    """(S, S', delta) with S from clean outputs and S' from watermarked."""
    if clean.level != watermarked.level:
        raise InvalidInputError("clean and watermarked batches have different levels")
    if clean.dim != watermarked.dim:
        raise InvalidInputError("clean and watermarked batches have different dims")
    s = mean_pairwise_cosine(clean)
    s_prime = mean_pairwise_cosine(watermarked)
    return s, s_prime, s_prime - s


def t_test_one_sample(deltas, tau: float) -> tuple[float, float]:
    """One-sided one-sample t-test of H0: mean(delta) <= tau vs H1: > tau.

    Degenerate zero-variance samples: p = 0 if mean > tau else 1.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    m = deltas.size
    if m < 2:
        raise InvalidInputError("t-test needs at least 2 samples")
    mean = deltas.mean()
    sd = deltas.std(ddof=1)
    if sd == 0.0:
        return (np.inf if mean > tau else -np.inf), (0.0 if mean > tau else 1.0)
    t = (mean - tau) / (sd / np.sqrt(m))
    p = float(stats.t.sf(t, df=m - 1))
    return float(t), p


def sweep_thresholds(ip_deltas, nonip_deltas, grid) -> list[tuple[float, float, float]]:
    """(tau, TPR, FPR) per grid point: fraction of deltas strictly above tau."""
    ip = np.asarray(ip_deltas, dtype=np.float64)
    nonip = np.asarray(nonip_deltas, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if ip.size == 0 or nonip.size == 0 or grid.size == 0:
        raise InvalidInputError("delta populations and grid must be non-empty")
    if np.any(np.diff(grid) < 0):
        raise InvalidInputError("grid must be sorted ascending")
    out = []
    for tau in grid:
        tpr = float(np.mean(ip > tau))
        fpr = float(np.mean(nonip > tau))
        out.append((float(tau), tpr, fpr))
    return out


def verify(
    suspect,
    clean_images,
    watermarked_images,
    level: str,
    cfg: VerifyConfig,
    metadata: dict | None = None,
) -> VerificationReport:
    """Query the suspect with the paired query set and run the density test.

    The paired set is shuffled (seeded) and split into ``cfg.batches``
    disjoint batches; delta is computed per batch and tested against the
    threshold. ``suspect`` is any object with a
    ``query(images, level) -> OutputBatch`` method.
    """
    n = len(clean_images)
    if n == 0 or len(watermarked_images) != n:
        raise InvalidInputError("query set must be non-empty and paired")
    per_batch = n // cfg.batches
    if per_batch < 2:
        raise InvalidInputError(
            f"{n} query pairs cannot form {cfg.batches} batches of >= 2"
        )
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)

    clean_out = suspect.query(list(clean_images), level)
    wm_out = suspect.query(list(watermarked_images), level)
    if clean_out.dim != wm_out.dim:
        raise InvalidInputError("suspect returned inconsistent output dimensions")

    deltas = []
    for b in range(cfg.batches):
        idx = order[b * per_batch : (b + 1) * per_batch]
        cb = OutputBatch(level, clean_out.vectors[idx])
        wb = OutputBatch(level, wm_out.vectors[idx])
        _, _, d = compute_delta(cb, wb)
        deltas.append(d)
    s, s_prime, delta = compute_delta(
        OutputBatch(level, clean_out.vectors), OutputBatch(level, wm_out.vectors)
    )
    t_stat, p = t_test_one_sample(deltas, cfg.threshold)
    decision = DECISION_INFRINGING if p < cfg.alpha else DECISION_NOT_PROVEN
    return VerificationReport(
        S=s,
        S_prime=s_prime,
        delta=delta,
        per_batch_deltas=tuple(deltas),
        t_statistic=t_stat,
        p_value=p,
        decision=decision,
        level=level,
        threshold=cfg.threshold,
        alpha=cfg.alpha,
        metadata=metadata or {},
    )
