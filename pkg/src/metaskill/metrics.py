"""Trust quantification and classification metrics.

Question-answer trust rewards confidence on correct predictions and
penalizes it on wrong ones; per-condition trust values feed a Gaussian-KDE
spectrum and a scalar score that reduces to their mean. Classification
side: micro-averaged accuracy, pairwise (Mann-Whitney) ROC-AUC, and Tukey
fence outlier filtering.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SPECTRUM_GRID_POINTS = 512
SPECTRUM_RANGE = (-0.5, 1.5)


@dataclass(frozen=True)
class TrustConfig:
    reward_exponent: float = 1.0  # alpha
    penalty_exponent: float = 1.0  # beta
    kernel_factor: float = 0.5  # gamma; bandwidth is gamma / sqrt(N)

    def __post_init__(self):
        if self.reward_exponent <= 0 or self.penalty_exponent <= 0 or self.kernel_factor <= 0:
            raise ValueError("trust exponents and kernel factor must be positive")


@dataclass
class PredictionRecord:
    """One scored sample: softmax vector, predicted class, true class."""

    softmax: np.ndarray
    predicted: int
    actual: int

    def __post_init__(self):
        self.softmax = np.asarray(self.softmax, dtype=np.float64)
        if self.softmax.ndim != 1:
            raise ValueError(f"softmax must be a vector, got shape {self.softmax.shape}")
        if abs(self.softmax.sum() - 1.0) > 1e-9:
            raise ValueError(f"softmax sums to {self.softmax.sum()!r}, not 1")
        if self.predicted != int(np.argmax(self.softmax)):
            raise ValueError("predicted class is not the softmax argmax")
        if not 0 <= self.actual < self.softmax.size:
            raise ValueError(f"actual class {self.actual} out of range")

    @property
    def confidence(self) -> float:
        return float(self.softmax[self.predicted])

    @property
    def correct(self) -> bool:
        return self.predicted == self.actual


@dataclass
class TrustReport:
    """Per-condition trust values, spectra, and scores."""

    q_values: dict[str, list[float]]
    spectra: dict[str, tuple[np.ndarray, np.ndarray]]
    nts: dict[str, float | None]


def qa_trust(record: PredictionRecord, config: TrustConfig = TrustConfig()) -> float:
    """Reward confidence when correct, penalize it when wrong."""
    c = record.confidence
    if record.correct:
        return c ** config.reward_exponent
    return (1.0 - c) ** config.penalty_exponent


def conditional_trust(records: list[PredictionRecord],
                      config: TrustConfig = TrustConfig()) -> list[float]:
    """Trust of every record in an already-selected condition.

    Conditions are handled separately (for example the false predictions of
    one class), so no penalty branch applies here.
    """
    return [r.confidence ** config.reward_exponent for r in records]


def trust_density(values, config: TrustConfig = TrustConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE of trust values with bandwidth gamma / sqrt(N).

    Evaluated on a uniform 512-point grid over [-0.5, 1.5], wide enough
    that essentially all kernel mass falls inside for moderate N.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("trust_density needs at least one value")
    n = values.size
    h = config.kernel_factor / np.sqrt(n)
    grid = np.linspace(*SPECTRUM_RANGE, SPECTRUM_GRID_POINTS)
    z = (grid[:, None] - values[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (n * h * np.sqrt(2.0 * np.pi))
    return grid, density


def nts(values) -> float | None:
    """Scalar trust score of a condition: the mean of its trust values.

    The normalized integral of question-answer trust over a condition
    reduces to this mean; the KDE is for the spectrum plot only. An empty
    condition has no score and reports as absent.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None
    return float(np.clip(values.mean(), 0.0, 1.0))


def trust_report(conditions: dict[str, list[PredictionRecord]],
                 config: TrustConfig = TrustConfig()) -> TrustReport:
    q_values = {name: conditional_trust(records, config) for name, records in conditions.items()}
    spectra = {name: trust_density(vals, config) for name, vals in q_values.items() if vals}
    scores = {name: nts(vals) for name, vals in q_values.items()}
    return TrustReport(q_values=q_values, spectra=spectra, nts=scores)


def true_prediction_conditions(records: list[PredictionRecord],
                               class_names: list[str]) -> dict[str, list[PredictionRecord]]:
    """Group the correctly predicted records by their class."""
    return {f"true_{name}": [r for r in records if r.correct and r.actual == c]
            for c, name in enumerate(class_names)}


def micro_accuracy(records: list[PredictionRecord]) -> float:
    """Correct predictions pooled over all classes, divided by the total."""
    if not records:
        raise ValueError("micro_accuracy needs at least one record")
    return sum(r.correct for r in records) / len(records)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching vectors")
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc needs both classes present")
    diff = pos[:, None] - neg[None, :]
    wins = np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
    return float(wins / (pos.size * neg.size))


def tukey_keep_mask(values, k: float = 1.5) -> np.ndarray:
    """Boolean mask of values inside [Q1 - k*IQR, Q3 + k*IQR].

    Quartiles use linear interpolation between order statistics. Fewer than
    4 values cannot support fences; everything is kept with a warning.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 4:
        warnings.warn(f"tukey fences need >= 4 values, got {values.size}; keeping all",
                      stacklevel=2)
        return np.ones(values.shape, dtype=bool)
    q1, q3 = np.quantile(values, [0.25, 0.75])
    iqr = q3 - q1
    return (values >= q1 - k * iqr) & (values <= q3 + k * iqr)


def tukey_filter(values, k: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Split values into (kept, removed) by the Tukey fences."""
    values = np.asarray(values, dtype=np.float64)
    keep = tukey_keep_mask(values, k)
    return values[keep], values[~keep]
