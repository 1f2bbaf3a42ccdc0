"""Score statistics: separability, operating thresholds, accuracy, histograms.

All functions accept plain sequences or numpy arrays of similarity scores.
Accumulation happens in float64.  The accept rule everywhere in the package
is strict comparison: a score is an accept iff ``score > threshold``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import RevBioError

__all__ = [
    "CalibrationWarning",
    "DPrimeValue",
    "DegenerateVarianceError",
    "EmptyImpostorSetError",
    "FoldAccuracy",
    "Histogram",
    "InsufficientImpostorsError",
    "InsufficientSamplesError",
    "InvalidRangeError",
    "InvalidTargetError",
    "ScoreSet",
    "SingleClassFoldError",
    "ThresholdSpec",
    "TooFewPairsError",
    "d_prime",
    "fmr_threshold",
    "score_histogram",
    "verification_accuracy",
]

ScoresLike = Union[Sequence[float], np.ndarray]
LabeledPairs = Iterable[Tuple[float, bool]]

#: Pooled variances at or below this are treated as degenerate.
VARIANCE_FLOOR = 1e-24


class InsufficientSamplesError(RevBioError):
    """Fewer than two scores on one side; spread is undefined."""


class DegenerateVarianceError(RevBioError):
    """Both score sets are (numerically) constant; separability is undefined."""


class EmptyImpostorSetError(RevBioError):
    """No impostor scores to calibrate a threshold from."""


class InvalidTargetError(RevBioError):
    """Match-rate target outside (0, 1)."""


class InsufficientImpostorsError(RevBioError):
    """Too few impostor scores to resolve the requested match rate."""


class TooFewPairsError(RevBioError):
    """Not enough scored pairs to populate the requested folds."""


class SingleClassFoldError(RevBioError):
    """A training split ended up with only genuine or only impostor scores."""


class InvalidRangeError(RevBioError):
    """Histogram range is empty or inverted, or the bin count is not positive."""


class CalibrationWarning(UserWarning):
    """The impostor sample is thin for the requested match rate."""


def _scores(values: ScoresLike, name: str, allow_empty: bool = False) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0 and not allow_empty:
        raise InsufficientSamplesError(f"{name}: empty score set")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: scores must be finite")
    return arr


@dataclass(frozen=True)
class ScoreSet:
    """A matched pair of genuine and impostor score samples."""

    genuine: np.ndarray
    impostor: np.ndarray
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "genuine", _scores(self.genuine, "genuine"))
        object.__setattr__(self, "impostor", _scores(self.impostor, "impostor"))


@dataclass(frozen=True)
class DPrimeValue:
    """Separability index plus the moments it was computed from."""

    value: float
    genuine_mean: float
    genuine_std: float
    impostor_mean: float
    impostor_std: float
    n_genuine: int
    n_impostor: int

    def as_dict(self) -> dict:
        return {
            "d_prime": self.value,
            "genuine_mean": self.genuine_mean,
            "genuine_std": self.genuine_std,
            "impostor_mean": self.impostor_mean,
            "impostor_std": self.impostor_std,
            "n_genuine": self.n_genuine,
            "n_impostor": self.n_impostor,
        }


@dataclass(frozen=True)
class ThresholdSpec:
    """An operating threshold tied to the accept rule ``score > threshold``."""

    threshold: float
    fmr_target: float
    empirical_fmr: float
    impostor_count: int

    def as_dict(self) -> dict:
        return {
            "fmr_target": self.fmr_target,
            "threshold": self.threshold,
            "impostor_count": self.impostor_count,
            "empirical_fmr": self.empirical_fmr,
        }


@dataclass(frozen=True)
class FoldAccuracy:
    """Cross-validated verification accuracy, in percent."""

    mean: float
    per_fold: tuple[float, ...]

    @property
    def folds(self) -> int:
        return len(self.per_fold)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "per_fold": list(self.per_fold), "folds": self.folds}


@dataclass(frozen=True)
class Histogram:
    """Fixed-range histogram with explicit out-of-range tallies."""

    counts: np.ndarray
    bin_edges: np.ndarray
    underflow: int
    overflow: int

    @property
    def bin_centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2.0

    def items(self) -> list[tuple[float, int]]:
        return [(float(c), int(n)) for c, n in zip(self.bin_centers, self.counts)]

    def to_csv(self) -> str:
        lines = ["bin_center,count"]
        for center, count in self.items():
            lines.append(f"{center!r},{count}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "counts": [int(c) for c in self.counts],
                "bin_edges": [float(e) for e in self.bin_edges],
                "underflow": self.underflow,
                "overflow": self.overflow,
            }
        )


def d_prime(
    genuine: Union[ScoreSet, ScoresLike], impostor: Optional[ScoresLike] = None
) -> DPrimeValue:
    """Separation between score populations in pooled-spread units.

    d' = |mean_G - mean_I| / sqrt((var_G + var_I) / 2) with unbiased (n-1)
    sample variances.  Accepts either a ``ScoreSet`` or two score sequences.
    Needs at least two scores per side; raises ``DegenerateVarianceError``
    when the pooled variance underflows ``VARIANCE_FLOOR``.
    """
    if isinstance(genuine, ScoreSet):
        if impostor is not None:
            raise TypeError("pass either a ScoreSet or two sequences, not both")
        g, i = genuine.genuine, genuine.impostor
    else:
        if impostor is None:
            raise TypeError("impostor scores missing")
        g = _scores(genuine, "genuine")
        i = _scores(impostor, "impostor")
    if g.size < 2 or i.size < 2:
        raise InsufficientSamplesError(
            f"need >= 2 scores per side, got {g.size} genuine / {i.size} impostor"
        )
    g_mean = float(np.mean(g))
    i_mean = float(np.mean(i))
    g_var = float(np.var(g, ddof=1))
    i_var = float(np.var(i, ddof=1))
    pooled = (g_var + i_var) / 2.0
    if pooled <= VARIANCE_FLOOR:
        raise DegenerateVarianceError(f"pooled variance {pooled!r} is below the floor")
    return DPrimeValue(
        value=abs(g_mean - i_mean) / math.sqrt(pooled),
        genuine_mean=g_mean,
        genuine_std=math.sqrt(g_var),
        impostor_mean=i_mean,
        impostor_std=math.sqrt(i_var),
        n_genuine=int(g.size),
        n_impostor=int(i.size),
    )


def fmr_threshold(impostor: ScoresLike, fmr_target: float) -> ThresholdSpec:
    """Lowest impostor order statistic such that ``score > threshold``
    accepts at most a ``fmr_target`` fraction of the impostor sample.

    With the M impostor scores sorted ascending and k = floor(M * fmr_target),
    the threshold is the (M - k)-th order statistic, so at most k scores lie
    strictly above it.  The achieved (empirical) rate is reported alongside;
    ties can push it below the target, never above.
    """
    if not isinstance(fmr_target, (int, float)) or not 0.0 < float(fmr_target) < 1.0:
        raise InvalidTargetError(f"fmr_target must be in (0, 1), got {fmr_target!r}")
    arr = _scores(impostor, "impostor", allow_empty=True)
    if arr.size == 0:
        raise EmptyImpostorSetError("no impostor scores supplied")
    scores = np.sort(arr)
    m = int(scores.size)
    if m * fmr_target < 10.0:
        warnings.warn(
            f"only {m} impostor scores for target {fmr_target:g}; "
            f"the threshold resolves fewer than 10 tail samples",
            CalibrationWarning,
            stacklevel=2,
        )
    k = int(math.floor(m * fmr_target))
    threshold = float(scores[m - k - 1])
    empirical = float(np.count_nonzero(scores > threshold)) / m
    return ThresholdSpec(
        threshold=threshold,
        fmr_target=float(fmr_target),
        empirical_fmr=empirical,
        impostor_count=m,
    )


def verification_accuracy(pairs: LabeledPairs, folds: int = 10) -> FoldAccuracy:
    """Cross-validated percent accuracy of the thresholded accept rule.

    ``pairs`` is a sequence of (score, is_genuine) in presentation order;
    entry ``idx`` goes to fold ``idx % folds``.  For each fold the threshold
    is trained on the remaining folds: candidates are -inf plus every
    distinct training score, and the lowest candidate maximizing training
    accuracy wins.  Test scores are then judged with ``score > threshold``.
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    seq = list(pairs)
    n = len(seq)
    if n < folds * 2:
        raise TooFewPairsError(f"{n} scored pairs cannot populate {folds} folds")
    scores = _scores([s for s, _ in seq], "pairs")
    labels = np.asarray([bool(g) for _, g in seq], dtype=bool)
    assignment = np.arange(n) % folds

    per_fold: list[float] = []
    for fold in range(folds):
        test_mask = assignment == fold
        train_labels = labels[~test_mask]
        if train_labels.all() or not train_labels.any():
            raise SingleClassFoldError(f"fold {fold}: training split has a single class")
        threshold = _best_threshold(scores[~test_mask], train_labels)
        predicted = scores[test_mask] > threshold
        correct = int(np.count_nonzero(predicted == labels[test_mask]))
        per_fold.append(100.0 * correct / int(np.count_nonzero(test_mask)))

    return FoldAccuracy(mean=float(np.mean(per_fold)), per_fold=tuple(per_fold))


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Lowest threshold maximizing accuracy of ``score > t`` on the sample."""
    candidates = np.concatenate([[-np.inf], np.unique(scores)])
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    genuine_sorted = labels[order].astype(np.int64)
    total_genuine = int(genuine_sorted.sum())
    cum_genuine = np.concatenate([[0], np.cumsum(genuine_sorted)])
    # accepts for candidate t are the scores strictly greater than t
    first_above = np.searchsorted(sorted_scores, candidates, side="right")
    n = scores.size
    accepted = n - first_above
    accepted_genuine = total_genuine - cum_genuine[first_above]
    accepted_impostor = accepted - accepted_genuine
    rejected_impostor = (n - total_genuine) - accepted_impostor
    correct = accepted_genuine + rejected_impostor
    return float(candidates[int(np.argmax(correct))])


def score_histogram(
    scores: ScoresLike, bins: int, lo: float, hi: float
) -> Histogram:
    """Counts per equal-width bin over [lo, hi], plus out-of-range tallies.

    Bins are half-open [edge_i, edge_{i+1}) except the last, which includes
    ``hi``.  Scores below ``lo`` / above ``hi`` land in underflow / overflow.
    Empty input yields all-zero counts.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise InvalidRangeError(f"invalid histogram range [{lo!r}, {hi!r}]")
    if bins < 1:
        raise InvalidRangeError(f"bins must be >= 1, got {bins}")
    arr = _scores(scores, "scores", allow_empty=True)
    in_range = arr[(arr >= lo) & (arr <= hi)]
    counts, edges = np.histogram(in_range, bins=bins, range=(lo, hi))
    return Histogram(
        counts=counts.astype(np.int64),
        bin_edges=edges,
        underflow=int(np.count_nonzero(arr < lo)),
        overflow=int(np.count_nonzero(arr > hi)),
    )
