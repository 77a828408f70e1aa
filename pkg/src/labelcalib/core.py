"""Confidence-weighted soft-label prototypes and nearest-prototype prediction.

The pipeline is black-box: it consumes per-pixel class-probability vectors
produced by some upstream model, never the model itself.  Fitting is a single
streaming pass: every pixel votes for its argmax class with weight equal to
its top probability, and the prototype of a class is the weighted mean of the
probability vectors of the pixels that voted for it.  Prediction then assigns
each pixel to the class whose prototype is nearest in Euclidean distance.

Accumulators are plain value objects: shard the data, accumulate shards
independently, merge associatively.  A finalized PrototypeSet is immutable
and safe for concurrent read-only prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .labelspace import LabelSpace

# Pixel vectors from files may carry rounding error; sums within this
# tolerance of 1 are accepted and normalized at the point of use.  Larger
# deviation is a data error, not noise.
SUM_TOLERANCE = 1e-4


def _as_prob_vector(p) -> np.ndarray:
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValidationError(f"expected a 1-D probability vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("probability vector has non-finite components")
    return v


def argmax_class(p) -> int:
    """Index of the largest component; ties go to the lowest index."""
    v = _as_prob_vector(p)
    return int(np.argmax(v))


def confidence_weight(p) -> tuple[int, float]:
    """(argmax class, its probability): the pixel's vote and vote weight."""
    v = _as_prob_vector(p)
    c = int(np.argmax(v))
    return c, float(v[c])


@dataclass(frozen=True)
class ProbMap:
    """A C x H x W grid of per-pixel class-probability vectors.

    ``data`` is float64 in class-major (C, H, W) layout and is kept exactly
    as ingested so file round-trips stay bit-exact; consumers that need unit
    sums call :meth:`normalized_pixels`.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValidationError(f"ProbMap data must be (C, H, W), got {self.data.shape}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def from_array(cls, arr) -> "ProbMap":
        """Validate and ingest a (C, H, W) array of probabilities."""
        data = np.ascontiguousarray(arr, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] < 1:
            raise ValidationError(f"expected a (C, H, W) array with C >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("probability map has non-finite values")
        if np.any(data < 0.0):
            raise ValidationError("probability map has negative values")
        if data.shape[1] * data.shape[2] > 0:
            sums = data.sum(axis=0)
            err = np.abs(sums - 1.0).max()
            if err > SUM_TOLERANCE:
                raise ValidationError(
                    f"pixel probability sums deviate from 1 by {err:.3e} "
                    f"(tolerance {SUM_TOLERANCE:g})"
                )
        return cls(data=data)

    def pixels(self) -> np.ndarray:
        """Raw pixel vectors as an (H*W, C) array, pixel index = h*W + w."""
        C = self.num_classes
        return self.data.reshape(C, -1).T

    def normalized_pixels(self) -> np.ndarray:
        """Pixel vectors rescaled to sum exactly to 1 (the ingestion rule)."""
        px = self.pixels()
        if px.shape[0] == 0:
            return np.asarray(px, dtype=np.float64)
        return px / px.sum(axis=1, keepdims=True)

    def vector(self, h: int, w: int) -> np.ndarray:
        return self.data[:, h, w]


@dataclass(frozen=True)
class PredictionMap:
    """Per-pixel predicted class indices, stored as an (H, W) uint8 grid."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.labels.ndim != 2:
            raise ValidationError(f"PredictionMap labels must be (H, W), got {self.labels.shape}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class PrototypeAccumulator:
    """Mergeable running sums behind the prototype average.

    ``weighted_sum[c][j]`` accumulates weight * p_j over pixels whose argmax
    is c, ``weight_total[c]`` the weights alone, ``pixel_count[c]`` the raw
    pixel tally.  All accumulation is float64 regardless of input precision.
    """

    weighted_sum: np.ndarray
    weight_total: np.ndarray
    pixel_count: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "PrototypeAccumulator":
        if num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        return cls(
            weighted_sum=np.zeros((num_classes, num_classes), dtype=np.float64),
            weight_total=np.zeros(num_classes, dtype=np.float64),
            pixel_count=np.zeros(num_classes, dtype=np.int64),
        )

    @property
    def num_classes(self) -> int:
        return self.weight_total.shape[0]

    def update(self, prob_map: ProbMap) -> "PrototypeAccumulator":
        """Fold one probability map into the sums (in place); returns self."""
        if prob_map.num_classes != self.num_classes:
            raise DimensionError(
                f"accumulator has {self.num_classes} classes, map has {prob_map.num_classes}"
            )
        px = prob_map.normalized_pixels()
        if px.shape[0] == 0:
            return self
        cls_idx = np.argmax(px, axis=1)
        weights = px[np.arange(px.shape[0]), cls_idx]
        for c in np.unique(cls_idx):
            mask = cls_idx == c
            self.weighted_sum[c] += (px[mask] * weights[mask, None]).sum(axis=0)
            self.weight_total[c] += weights[mask].sum()
            self.pixel_count[c] += int(mask.sum())
        return self

    def merge(self, other: "PrototypeAccumulator") -> "PrototypeAccumulator":
        """Elementwise sum of two accumulators, as a new accumulator."""
        if other.num_classes != self.num_classes:
            raise DimensionError(
                f"cannot merge accumulators with {self.num_classes} and "
                f"{other.num_classes} classes"
            )
        return PrototypeAccumulator(
            weighted_sum=self.weighted_sum + other.weighted_sum,
            weight_total=self.weight_total + other.weight_total,
            pixel_count=self.pixel_count + other.pixel_count,
        )

    def copy(self) -> "PrototypeAccumulator":
        return PrototypeAccumulator(
            weighted_sum=self.weighted_sum.copy(),
            weight_total=self.weight_total.copy(),
            pixel_count=self.pixel_count.copy(),
        )


def accumulate(acc: PrototypeAccumulator, prob_map: ProbMap) -> PrototypeAccumulator:
    """Single-pass accumulation of one map; mutates and returns ``acc``."""
    return acc.update(prob_map)


def merge(a: PrototypeAccumulator, b: PrototypeAccumulator) -> PrototypeAccumulator:
    return a.merge(b)


@dataclass(frozen=True)
class PrototypeSet:
    """Finalized C x C row-stochastic prototype matrix.

    Row c is the prototype of class c.  ``observed[c]`` is False when no
    pixel ever voted for c, in which case the row is the one-hot fallback.
    ``source_weight`` carries the accumulated vote weight for reporting.
    """

    prototypes: np.ndarray
    observed: np.ndarray
    source_weight: np.ndarray

    ROW_SUM_TOLERANCE = 1e-6

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def validate(self) -> "PrototypeSet":
        P = self.prototypes
        C = self.num_classes
        if P.shape != (C, C):
            raise DimensionError(f"prototype matrix must be square, got {P.shape}")
        if self.observed.shape != (C,) or self.source_weight.shape != (C,):
            raise DimensionError("observed/source_weight must be length-C vectors")
        if not np.all(np.isfinite(P)):
            raise ValidationError("prototypes contain non-finite values")
        if np.any(P < 0.0):
            raise ValidationError("prototypes contain negative values")
        row_err = np.abs(P.sum(axis=1) - 1.0)
        if row_err.max() > self.ROW_SUM_TOLERANCE:
            bad = int(np.argmax(row_err))
            raise ValidationError(
                f"prototype row {bad} sums to {P[bad].sum():.9f}, "
                f"outside 1 +/- {self.ROW_SUM_TOLERANCE:g}"
            )
        diag = np.diag(P)
        if np.any(P.max(axis=1) > diag):
            bad = int(np.argmax(P.max(axis=1) - diag))
            raise ValidationError(f"prototype row {bad} is not maximized at its own class")
        for c in range(C):
            if not self.observed[c]:
                onehot = np.zeros(C)
                onehot[c] = 1.0
                if not np.array_equal(P[c], onehot):
                    raise ValidationError(f"unobserved class {c} must carry a one-hot row")
        return self

    @classmethod
    def identity(cls, num_classes: int) -> "PrototypeSet":
        """One-hot prototypes; prediction with these is plain argmax."""
        return cls(
            prototypes=np.eye(num_classes, dtype=np.float64),
            observed=np.ones(num_classes, dtype=bool),
            source_weight=np.zeros(num_classes, dtype=np.float64),
        )


def finalize(acc: PrototypeAccumulator, space: LabelSpace | int) -> PrototypeSet:
    """Divide sums by weights; unvoted classes fall back to one-hot rows.

    ``space`` may be a full LabelSpace or a bare class count.
    """
    num_classes = space.num_classes if isinstance(space, LabelSpace) else int(space)
    if acc.num_classes != num_classes:
        raise DimensionError(
            f"accumulator has {acc.num_classes} classes, label space has {num_classes}"
        )
    C = acc.num_classes
    prototypes = np.eye(C, dtype=np.float64)
    observed = acc.weight_total > 0.0
    for c in range(C):
        if observed[c]:
            prototypes[c] = acc.weighted_sum[c] / acc.weight_total[c]
    return PrototypeSet(
        prototypes=prototypes,
        observed=observed,
        source_weight=acc.weight_total.copy(),
    )


def _nearest_scores(px: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """(N, C) scores ordered like squared Euclidean distance to each row.

    Uses ||mu||^2 - 1 - 2<p, mu> (squared distance minus the row-constant
    ||p||^2 + 1).  Subtracting 1 makes the quadratic term of a one-hot row
    exactly 0.0, so against one-hot prototypes the scores degrade to -2*p_c
    bit-exactly and nearest-prototype prediction ties match argmax ties.
    """
    row_term = np.einsum("cj,cj->c", prototypes, prototypes) - 1.0
    return row_term[None, :] - 2.0 * (px @ prototypes.T)


def calibrated_class(p, protos: PrototypeSet) -> int:
    """Class of the squared-Euclidean-nearest prototype; ties to lowest index."""
    v = _as_prob_vector(p)
    if v.shape[0] != protos.num_classes:
        raise DimensionError(
            f"vector has {v.shape[0]} classes, prototypes have {protos.num_classes}"
        )
    return int(np.argmin(_nearest_scores(v[None, :], protos.prototypes)[0]))


def predict_map(prob_map: ProbMap, protos: PrototypeSet | None = None) -> PredictionMap:
    """Per-pixel prediction: nearest prototype if given, argmax otherwise."""
    if prob_map.num_classes > 255:
        raise ValidationError("predictions are stored as 8-bit labels; C is capped at 255")
    px = prob_map.normalized_pixels()
    if protos is None:
        labels = np.argmax(px, axis=1) if px.shape[0] else np.zeros(0, dtype=np.int64)
    else:
        if protos.num_classes != prob_map.num_classes:
            raise DimensionError(
                f"map has {prob_map.num_classes} classes, "
                f"prototypes have {protos.num_classes}"
            )
        if px.shape[0] == 0:
            labels = np.zeros(0, dtype=np.int64)
        else:
            labels = np.argmin(_nearest_scores(px, protos.prototypes), axis=1)
    grid = labels.astype(np.uint8).reshape(prob_map.height, prob_map.width)
    return PredictionMap(labels=grid)
