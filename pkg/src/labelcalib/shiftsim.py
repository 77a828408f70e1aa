"""Seeded synthetic domain-shift generator for desk-scale validation.

A scene is an i.i.d. grid of true class labels; the shift model turns each
true class y into an emitted probability vector by jittering a per-class
mean profile (row y of a row-stochastic mixing matrix) and renormalizing.
Fitting prototypes on one scene and predicting a disjoint scene makes the
calibration-versus-argmax comparison measurable without any real model.

Randomness scheme (fixed, portable): all draws come from the Philox4x64
counter-based generator.  The key is ``purpose * 2**64 + seed`` where
purpose 1 = scene labels and purpose 2 = shift jitter.  Pixel i (row-major
index h*W + w) owns counter blocks [i*K, (i+1)*K) of the keyed stream, each
block being 4 raw 64-bit words; K is 1 for scenes and ceil(ceil(C/2)/2) for
jitter.  Words map to uniforms as (w >> 11) * 2**-53 for label draws and
((w >> 11) + 0.5) * 2**-53 for jitter; jitter normals are Box-Muller pairs
over consecutive word pairs.  Nothing depends on library distribution code,
so identical seeds reproduce identical scenes anywhere Philox4x64 runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    ProbMap,
    PrototypeAccumulator,
    PrototypeSet,
    finalize,
    predict_map,
)
from .errors import ValidationError
from .evaluation import ConfusionMatrix, miou, update_confusion
from .labelspace import LabelSpace

_MASK64 = (1 << 64) - 1

_PURPOSE_SCENE = 1
_PURPOSE_JITTER = 2

ROLE_FIT_SCENE = 0
ROLE_HOLDOUT_SCENE = 1
ROLE_FIT_SHIFT = 2
ROLE_HOLDOUT_SHIFT = 3

MIXING_ROW_SUM_TOLERANCE = 1e-9


def derive_seed(seed: int, role: int) -> int:
    """Role-tagged sub-seed via the splitmix64 finalizer (documented, portable)."""
    x = (seed + (role + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def _raw_words(seed: int, purpose: int, num_pixels: int, blocks_per_pixel: int) -> np.ndarray:
    """Raw 64-bit words, reshaped so row i is pixel i's substream."""
    key = (purpose << 64) + (seed & _MASK64)
    bg = np.random.Philox(key=key)
    words = bg.random_raw(4 * blocks_per_pixel * num_pixels)
    return words.reshape(num_pixels, 4 * blocks_per_pixel)


@dataclass(frozen=True)
class ShiftModel:
    """Row-stochastic mean profiles plus log-normal jitter amplitude."""

    mixing: np.ndarray
    noise_scale: float
    seed: int

    def __post_init__(self) -> None:
        T = np.ascontiguousarray(self.mixing, dtype=np.float64)
        object.__setattr__(self, "mixing", T)
        if T.ndim != 2 or T.shape[0] != T.shape[1] or T.shape[0] < 1:
            raise ValidationError(f"mixing matrix must be square, got {T.shape}")
        if not np.all(np.isfinite(T)) or np.any(T < 0.0):
            raise ValidationError("mixing matrix entries must be finite and >= 0")
        err = np.abs(T.sum(axis=1) - 1.0).max()
        if err > MIXING_ROW_SUM_TOLERANCE:
            raise ValidationError(
                f"mixing rows deviate from sum 1 by {err:.3e} "
                f"(tolerance {MIXING_ROW_SUM_TOLERANCE:g})"
            )
        if not self.noise_scale >= 0.0:
            raise ValidationError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0 <= self.seed <= _MASK64:
            raise ValidationError("seed must fit in 64 unsigned bits")

    @property
    def num_classes(self) -> int:
        return self.mixing.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "mixing": [[float(v) for v in row] for row in self.mixing],
            "noise_scale": float(self.noise_scale),
            "seed": int(self.seed),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ShiftModel":
        return cls(
            mixing=np.asarray(d["mixing"], dtype=np.float64),
            noise_scale=float(d["noise_scale"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    """Scene geometry plus the class-frequency distribution to sample from."""

    width: int
    height: int
    class_frequencies: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        freqs = np.ascontiguousarray(self.class_frequencies, dtype=np.float64)
        object.__setattr__(self, "class_frequencies", freqs)
        if self.width < 1 or self.height < 1:
            raise ValidationError("scene dimensions must be >= 1")
        if freqs.ndim != 1 or freqs.shape[0] < 1:
            raise ValidationError("class_frequencies must be a 1-D distribution")
        if not np.all(np.isfinite(freqs)) or np.any(freqs < 0.0):
            raise ValidationError("class frequencies must be finite and >= 0")
        if abs(freqs.sum() - 1.0) > 1e-9:
            raise ValidationError(f"class frequencies sum to {freqs.sum():.12f}, not 1")
        if freqs.shape[0] > 255:
            raise ValidationError("simulator labels are uint8; C is capped at 255")
        if not 0 <= self.seed <= _MASK64:
            raise ValidationError("seed must fit in 64 unsigned bits")

    @property
    def num_classes(self) -> int:
        return self.class_frequencies.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "class_frequencies": [float(v) for v in self.class_frequencies],
            "seed": int(self.seed),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            class_frequencies=np.asarray(d["class_frequencies"], dtype=np.float64),
            seed=int(d["seed"]),
        )


def gen_scene(spec: SceneSpec) -> np.ndarray:
    """Draw an (H, W) uint8 label grid, one independent draw per pixel."""
    n = spec.height * spec.width
    words = _raw_words(spec.seed, _PURPOSE_SCENE, n, 1)[:, 0]
    u = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
    edges = np.cumsum(spec.class_frequencies)
    labels = np.searchsorted(edges, u, side="right")
    np.minimum(labels, spec.num_classes - 1, out=labels)
    return labels.astype(np.uint8).reshape(spec.height, spec.width)


def apply_shift(gt: np.ndarray, model: ShiftModel) -> ProbMap:
    """Emit a probability map for a label grid under the shift model.

    Pixel of true class y gets normalize(T[y] * exp(sigma * z)) with z its
    per-component standard normals; sigma = 0 emits row y verbatim.
    """
    grid = np.asarray(gt)
    if grid.ndim != 2:
        raise ValidationError(f"ground truth grid must be (H, W), got {grid.shape}")
    C = model.num_classes
    if np.any(grid >= C):
        raise ValidationError("ground truth grid has labels outside the mixing matrix")
    H, W = grid.shape
    flat = grid.reshape(-1).astype(np.int64)
    profiles = model.mixing[flat]
    if model.noise_scale == 0.0:
        pixels = profiles
    else:
        n = flat.shape[0]
        pairs = (C + 1) // 2
        blocks = (2 * pairs + 3) // 4
        words = _raw_words(model.seed, _PURPOSE_JITTER, n, blocks)
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        u1 = u[:, 0 : 2 * pairs : 2]
        u2 = u[:, 1 : 2 * pairs : 2]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty((n, 2 * pairs), dtype=np.float64)
        z[:, 0::2] = radius * np.cos(2.0 * np.pi * u2)
        z[:, 1::2] = radius * np.sin(2.0 * np.pi * u2)
        pixels = profiles * np.exp(model.noise_scale * z[:, :C])
        pixels = pixels / pixels.sum(axis=1, keepdims=True)
    return ProbMap.from_array(pixels.T.reshape(C, H, W))


def confusion_mixing(num_classes: int, diagonal: float, confuser: float) -> np.ndarray:
    """Mixing matrix with a systematic confuser: row y puts ``diagonal`` on y,
    ``confuser`` on (y+1) mod C, and spreads the rest uniformly."""
    C = num_classes
    if C < 3:
        raise ValidationError("confusion mixing needs at least 3 classes")
    rest = (1.0 - diagonal - confuser) / (C - 2)
    if diagonal < 0 or confuser < 0 or rest < 0:
        raise ValidationError("diagonal/confuser masses must fit a distribution")
    T = np.full((C, C), rest, dtype=np.float64)
    for y in range(C):
        T[y, y] = diagonal
        T[y, (y + 1) % C] = confuser
    return T


@dataclass
class ExperimentReport:
    """Holdout metrics for one fit/evaluate round, plus the learned prototypes."""

    scene: SceneSpec
    shift: ShiftModel
    holdout_fraction: float
    argmax_accuracy: float
    calibrated_accuracy: float
    argmax_miou: float
    calibrated_miou: float
    flip_count: int
    holdout_pixels: int
    prototypes: PrototypeSet

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "scene": self.scene.to_json_dict(),
            "shift": self.shift.to_json_dict(),
            "holdout_fraction": self.holdout_fraction,
            "argmax_accuracy": self.argmax_accuracy,
            "calibrated_accuracy": self.calibrated_accuracy,
            "argmax_miou": self.argmax_miou,
            "calibrated_miou": self.calibrated_miou,
            "flip_count": self.flip_count,
            "holdout_pixels": self.holdout_pixels,
            "prototypes": [[float(v) for v in row] for row in self.prototypes.prototypes],
            "prototype_observed": [bool(v) for v in self.prototypes.observed],
        }


def split_heights(height: int, holdout_fraction: float) -> tuple[int, int]:
    """(fit rows, holdout rows); raises on degenerate splits."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValidationError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    hold = round(height * holdout_fraction)
    fit = height - hold
    if fit < 1 or hold < 1:
        raise ValidationError(
            f"degenerate split: {fit} fit rows / {hold} holdout rows from height {height}"
        )
    return fit, hold


def run_experiment(
    spec: SceneSpec, model: ShiftModel, holdout_fraction: float
) -> ExperimentReport:
    """Fit prototypes on one generated scene, evaluate on a disjoint one.

    Sub-seeds for the two scenes and their jitter streams are derived from
    spec.seed / model.seed with fixed role tags, so the report is a pure
    function of (spec, model, holdout_fraction).
    """
    if spec.num_classes != model.num_classes:
        raise ValidationError(
            f"scene has {spec.num_classes} classes, shift model has {model.num_classes}"
        )
    C = spec.num_classes
    fit_rows, hold_rows = split_heights(spec.height, holdout_fraction)

    fit_spec = replace(spec, height=fit_rows, seed=derive_seed(spec.seed, ROLE_FIT_SCENE))
    hold_spec = replace(spec, height=hold_rows, seed=derive_seed(spec.seed, ROLE_HOLDOUT_SCENE))
    fit_shift = replace(model, seed=derive_seed(model.seed, ROLE_FIT_SHIFT))
    hold_shift = replace(model, seed=derive_seed(model.seed, ROLE_HOLDOUT_SHIFT))

    fit_map = apply_shift(gen_scene(fit_spec), fit_shift)
    protos = finalize(PrototypeAccumulator.empty(C).update(fit_map), C)

    gt_hold = gen_scene(hold_spec)
    hold_map = apply_shift(gt_hold, hold_shift)
    pred_argmax = predict_map(hold_map)
    pred_calibrated = predict_map(hold_map, protos)

    space = LabelSpace.generic(C)
    cm_argmax = update_confusion(
        ConfusionMatrix.empty(C), pred_argmax, gt_hold, space.ignore_index
    )
    cm_calibrated = update_confusion(
        ConfusionMatrix.empty(C), pred_calibrated, gt_hold, space.ignore_index
    )
    n = gt_hold.size
    return ExperimentReport(
        scene=spec,
        shift=model,
        holdout_fraction=holdout_fraction,
        argmax_accuracy=float((pred_argmax.labels == gt_hold).sum() / n),
        calibrated_accuracy=float((pred_calibrated.labels == gt_hold).sum() / n),
        argmax_miou=miou(cm_argmax, space.subset("all")),
        calibrated_miou=miou(cm_calibrated, space.subset("all")),
        flip_count=int((pred_calibrated.labels != pred_argmax.labels).sum()),
        holdout_pixels=int(n),
        prototypes=protos,
    )


def run_batch(
    spec: SceneSpec,
    model: ShiftModel,
    holdout_fraction: float,
    seeds: list[int],
) -> tuple[list[ExperimentReport], dict]:
    """One experiment per seed (seed replaces both scene and shift seeds),
    plus mean metrics across the batch."""
    if not seeds:
        raise ValidationError("seed list must not be empty")
    reports = [
        run_experiment(replace(spec, seed=s), replace(model, seed=s), holdout_fraction)
        for s in seeds
    ]
    def mean(xs):
        return float(sum(xs) / len(xs))

    def std(xs):
        mu = mean(xs)
        return float(math.sqrt(sum((x - mu) ** 2 for x in xs) / len(xs)))

    metrics = {
        "argmax_accuracy": [r.argmax_accuracy for r in reports],
        "calibrated_accuracy": [r.calibrated_accuracy for r in reports],
        "argmax_miou": [r.argmax_miou for r in reports],
        "calibrated_miou": [r.calibrated_miou for r in reports],
    }
    aggregate = {"seeds": [int(s) for s in seeds]}
    for name, values in metrics.items():
        aggregate[f"mean_{name}"] = mean(values)
        aggregate[f"std_{name}"] = std(values)
    aggregate["mean_accuracy_margin"] = (
        aggregate["mean_calibrated_accuracy"] - aggregate["mean_argmax_accuracy"]
    )
    return reports, aggregate


def run_sweep(
    spec: SceneSpec,
    model: ShiftModel,
    holdout_fraction: float,
    sigmas: list[float],
) -> list[ExperimentReport]:
    return [
        run_experiment(spec, replace(model, noise_scale=float(s)), holdout_fraction)
        for s in sigmas
    ]


def sweep_csv(reports: list[ExperimentReport]) -> str:
    lines = ["sigma,argmax_accuracy,calibrated_accuracy,argmax_miou,calibrated_miou"]
    for r in reports:
        lines.append(
            f"{r.shift.noise_scale:.17g},{r.argmax_accuracy:.17g},"
            f"{r.calibrated_accuracy:.17g},{r.argmax_miou:.17g},{r.calibrated_miou:.17g}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SimConfig:
    """Parsed simulate-subcommand configuration."""

    scene: SceneSpec
    shift: ShiftModel
    holdout_fraction: float
    seeds: tuple[int, ...] | None = None
    sweep_sigmas: tuple[float, ...] | None = None


def load_sim_config(path) -> SimConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        scene = SceneSpec.from_json_dict(doc["scene"])
        shift = ShiftModel.from_json_dict(doc["shift"])
        holdout = float(doc["holdout_fraction"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"invalid simulation config {path}: {exc}") from exc
    seeds = doc.get("seeds")
    sigmas = doc.get("sweep_sigmas")
    return SimConfig(
        scene=scene,
        shift=shift,
        holdout_fraction=holdout,
        seeds=tuple(int(s) for s in seeds) if seeds is not None else None,
        sweep_sigmas=tuple(float(s) for s in sigmas) if sigmas is not None else None,
    )
