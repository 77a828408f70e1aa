from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from labelcalib import ProbMap, PrototypeAccumulator, finalize

FIXTURES = Path(__file__).parent / "fixtures"

# The four hand-worked pixels behind most worked examples: argmaxes are
# 0, 0, 1, 2 with weights 0.7, 0.6, 0.5, 0.7.
HAND_PIXELS = [
    (0.7, 0.2, 0.1),
    (0.6, 0.3, 0.1),
    (0.2, 0.5, 0.3),
    (0.1, 0.2, 0.7),
]


def pixels_to_map(pixels, height=1) -> ProbMap:
    """Pack a pixel list into a ProbMap, row-major."""
    arr = np.asarray(pixels, dtype=np.float64)
    n, C = arr.shape
    assert n % height == 0
    return ProbMap.from_array(arr.T.reshape(C, height, n // height))


@pytest.fixture
def hand_map() -> ProbMap:
    return pixels_to_map(HAND_PIXELS, height=2)


@pytest.fixture
def hand_protos(hand_map):
    acc = PrototypeAccumulator.empty(3)
    acc.update(hand_map)
    return finalize(acc, 3)


def random_prob_pixels(rng: np.random.Generator, n: int, C: int) -> np.ndarray:
    """(n, C) strictly positive rows summing to 1."""
    raw = rng.uniform(0.05, 1.0, size=(n, C))
    return raw / raw.sum(axis=1, keepdims=True)


def random_prob_map(rng: np.random.Generator, C: int, H: int, W: int) -> ProbMap:
    px = random_prob_pixels(rng, H * W, C)
    return ProbMap.from_array(px.T.reshape(C, H, W))
