"""Tensor helpers and the seedable random source.

Tensors are plain ``numpy.ndarray`` objects (C order, so the flat view is
row-major). Two precisions are used: ``TRAIN_DTYPE`` (float32) for training
and ``CHECK_DTYPE`` (float64) for gradient checking.

``Rng`` wraps numpy's PCG64 bit generator (PCG XSL RR 128/64, 128-bit state
plus 128-bit increment, seeded through ``SeedSequence``). PCG64 output for a
given seed is stable across platforms and numpy releases, which is what makes
splits and initializations reproducible.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidRangeError, InvalidShapeError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {list(shape)}")
    return shape


def tensor_new(shape, fill: float = 0.0, dtype=TRAIN_DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), fill, dtype=dtype)


def ravel_index(multi_index, shape) -> int:
    return int(np.ravel_multi_index(tuple(multi_index), _check_shape(shape)))


def unravel_index(k: int, shape) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(k, _check_shape(shape)))


class Rng:
    """Single-owner deterministic random source.

    Workers never share an ``Rng``; they call :meth:`fork` which derives a
    fresh generator seeded with ``seed + worker_index``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, worker_index: int) -> "Rng":
        return Rng(self.seed + int(worker_index))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0, dtype=TRAIN_DTYPE) -> np.ndarray:
        if not lo < hi:
            raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
        shape = _check_shape(shape)
        u = self._gen.random(shape, dtype=np.float64)
        out = (lo + (hi - lo) * u).astype(dtype)
        # rounding can land exactly on hi; keep the half-open interval
        np.minimum(out, np.nextafter(dtype(hi), dtype(lo)), out=out)
        return out

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0, dtype=TRAIN_DTYPE) -> np.ndarray:
        if std < 0 or math.isnan(std):
            raise InvalidRangeError(f"std must be >= 0, got {std}")
        shape = _check_shape(shape)
        z = self._gen.standard_normal(shape, dtype=np.float64)
        return (mean + std * z).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)


def rng_uniform(rng: Rng, shape, lo: float, hi: float) -> np.ndarray:
    return rng.uniform(shape, lo, hi)


def rng_gaussian(rng: Rng, shape, mean: float, std: float) -> np.ndarray:
    return rng.gaussian(shape, mean, std)
