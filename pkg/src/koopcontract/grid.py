"""Sample boxes and deterministic grid evaluation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class SampleBox:
    """Tensor grid over ``[lower, upper]`` with ``counts`` points per axis.

    An optional time interval adds a trailing time axis with ``time_count`` points.
    """

    lower: tuple
    upper: tuple
    counts: tuple
    time_interval: Optional[tuple] = None
    time_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not (len(self.lower) == len(self.upper) == len(self.counts)):
            raise DimensionError("box corners and counts must have equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("box requires lower < upper on every axis")
        if any(c < 2 for c in self.counts):
            raise ValueError("box requires at least 2 points per axis")
        if self.time_interval is not None:
            t0, t1 = self.time_interval
            if t0 >= t1 or self.time_count < 2:
                raise ValueError("time interval requires t0 < t1 and at least 2 time points")

    @classmethod
    def parse(cls, spec: str, time: str | None = None) -> "SampleBox":
        """``"lo1,hi1,c1;lo2,hi2,c2"``; ``time`` is ``"t0,t1,count"``."""
        lo, hi, cnt = [], [], []
        for part in spec.split(";"):
            if not part.strip():
                continue
            a, b, c = part.split(",")
            lo.append(float(a))
            hi.append(float(b))
            cnt.append(int(c))
        kw = {}
        if time:
            a, b, c = time.split(",")
            kw = dict(time_interval=(float(a), float(b)), time_count=int(c))
        return cls(tuple(lo), tuple(hi), tuple(cnt), **kw)

    @classmethod
    def cube(cls, lo: float, hi: float, count: int, n: int) -> "SampleBox":
        return cls((lo,) * n, (hi,) * n, (count,) * n)

    @property
    def dim(self) -> int:
        return len(self.counts)

    def axes(self) -> list:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    def points(self) -> np.ndarray:
        """Grid points in C order (last axis fastest), shape ``(P, n)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def times(self) -> np.ndarray:
        if self.time_interval is None:
            return np.zeros(1)
        return np.linspace(self.time_interval[0], self.time_interval[1], self.time_count)

    def random_points(self, count: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def describe(self) -> dict:
        d = {"lower": list(self.lower), "upper": list(self.upper), "counts": list(self.counts)}
        if self.time_interval is not None:
            d["time_interval"] = list(self.time_interval)
            d["time_count"] = self.time_count
        return d


def evaluate_chunked(fn: Callable, points: np.ndarray, *args, threads: int = 1,
                     chunk: int = 4096):
    """Apply a vectorized ``fn(points_chunk, *chunk_args)`` over ``points`` in chunks.

    Extra positional arrays are split alongside ``points``. Results are
    concatenated in point order, so the outcome does not depend on ``threads``.
    When a chunk raises :class:`DomainError` the offending point is located and
    attached to the error.
    """
    n = len(points)
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)] or [(0, 0)]

    def run(b):
        i, j = b
        sub = [a[i:j] for a in args]
        try:
            return fn(points[i:j], *sub)
        except DomainError as err:
            for k in range(i, j):
                try:
                    fn(points[k:k + 1], *[a[k:k + 1] for a in args])
                except DomainError:
                    raise DomainError(str(err), point=points[k]) from None
            raise

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(len(parts[0])))
    return np.concatenate(parts)


def first_argmax(values: np.ndarray) -> int:
    """Index of the maximum; ties resolve to the smallest index (C-order grid index)."""
    return int(np.argmax(values))
