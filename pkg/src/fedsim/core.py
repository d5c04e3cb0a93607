"""Numeric and stochastic primitives shared by every other module.

Provides a splittable counter-based random source (`Rng`), Dirichlet
sampling built on it, and the flat named-segment parameter vector
(`ParamVector`) with the arithmetic the fusion strategies need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleShape, InvalidArgument, NumericError

_MASK64 = (1 << 64) - 1
_DOUBLE_SCALE = 2.0 ** -53

# Fractional bits of pi; fixed domain-separation constant for hash64.
_HASH_SEED = 0x243F6A8885A308D3


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fnv1a64(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def hash64(*fields: int | str) -> int:
    """Mix integers and strings into a stable 64-bit value.

    Pure integer arithmetic, so results match across platforms and
    processes. Used to derive RNG sub-stream ids and per-run seeds.
    """
    h = _HASH_SEED
    for f in fields:
        v = _fnv1a64(f) if isinstance(f, str) else int(f) & _MASK64
        h = _splitmix64(h ^ v)
    return h


class Rng:
    """Deterministic splittable random source.

    Wraps a counter-based Philox stream keyed by (seed, stream). All
    distributions are derived from the raw 64-bit output with fixed
    algorithms, so a given (seed, stream) replays the same sequence on
    any platform. Distinct sub-streams are independent and may be used
    concurrently; a single instance is not thread-safe.
    """

    _BLOCK = 1024

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    def substream(self, *fields: int | str) -> "Rng":
        """Derive an independent stream from (this stream, fields)."""
        return Rng(self.seed, hash64(self.stream, *fields))

    def _raw(self, n: int) -> np.ndarray:
        """Next n words of the raw 64-bit stream."""
        avail = len(self._buf) - self._pos
        if n <= avail:
            out = self._buf[self._pos : self._pos + n]
            self._pos += n
            return out
        parts = [self._buf[self._pos :]]
        need = n - avail
        fresh = self._bitgen.random_raw(max(need, self._BLOCK))
        parts.append(fresh[:need])
        self._buf = fresh
        self._pos = need
        return np.concatenate(parts) if avail else fresh[:need]

    def uniform(self, size: int | None = None):
        """Uniform doubles in [0, 1): scalar when size is None."""
        if size is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * _DOUBLE_SCALE
        u = (self._raw(int(size)) >> np.uint64(11)).astype(np.float64)
        return u * _DOUBLE_SCALE

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via masked rejection."""
        if n <= 0:
            raise InvalidArgument(f"randbelow requires n >= 1, got {n}")
        mask = (1 << (n - 1).bit_length()) - 1 if n > 1 else 0
        while True:
            v = int(self._raw(1)[0]) & mask
            if v < n:
                return v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        arr = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            arr[i], arr[j] = arr[j], arr[i]
        return arr

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct values from range(n), sorted ascending."""
        if not 0 <= k <= n:
            raise InvalidArgument(f"cannot sample {k} of {n}")
        arr = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.randbelow(n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return np.sort(arr[:k])

    def normal(self, size: int | None = None):
        """Standard normals via the Marsaglia polar method.

        Only uniforms, sqrt and log enter the computation, keeping the
        sequence a pure function of the raw stream.
        """
        if size is None:
            return self._normal_scalar()
        n = int(size)
        out = np.empty(n, dtype=np.float64)
        filled = 0
        while filled < n:
            m = max((n - filled + 1) // 2, 32)
            u = self.uniform(2 * m) * 2.0 - 1.0
            x, y = u[:m], u[m:]
            s = x * x + y * y
            ok = (s > 0.0) & (s < 1.0)
            f = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
            pair = np.empty(2 * int(ok.sum()))
            pair[0::2] = x[ok] * f
            pair[1::2] = y[ok] * f
            take = min(len(pair), n - filled)
            out[filled : filled + take] = pair[:take]
            filled += take
        return out

    def _normal_scalar(self) -> float:
        while True:
            x = self.uniform() * 2.0 - 1.0
            y = self.uniform() * 2.0 - 1.0
            s = x * x + y * y
            if 0.0 < s < 1.0:
                return x * math.sqrt(-2.0 * math.log(s) / s)

    def gamma(self, alpha: float) -> float:
        """One Gamma(alpha, 1) draw, Marsaglia-Tsang squeeze method.

        For alpha < 1 draws Gamma(alpha+1) and applies the u^(1/alpha)
        boost, so the sampler is exact for every alpha > 0.
        """
        if alpha <= 0.0:
            raise InvalidArgument(f"gamma requires alpha > 0, got {alpha}")
        if alpha < 1.0:
            g = self._gamma_ge1(alpha + 1.0)
            u = self.uniform()
            return g * u ** (1.0 / alpha)
        return self._gamma_ge1(alpha)

    def _gamma_ge1(self, alpha: float) -> float:
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self._normal_scalar()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v


PROB_TOL = 1e-9


def assert_prob_vector(p: np.ndarray) -> None:
    """Raise unless p is a probability vector (entries >= 0, sum 1)."""
    if np.any(p < 0.0):
        raise InvalidArgument("probability vector has negative entries")
    if abs(float(p.sum()) - 1.0) > PROB_TOL:
        raise InvalidArgument(f"probability vector sums to {p.sum()!r}, not 1")


def dirichlet_sample(rng: Rng, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet(alpha, ..., alpha) draw of length k.

    k independent Gamma(alpha, 1) draws normalized by their sum.
    """
    if alpha <= 0.0:
        raise InvalidArgument(f"dirichlet requires alpha > 0, got {alpha}")
    if k < 1:
        raise InvalidArgument(f"dirichlet requires k >= 1, got {k}")
    for _ in range(100):
        g = np.array([rng.gamma(alpha) for _ in range(k)])
        total = float(g.sum())
        if total > 0.0:
            p = g / total
            assert_prob_vector(p)
            return p
    raise NumericError("dirichlet draw underflowed to zero 100 times")


@dataclass(frozen=True)
class Segment:
    """One contiguous named slice of a ParamVector."""

    name: str
    offset: int
    length: int


Layout = tuple[Segment, ...]


def make_layout(sizes: list[tuple[str, int]]) -> Layout:
    offset = 0
    segs = []
    for name, length in sizes:
        segs.append(Segment(name, offset, length))
        offset += length
    return tuple(segs)


class ParamVector:
    """Flat float64 parameter vector with a named-segment layout.

    Immutable: the backing array is marked read-only at construction,
    and every public operation returns a new vector. Construction
    checks the layout is contiguous and every value finite.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        offset = 0
        for seg in layout:
            if seg.offset != offset or seg.length < 0:
                raise IncompatibleShape(f"segment {seg.name} is not contiguous")
            offset += seg.length
        if offset != arr.shape[0] or arr.ndim != 1:
            raise IncompatibleShape(
                f"layout covers {offset} values, array has shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in segment {first_bad_segment(arr, layout)}")
        arr = arr.copy() if not arr.flags.owndata or arr.flags.writeable else arr
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "layout", tuple(layout))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("ParamVector is immutable")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and self.layout == other.layout
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        names = ",".join(s.name for s in self.layout)
        return f"ParamVector(len={len(self)}, segments=[{names}])"

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length]
        raise InvalidArgument(f"no segment named {name!r}")

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(len(self)), self.layout)


def first_bad_segment(arr: np.ndarray, layout: Layout) -> str:
    for seg in layout:
        if not np.all(np.isfinite(arr[seg.offset : seg.offset + seg.length])):
            return seg.name
    return "<none>"


def weighted_mean(vectors: list[ParamVector], weights) -> ParamVector:
    """Elementwise sum(w_k * v_k) / sum(w_k), layout preserved."""
    if not vectors:
        raise InvalidArgument("weighted_mean requires at least one vector")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(vectors),):
        raise InvalidArgument(f"{len(vectors)} vectors but {w.shape} weights")
    if np.any(w < 0.0):
        raise InvalidArgument("weights must be non-negative")
    total = float(w.sum())
    if total == 0.0:
        raise InvalidArgument("weights must not all be zero")
    # normalizing first keeps the single-vector case an exact identity
    w = w / total
    layout = vectors[0].layout
    acc = np.zeros(len(vectors[0]))
    for vec, wk in zip(vectors, w):
        if vec.layout != layout:
            raise IncompatibleShape("weighted_mean over mismatched layouts")
        acc += wk * vec.values
    return ParamVector(acc, layout)


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """a * x + y."""
    if x.layout != y.layout:
        raise IncompatibleShape("axpy over mismatched layouts")
    return ParamVector(a * x.values + y.values, x.layout)
