"""Reduced floating-point precision emulated on binary32 bit patterns.

Values stay in IEEE-754 single precision. Precision is reduced by keeping
only the top ``mantissa_bits`` of the 23-bit fraction field; sign and
exponent are never touched, so dynamic range is that of binary32.

A "B-bit" format in the experiments means 1 sign + 8 exponent + (B - 9)
mantissa bits, e.g. the 16-bit filter keeps 7 mantissa bits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

FRACTION_BITS = 23
EXPONENT_BITS = 8
_EXP_MASK = np.uint32(0x7F800000)


class Rounding(str, enum.Enum):
    TRUNCATE = "truncate"
    STOCHASTIC = "stochastic"


class Granularity(str, enum.Enum):
    """When quantization is applied during training."""

    PER_BATCH = "batch"
    PER_LAYER = "layer"
    PER_OPERATION = "op"
    NONE = "none"


@dataclass(frozen=True)
class PrecisionConfig:
    mantissa_bits: int = FRACTION_BITS
    rounding: Rounding = Rounding.TRUNCATE
    granularity: Granularity = Granularity.PER_BATCH

    def __post_init__(self):
        if not 0 <= int(self.mantissa_bits) <= FRACTION_BITS:
            raise ValueError(f"mantissa_bits must be in [0, 23], got {self.mantissa_bits}")
        object.__setattr__(self, "mantissa_bits", int(self.mantissa_bits))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    @property
    def bitsize(self) -> int:
        return 1 + EXPONENT_BITS + self.mantissa_bits

    @classmethod
    def from_bitsize(cls, bitsize: int, **kw) -> "PrecisionConfig":
        return cls(mantissa_bits=bitsize - 1 - EXPONENT_BITS, **kw)

    @property
    def is_identity(self) -> bool:
        return self.granularity is Granularity.NONE or self.mantissa_bits == FRACTION_BITS


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only PRNG used anywhere in the package.

    Extra integers select an independent stream for the same seed, e.g.
    ``make_rng(seed, 1, epoch)`` for per-epoch shuffles.
    """
    if stream:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
    return np.random.Generator(np.random.PCG64(seed))


def mantissa_mask(mantissa_bits: int) -> np.uint32:
    drop = FRACTION_BITS - mantissa_bits
    return np.uint32((0xFFFFFFFF >> drop) << drop)


def _as_f32(x):
    return np.asarray(x, dtype=np.float32)


def _wrap(result, like):
    # scalars in, numpy float32 scalars out
    if np.ndim(like) == 0 and not isinstance(like, np.ndarray):
        return np.float32(result)
    return result


def truncate(x, mantissa_bits: int):
    """Zero the low ``23 - mantissa_bits`` fraction bits (rounds toward zero).

    NaN and infinities keep their exponent field, so they pass through; a NaN
    whose payload lives only in the dropped bits is left untouched.
    """
    a = _as_f32(x)
    if mantissa_bits >= FRACTION_BITS:
        return _wrap(a.copy(), x)
    bits = a.view(np.uint32)
    out = bits & mantissa_mask(mantissa_bits)
    special = (bits & _EXP_MASK) == _EXP_MASK
    if np.any(special):
        out = np.where(special, bits, out)
    return _wrap(out.view(np.float32), x)


def _grid_step(mantissa_bits: int) -> np.uint32:
    return np.uint32(1 << (FRACTION_BITS - mantissa_bits))


def _next_magnitude(t, mantissa_bits):
    """Grid point one step further from zero than ``t`` (``t`` on grid).

    Saturates at the largest finite grid value instead of stepping to inf.
    """
    bits = t.view(np.uint32)
    up = bits + _grid_step(mantissa_bits)
    overflow = (up & _EXP_MASK) == _EXP_MASK
    return np.where(overflow, bits, up).view(np.float32)


def grid_neighbors(x, mantissa_bits: int):
    """Adjacent grid values ``(lo, hi)`` with ``lo <= x <= hi``."""
    a = _as_f32(x)
    if not np.all(np.isfinite(a)):
        raise ValueError("grid_neighbors requires finite input")
    t = np.asarray(truncate(a, mantissa_bits), dtype=np.float32)
    on_grid = t == a
    away = _next_magnitude(t, mantissa_bits)
    neg = np.signbit(a)
    lo = np.where(on_grid | ~neg, t, away)
    hi = np.where(on_grid | neg, t, away)
    return _wrap(lo.astype(np.float32), x), _wrap(hi.astype(np.float32), x)


def stochastic_round(x, mantissa_bits: int, rng: np.random.Generator):
    """Round to ``hi`` with probability ``(x - lo) / (hi - lo)``, else ``lo``.

    The expectation equals ``x``. One uniform draw is consumed per element,
    on-grid elements included, so the stream position depends only on shape.
    """
    a = _as_f32(x)
    lo, hi = grid_neighbors(a, mantissa_bits)
    lo = np.asarray(lo, dtype=np.float32)
    hi = np.asarray(hi, dtype=np.float32)
    u = rng.random(a.shape)
    width = hi.astype(np.float64) - lo.astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_up = np.where(width > 0, (a.astype(np.float64) - lo) / width, 0.0)
    out = np.where(u < p_up, hi, lo).astype(np.float32)
    return _wrap(out, x)


def quantize(x, cfg: PrecisionConfig, rng: np.random.Generator | None = None):
    """Apply ``cfg``'s rounding to a scalar or array; identity for granularity none."""
    if cfg.is_identity:
        return _wrap(_as_f32(x).copy(), x)
    if cfg.rounding is Rounding.TRUNCATE:
        return truncate(x, cfg.mantissa_bits)
    if rng is None:
        raise ValueError("stochastic rounding needs an rng")
    a = _as_f32(x)
    if not np.all(np.isfinite(a)):
        # non-finite values pass through, finite ones are rounded
        out = a.copy()
        fin = np.isfinite(a)
        out[fin] = stochastic_round(a[fin], cfg.mantissa_bits, rng)
        return _wrap(out, x)
    return stochastic_round(x, cfg.mantissa_bits, rng)
