"""Weight quantizers for 1 / 1.58 / 2 / 3 / 4-bit grids.

All functions take 2-D float32 weight matrices whose rows are output
channels. One-dimensional inputs are treated as a single channel.
Rounding is round-half-to-even everywhere (``np.rint``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

SUPPORTED_BITWIDTHS = (1, 1.58, 2, 3, 4)


class QuantError(ValueError):
    """Base class for quantizer errors."""


class AllZeroChannel(QuantError):
    """A channel has no nonzero weight, so its scale would be zero."""


class InvalidQuantSpec(QuantError):
    pass


class Kind(str, enum.Enum):
    ELASTIC_BINARY = "ElasticBinary"
    SEQ = "SEQ"
    LSQ = "LSQ"
    MINMAX_SYM = "MinMaxSym"
    MINMAX_ASYM = "MinMaxAsym"
    STATS_BINARY = "StatsBinary"
    STATS_TERNARY = "StatsTernary"


class Granularity(str, enum.Enum):
    PER_CHANNEL = "PerChannel"
    PER_TENSOR = "PerTensor"


_LEARNABLE_BITS = {
    Kind.ELASTIC_BINARY: (1,),
    Kind.SEQ: (1.58, 2),
    Kind.LSQ: (3, 4),
}


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, quantizer family and scale granularity.

    ``literal_ternary`` switches the 1.58-bit SEQ grid to the 4-level grid
    obtained by evaluating the stretched-elastic formula verbatim with k = 3.
    """

    bitwidth: float
    kind: Kind = None  # type: ignore[assignment]
    granularity: Granularity = Granularity.PER_CHANNEL
    literal_ternary: bool = False

    def __post_init__(self):
        if self.bitwidth not in SUPPORTED_BITWIDTHS:
            raise InvalidQuantSpec(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.bitwidth}")
        kind = self.kind
        if kind is None:
            kind = default_kind(self.bitwidth)
        kind = Kind(kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        allowed = _LEARNABLE_BITS.get(kind)
        if allowed is not None and self.bitwidth not in allowed:
            raise InvalidQuantSpec(f"{kind.value} requires bitwidth in {allowed}, got {self.bitwidth}")

    @classmethod
    def for_bits(cls, bitwidth, **kw) -> "QuantSpec":
        return cls(bitwidth=bitwidth, **kw)

    @property
    def learnable(self) -> bool:
        return self.kind in _LEARNABLE_BITS

    @property
    def levels(self) -> int:
        """Number of quantization levels k."""
        return 3 if self.bitwidth == 1.58 else 2 ** int(self.bitwidth)

    @property
    def qmin(self) -> int:
        """Lowest LSQ integer level n (only meaningful for 3/4-bit)."""
        return -(2 ** (int(self.bitwidth) - 1))

    @property
    def qmax(self) -> int:
        """Highest LSQ integer level p; 1 for bit widths of 2 and below."""
        if self.bitwidth <= 2:
            return 1
        return 2 ** (int(self.bitwidth) - 1) - 1


def default_kind(bitwidth) -> Kind:
    if bitwidth == 1:
        return Kind.ELASTIC_BINARY
    if bitwidth in (1.58, 2):
        return Kind.SEQ
    if bitwidth in (3, 4):
        return Kind.LSQ
    raise InvalidQuantSpec(f"unsupported bitwidth {bitwidth}")


@dataclass
class QuantOutput:
    """Result of a quantizer.

    ``w_q = alpha * w_hat + offset`` elementwise, where ``alpha`` and
    ``offset`` broadcast per channel. ``offset`` is only set by the
    asymmetric min-max quantizer.
    """

    w_q: np.ndarray
    w_hat: np.ndarray
    in_range_mask: np.ndarray
    alpha: np.ndarray | None = None
    offset: np.ndarray | None = None


@dataclass
class GradPair:
    d_w: np.ndarray
    d_alpha: np.ndarray


def as_matrix(w, name="w") -> np.ndarray:
    m = np.asarray(w, dtype=np.float32)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def _col(alpha, rows) -> np.ndarray:
    """Scales as an (rows or 1, 1) float32 column for broadcasting."""
    a = np.asarray(alpha, dtype=np.float32).reshape(-1)
    if a.size not in (1, rows):
        raise ValueError(f"alpha has {a.size} entries for a matrix with {rows} rows")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("alpha must be finite and strictly positive")
    return a[:, None]


def _sign(x: np.ndarray) -> np.ndarray:
    # Sign(0) := +1
    return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))


def _reduce(a: np.ndarray, fn, per_channel: bool) -> np.ndarray:
    if per_channel:
        return fn(a, axis=1)
    return np.atleast_1d(fn(a))


# --------------------------------------------------------------------------
# scale initialisation
# --------------------------------------------------------------------------

def init_scale(w, spec: QuantSpec) -> np.ndarray:
    """Initial scales for the learnable quantizers.

    1-bit uses the mean absolute weight, which is the L2-optimal scale for
    ``alpha * Sign(w)``. 1.58/2-bit use max|w|; 3/4-bit use max|w| / p.

    Raises:
        AllZeroChannel: if any channel (or the whole tensor) is all zeros.
    """
    w = as_matrix(w)
    per_channel = spec.granularity is Granularity.PER_CHANNEL
    mag = np.abs(w)
    if spec.bitwidth == 1:
        alpha = _reduce(mag.astype(np.float64), np.mean, per_channel)
    else:
        alpha = _reduce(mag, np.max, per_channel).astype(np.float64)
        if spec.bitwidth in (3, 4):
            alpha = alpha / spec.qmax
    if np.any(alpha == 0):
        bad = int(np.flatnonzero(alpha == 0)[0])
        raise AllZeroChannel(f"channel {bad} is all zeros")
    return alpha.astype(np.float32)


# --------------------------------------------------------------------------
# stats-based and min-max baselines
# --------------------------------------------------------------------------

def quantize_minmax_sym(w, bits: int, per_channel: bool = True) -> QuantOutput:
    """Symmetric round-to-nearest with alpha = max|w| / (2^(bits-1) - 1).

    All-zero channels get alpha = 1 and quantize to zero.
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    w = as_matrix(w)
    qmax = 2 ** (bits - 1) - 1
    peak = _reduce(np.abs(w), np.max, per_channel)
    alpha = np.where(peak > 0, peak / np.float32(qmax), np.float32(1.0)).astype(np.float32)
    a = alpha[:, None]
    w_hat = np.clip(np.rint(w / a), -qmax, qmax).astype(np.float32)
    return QuantOutput(a * w_hat, w_hat, np.ones(w.shape, dtype=bool), alpha=alpha)


def quantize_minmax_asym(w, bits: int, per_channel: bool = True) -> QuantOutput:
    """Asymmetric round-to-nearest with beta = min(w) and 2^bits codes.

    Constant channels are returned unchanged (alpha = 1, code 0).
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    w = as_matrix(w)
    top = 2**bits - 1
    hi = _reduce(w, np.max, per_channel)
    lo = _reduce(w, np.min, per_channel)
    span = hi - lo
    alpha = np.where(span > 0, span / np.float32(top), np.float32(1.0)).astype(np.float32)
    a, beta = alpha[:, None], lo[:, None].astype(np.float32)
    codes = np.clip(np.rint((w - beta) / a), 0, top).astype(np.float32)
    w_q = (a * codes + beta).astype(np.float32)
    return QuantOutput(w_q, codes, np.ones(w.shape, dtype=bool), alpha=alpha, offset=lo.astype(np.float32))


def quantize_stats_binary(w, per_channel: bool = True) -> QuantOutput:
    """``alpha * Sign(w)`` with alpha = mean|w|."""
    w = as_matrix(w)
    alpha = _reduce(np.abs(w).astype(np.float64), np.mean, per_channel)
    if np.any(alpha == 0):
        raise AllZeroChannel(f"channel {int(np.flatnonzero(alpha == 0)[0])} is all zeros")
    alpha = alpha.astype(np.float32)
    w_hat = _sign(w)
    return QuantOutput(alpha[:, None] * w_hat, w_hat, np.ones(w.shape, dtype=bool), alpha=alpha)


def quantize_stats_ternary(w, per_channel: bool = True) -> QuantOutput:
    """Threshold ternarization.

    delta = 0.7 * mean|w|; weights with |w| > delta keep their sign and the
    scale is the mean magnitude of those survivors. A channel with no
    survivors quantizes to zero with alpha = 1.
    """
    w = as_matrix(w)
    mag = np.abs(w).astype(np.float64)
    delta = 0.7 * _reduce(mag, np.mean, per_channel)
    if per_channel:
        keep = mag > delta[:, None]
        count = keep.sum(axis=1)
        total = np.where(keep, mag, 0.0).sum(axis=1)
    else:
        keep = mag > delta[0]
        count = np.atleast_1d(keep.sum())
        total = np.atleast_1d(np.where(keep, mag, 0.0).sum())
    alpha = np.where(count > 0, total / np.maximum(count, 1), 1.0).astype(np.float32)
    w_hat = (_sign(w) * keep).astype(np.float32)
    return QuantOutput(alpha[:, None] * w_hat, w_hat, keep, alpha=alpha)


# --------------------------------------------------------------------------
# learnable-scale quantizers
# --------------------------------------------------------------------------

def binary_forward(w, alpha) -> QuantOutput:
    w = as_matrix(w)
    a = _col(alpha, w.shape[0])
    u = w / a
    w_hat = _sign(w)
    return QuantOutput(a * w_hat, w_hat, np.abs(u) < 1, alpha=a[:, 0])


def seq_forward(w, alpha, k: int, literal: bool = False) -> QuantOutput:
    """Stretched elastic quantizer for ternary (k=3) and 2-bit (k=4).

    With k=4 the levels are {-3/4, -1/4, 1/4, 3/4}. With k=3 the default grid
    is the balanced {-2/3, 0, 2/3}; ``literal=True`` instead evaluates the
    mid-rise formula as written, which yields {-1, -1/3, 1/3, 1}.
    """
    if k not in (3, 4):
        raise InvalidQuantSpec(f"SEQ supports k in (3, 4), got {k}")
    w = as_matrix(w)
    a = _col(alpha, w.shape[0])
    u = w / a
    clipped = np.clip(u, np.float32(-1), np.float32(1))
    if k == 3 and not literal:
        r = np.clip(np.rint(clipped * np.float32(1.5)), -1, 1)
        w_hat = r / np.float32(1.5)
    else:
        lo, hi = -((k + 1) // 2), -(-k // 2) - 1
        r = np.clip(np.rint(clipped * np.float32(k / 2) - np.float32(0.5)), lo, hi)
        w_hat = (r + np.float32(0.5)) / np.float32(k) * np.float32(2)
    w_hat = w_hat.astype(np.float32)
    return QuantOutput(a * w_hat, w_hat, np.abs(u) < 1, alpha=a[:, 0])


def lsq_forward(w, alpha, bitwidth: int) -> QuantOutput:
    if bitwidth not in (3, 4):
        raise InvalidQuantSpec(f"LSQ supports 3 or 4 bits, got {bitwidth}")
    w = as_matrix(w)
    a = _col(alpha, w.shape[0])
    n = np.float32(-(2 ** (bitwidth - 1)))
    p = np.float32(2 ** (bitwidth - 1) - 1)
    u = w / a
    w_hat = np.clip(np.rint(np.clip(u, n, p)), n, p).astype(np.float32)
    return QuantOutput(a * w_hat, w_hat, (u > n) & (u < p), alpha=a[:, 0])


def _check_alpha_count(w: np.ndarray, alpha, spec: QuantSpec):
    n = np.asarray(alpha).size
    expected = w.shape[0] if spec.granularity is Granularity.PER_CHANNEL else 1
    if n != expected:
        raise ValueError(f"{spec.granularity.value} expects {expected} scales, got {n}")


def paretoq_forward(w, alpha, spec: QuantSpec) -> QuantOutput:
    """Dispatch to the quantizer the spec's bit width calls for."""
    if not spec.learnable:
        raise InvalidQuantSpec(f"{spec.kind.value} has no learnable scale")
    w = as_matrix(w)
    _check_alpha_count(w, alpha, spec)
    if spec.bitwidth == 1:
        return binary_forward(w, alpha)
    if spec.bitwidth in (1.58, 2):
        return seq_forward(w, alpha, spec.levels, literal=spec.literal_ternary)
    return lsq_forward(w, alpha, int(spec.bitwidth))


def lsq_grad_scale(spec: QuantSpec, elements_per_channel: int) -> float:
    """1 / sqrt(N * p), the usual LSQ scale-gradient normaliser."""
    return 1.0 / math.sqrt(elements_per_channel * spec.qmax)


def alpha_partial(w_hat: np.ndarray, u: np.ndarray, mask: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Elementwise straight-through d(w_q)/d(alpha).

    ``u`` is w / alpha and ``mask`` the in-range indicator. Taking ``w_hat``
    as an argument lets callers substitute an unrounded surrogate.
    """
    if spec.bitwidth == 1:
        return _sign(u)
    return w_hat - u * mask


def paretoq_backward(w, alpha, spec: QuantSpec, upstream, grad_scale: float | None = None) -> GradPair:
    """Straight-through gradients for weights and per-channel scales.

    Args:
        w: real-valued weights.
        alpha: current scales.
        spec: quantizer spec (must be learnable).
        upstream: dL/dw_q, same shape as ``w``.
        grad_scale: multiplier on the scale gradient. ``None`` selects
            ``lsq_grad_scale``; pass 1.0 for the raw sum.
    """
    w = as_matrix(w)
    g_out = as_matrix(upstream, "upstream")
    if g_out.shape != w.shape:
        raise ValueError(f"upstream shape {g_out.shape} does not match weights {w.shape}")
    out = paretoq_forward(w, alpha, spec)
    a = _col(alpha, w.shape[0])
    u = w / a
    mask = out.in_range_mask
    d_w = np.where(mask, g_out, np.float32(0)).astype(np.float32)
    per_elem = alpha_partial(out.w_hat, u, mask, spec)
    contrib = g_out.astype(np.float64) * per_elem
    per_channel = spec.granularity is Granularity.PER_CHANNEL
    if per_channel:
        d_alpha = contrib.sum(axis=1)
        n_ch = w.shape[1]
    else:
        d_alpha = np.atleast_1d(contrib.sum())
        n_ch = w.size
    if grad_scale is None:
        grad_scale = lsq_grad_scale(spec, max(n_ch, 1))
    return GradPair(d_w, (grad_scale * d_alpha).astype(np.float32))


def fake_quant(w, alpha, spec: QuantSpec) -> np.ndarray:
    return paretoq_forward(w, alpha, spec).w_q


def level_set(spec: QuantSpec) -> np.ndarray:
    """Sorted normalized levels the spec's quantizer can emit."""
    if spec.bitwidth == 1:
        vals = [-1.0, 1.0]
    elif spec.bitwidth == 1.58 and not spec.literal_ternary:
        vals = np.array([-1, 0, 1], dtype=np.float32) / np.float32(1.5)
    elif spec.bitwidth in (1.58, 2):
        k = spec.levels
        r = np.arange(-((k + 1) // 2), -(-k // 2), dtype=np.float32)
        vals = (r + np.float32(0.5)) / np.float32(k) * np.float32(2)
    else:
        vals = np.arange(spec.qmin, spec.qmax + 1)
    return np.asarray(vals, dtype=np.float32)
