"""Round-off error propagation through convolution stacks and the sigmoid head.

Forward model: every stored value ``x`` is replaced by ``x - eps`` (one shared
perturbation), layers are valid cross-correlations of constant tensors, and
the layer-``n`` output error is predicted to first order by ``T_n * eps`` with

    T_n = (prod_{i=0..n} M_i N_i W_i) * (sum_{i=0..n} 1 / W_i),

where ``M_0 = N_0 = 1`` and ``W_0 = I`` (the input magnitude). All oracles
run in float64 so the emulator's own rounding does not leak into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from reduced_precision.quant import truncate


class HypothesisError(ValueError):
    """The constant-stack model needs every magnitude to be nonzero."""


@dataclass(frozen=True)
class ConvStackModel:
    input_magnitude: float
    filters: tuple  # ((M_i, N_i, W_i), ...) for layers 1..n
    eps: float = 1e-6

    @classmethod
    def uniform(cls, n: int, m: int = 2, w: float = 1.0, input_magnitude: float = 1.0, eps: float = 1e-6):
        return cls(input_magnitude, tuple((m, m, w) for _ in range(n)), eps)

    @property
    def n(self) -> int:
        return len(self.filters)

    def with_eps(self, eps: float) -> "ConvStackModel":
        return ConvStackModel(self.input_magnitude, self.filters, eps)

    def magnitudes(self):
        """``[(M_i, N_i, W_i)]`` for i = 0..n, including the input as layer 0."""
        return [(1, 1, self.input_magnitude), *self.filters]

    def check(self):
        for i, (m, n, w) in enumerate(self.magnitudes()):
            if w == 0:
                raise HypothesisError(f"magnitude W_{i} is zero")
            if m < 1 or n < 1:
                raise ValueError(f"filter {i} has non-positive size {m}x{n}")


def predictor_coefficient(model: ConvStackModel) -> float:
    """``T_n``, the first-order sensitivity of the layer-n output to ``eps``."""
    model.check()
    prod = 1.0
    inv_sum = 0.0
    for m, n, w in model.magnitudes():
        prod *= m * n * w
        inv_sum += 1.0 / w
    return prod * inv_sum


def predicted_forward_error(model: ConvStackModel) -> float:
    return predictor_coefficient(model) * model.eps


def _conv_valid64(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    m, n = k.shape
    h, w = x.shape[0] - m + 1, x.shape[1] - n + 1
    out = np.zeros((h, w))
    for i in range(m):
        for j in range(n):
            out += x[i : i + h, j : j + w] * k[i, j]
    return out


def _input_size(model: ConvStackModel, margin: int = 1):
    h = 1 + 2 * margin + sum(m - 1 for m, _, _ in model.filters)
    w = 1 + 2 * margin + sum(n - 1 for _, n, _ in model.filters)
    return h, w


def _run_stack(inp: np.ndarray, kernels) -> np.ndarray:
    s = inp
    for k in kernels:
        if k.shape[0] > s.shape[0] or k.shape[1] > s.shape[1]:
            raise ValueError(f"kernel {k.shape} does not fit a {s.shape} map")
        s = _conv_valid64(s, k)
    return s


def _center(s: np.ndarray) -> float:
    return float(s[s.shape[0] // 2, s.shape[1] // 2])


def measured_forward_error(model: ConvStackModel) -> float:
    """Exact ``S_n - S~_n`` at the centre cell of a constant stack, in float64.

    The perturbed run subtracts ``eps`` from every input entry and every
    kernel entry; intermediate outputs are not perturbed again.
    """
    model.check()
    if model.n < 1:
        raise ValueError("need at least one conv layer")
    inp = np.full(_input_size(model), float(model.input_magnitude))
    kernels = [np.full((m, n), float(w)) for m, n, w in model.filters]
    exact = _run_stack(inp, kernels)
    eps = model.eps
    perturbed = _run_stack(inp - eps, [k - eps for k in kernels])
    return _center(exact) - _center(perturbed)


def truncation_forward_error(model: ConvStackModel, mantissa_bits: int) -> float:
    """Centre-cell error when input and kernels are truncated to binary32 grids.

    Reported alongside the shared-eps model; not an exact match for it, since
    real truncation error differs per value.
    """
    inp = np.full(_input_size(model), float(model.input_magnitude))
    kernels = [np.full((m, n), float(w)) for m, n, w in model.filters]
    exact = _run_stack(inp, kernels)
    tr = lambda a: np.asarray(truncate(a.astype(np.float32), mantissa_bits), dtype=np.float64)
    approx = _run_stack(tr(inp), [tr(k) for k in kernels])
    return _center(exact) - _center(approx)


@dataclass
class ScalingRow:
    n: int
    eps: float
    predicted: float
    measured: float
    ratio: float
    truncation_error: float = float("nan")


@dataclass
class ScalingReport:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)  # n -> fitted log-log slope over eps

    def ratios_within(self, tol: float, max_eps: float = 1e-6) -> bool:
        return all(abs(r.ratio - 1) < tol for r in self.rows if 0 < r.eps <= max_eps)


def loglog_slope(xs, ys) -> float:
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.abs(np.asarray(ys, float)))
    return float(np.polyfit(lx, ly, 1)[0])


def forward_error_scaling_report(base: ConvStackModel, eps_values, layer_counts,
                                 truncation_bits: int | None = 7) -> ScalingReport:
    """Sweep ``eps`` and depth; the first ``n`` filters of ``base`` are reused,
    its last filter repeated when more layers are requested."""
    report = ScalingReport()
    for n in layer_counts:
        filters = tuple(base.filters[min(i, len(base.filters) - 1)] for i in range(n))
        model = ConvStackModel(base.input_magnitude, filters)
        xs, ys = [], []
        for eps in eps_values:
            mdl = model.with_eps(eps)
            pred = predicted_forward_error(mdl)
            meas = measured_forward_error(mdl)
            ratio = meas / pred if pred != 0 else (1.0 if meas == 0 else math.inf)
            trunc = truncation_forward_error(mdl, truncation_bits) if truncation_bits is not None else float("nan")
            report.rows.append(ScalingRow(n, eps, pred, meas, ratio, trunc))
            if eps > 0:
                xs.append(eps)
                ys.append(meas)
        if len(xs) >= 2:
            report.slopes[n] = loglog_slope(xs, ys)
    return report


@dataclass(frozen=True)
class BackpropErrorCase:
    g: float
    y: float
    eps_y: float

    def __post_init__(self):
        if not 0.0 < self.y < 1.0:
            raise ValueError(f"sigmoid output y must lie in (0, 1), got {self.y}")


def backprop_error_expansion(case: BackpropErrorCase):
    """Perturbed output delta and its exact four-term expansion.

    ``exact = (g - e)(y - e)(1 - y + e)`` and the terms are
    ``g y (1 - y)``, ``(-g + 2gy - y + y^2) e``, ``(-g + 1 - 2y) e^2``, ``e^3``.
    Their sum equals ``exact`` identically.
    """
    g, y, e = case.g, case.y, case.eps_y
    exact = (g - e) * (y - e) * (1 - y + e)
    terms = (
        g * y * (1 - y),
        (-g + 2 * g * y - y + y * y) * e,
        (-g + 1 - 2 * y) * e * e,
        e * e * e,
    )
    return exact, terms


@dataclass(frozen=True)
class OutputErrorReport:
    literal: float  # y0 - (y - eps_y)
    stated: float  # g - eps_y
    discrepancy: float  # literal - stated = 2 * eps_y


def step1_output_error(y, y0, eps_y) -> OutputErrorReport:
    """Perturbed first backprop quantity ``g~`` under both sign conventions.

    With ``y~ = y - eps_y`` the literal value is ``g + eps_y``; the expansion
    above is written with ``g - eps_y``. Both are returned.
    """
    g = y0 - y
    literal = y0 - (y - eps_y)
    stated = g - eps_y
    return OutputErrorReport(literal, stated, literal - stated)
