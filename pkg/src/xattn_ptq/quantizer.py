"""Uniform affine fake-quantization.

    x_q = clamp(round(x / s) + z, 0, 2^k - 1)
    x_hat = s * (x_q - z)

Rounding is half-to-even everywhere (``np.rint``). Weights are quantized
per output channel (last axis of an ``(d_in, d_out)`` weight), activations
per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEGENERATE_SCALE = 1e-8
GRAD_MODES = ("ste", "exact")


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    axis: int | None = None  # None: per-tensor
    symmetric: bool = False

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64)) if self.axis is not None \
            else np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.int64).reshape(scale.shape)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)
        if int(self.bits) != self.bits or self.bits < 2:
            raise ContractError(f"bits must be an integer >= 2, got {self.bits}")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ContractError("scale entries must be positive and finite")
        if np.any(zp < 0) or np.any(zp > self.qmax):
            raise ContractError(f"zero_point outside [0, {self.qmax}]")
        if self.axis is None and scale.ndim != 0:
            raise ContractError("per-tensor params need a scalar scale")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        return _bcast(self.scale, self.axis, ndim), _bcast(self.zero_point, self.axis, ndim)


def _bcast(v: np.ndarray, axis: int | None, ndim: int) -> np.ndarray:
    if axis is None:
        return v
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def quantize(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s, z = p.broadcast(x.ndim)
    return np.clip(np.rint(x / s) + z, 0, p.qmax).astype(np.int64)


def dequantize(xq, p: QuantParams) -> np.ndarray:
    xq = np.asarray(xq)
    if np.any(xq < 0) or np.any(xq > p.qmax):
        raise ContractError(f"integer codes outside [0, {p.qmax}]")
    s, z = p.broadcast(xq.ndim)
    return s * (xq - z)


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


@dataclass
class CalibStats:
    """Running min/max per quantization group (one group unless ``axis`` is set)."""

    axis: int | None = None
    min: np.ndarray | None = None
    max: np.ndarray | None = None
    count: int = 0

    def observe(self, x) -> "CalibStats":
        x = np.asarray(x, dtype=np.float64)
        if self.axis is None:
            lo, hi = np.min(x), np.max(x)
        else:
            ax = self.axis % x.ndim
            other = tuple(i for i in range(x.ndim) if i != ax)
            lo, hi = np.min(x, axis=other), np.max(x, axis=other)
        self.min = lo if self.min is None else np.minimum(self.min, lo)
        self.max = hi if self.max is None else np.maximum(self.max, hi)
        self.count += 1
        return self


def calibrate(stats: CalibStats, bits: int, symmetric: bool = False) -> QuantParams:
    """Min-max initialisation of scale and zero-point.

    The observed range is widened to contain zero so that zero is exactly
    representable.
    """
    if stats.count < 1 or stats.min is None:
        raise ContractError("cannot calibrate from empty statistics")
    lo = np.minimum(np.asarray(stats.min, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(stats.max, dtype=np.float64), 0.0)
    qmax = 2**bits - 1
    degenerate = hi == lo
    if symmetric:
        amax = np.maximum(np.abs(lo), np.abs(hi))
        degenerate = amax == 0
        scale = np.where(degenerate, DEGENERATE_SCALE, amax / (2 ** (bits - 1) - 1))
        zp = np.where(degenerate, 0, 2 ** (bits - 1))
    else:
        width = np.where(degenerate, 1.0, hi - lo)
        scale = np.where(degenerate, DEGENERATE_SCALE, width / qmax)
        zp = np.where(degenerate, 0, np.clip(np.rint(-lo / scale), 0, qmax))
    return QuantParams(bits, scale, zp.astype(np.int64), stats.axis, symmetric)


def rectified_sigmoid(alpha):
    return np.clip(1.2 / (1.0 + np.exp(-alpha)) - 0.1, 0.0, 1.0)


def _rectified_sigmoid_grad(alpha):
    sig = 1.0 / (1.0 + np.exp(-alpha))
    h = 1.2 * sig - 0.1
    return np.where((h > 0) & (h < 1), 1.2 * sig * (1 - sig), 0.0)


@dataclass
class LearnableQuant:
    """Quantizer whose scale (activations) or rounding offsets (weights) are trainable.

    ``step_log`` holds log(scale). For weights the scale is frozen after
    calibration and only ``alpha`` is trained; the effective rounding is
    ``floor(w / s) + h(alpha)`` with ``h`` the rectified sigmoid.
    """

    params: QuantParams
    kind: str = "act"
    name: str = ""
    step_log: np.ndarray = field(default=None)
    alpha: np.ndarray | None = None
    enabled: bool = True
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("act", "weight"):
            raise ContractError(f"unknown quantizer kind {self.kind!r}")
        if self.step_log is None:
            self.step_log = np.array(np.log(self.params.scale), dtype=np.float64)

    @classmethod
    def for_weight(cls, w, params: QuantParams, name: str = "") -> "LearnableQuant":
        lq = cls(params, kind="weight", name=name)
        lq.init_alpha(w)
        return lq

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.step_log)

    def current_params(self) -> QuantParams:
        p = self.params
        return QuantParams(p.bits, self.scale, p.zero_point, p.axis, p.symmetric)

    def init_alpha(self, w) -> None:
        """Set alpha so that h(alpha) equals the fractional part of w / s.

        Signs are forced so that hard rounding (alpha >= 0 -> ceil) reproduces
        round-half-to-even exactly at initialisation.
        """
        w = np.asarray(w, dtype=np.float64)
        s, _ = self._sz(w.ndim)
        v = w / s
        frac = v - np.floor(v)
        up = (np.rint(v) - np.floor(v)) > 0.5
        target = np.clip((frac + 0.1) / 1.2, 1e-12, 1 - 1e-12)
        alpha = np.log(target) - np.log1p(-target)
        self.alpha = np.where(up, np.maximum(alpha, 1e-9), np.minimum(alpha, -1e-9))

    def _sz(self, ndim):
        p = self.params
        return _bcast(self.scale, p.axis, ndim), _bcast(p.zero_point, p.axis, ndim)

    def forward(self, x, training: bool = True, grad_mode: str = "ste", rng=None):
        """Return ``(x_hat, cache)``; feed the cache to :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if not self.enabled:
            return x, ("off",)
        if grad_mode not in GRAD_MODES:
            raise ContractError(f"grad_mode must be one of {GRAD_MODES}")
        s, z = self._sz(x.ndim)
        qmax = self.params.qmax
        if self.kind == "weight":
            if self.alpha is None or self.alpha.shape != x.shape:
                raise ContractError(f"rounding offsets do not match weight shape {x.shape}")
            sig = None
            if training:
                sig = 1.0 / (1.0 + np.exp(-self.alpha))
                h = 1.2 * sig
                h -= 0.1
                np.minimum(np.maximum(h, 0.0, out=h), 1.0, out=h)
            else:
                h = (self.alpha >= 0).astype(np.float64)
            code_u = np.floor(x / s)
            code_u += h
            code_u += z
            code = np.minimum(np.maximum(code_u, 0), qmax)
            out = code - z
            out *= s
            in_range = code_u >= 0
            in_range &= code_u <= qmax
            return out, ("weight", s, in_range, training, grad_mode, sig)
        v = x / s
        shifted = v + z
        code = np.rint(shifted)
        np.minimum(np.maximum(code, 0, out=code), qmax, out=code)
        out = code - z
        out *= s
        in_range = shifted >= 0
        in_range &= shifted <= qmax
        mask = None
        if training and self.drop_prob > 0:
            if rng is None:
                raise ContractError("input drop needs an rng")
            mask = rng.random(x.shape) < self.drop_prob
            out = np.where(mask, x, out)
        return out, ("act", s, z, v, code, in_range, mask, grad_mode)

    def backward(self, dout, cache):
        """Return ``(dx, d_step_log, d_alpha)``.

        ``grad_mode="ste"``: straight-through rounding with clamp masking and
        the learned-step-size gradient (scaled by 1/sqrt(N * qmax)).
        ``grad_mode="exact"``: the almost-everywhere derivative of the forward
        map (rounding is piecewise constant), which is what finite differences
        measure away from rounding boundaries.
        """
        kind = cache[0]
        if kind == "off":
            return dout, None, None
        if kind == "weight":
            _, s, in_range, training, grad_mode, sig = cache
            d_alpha = None
            if training:
                h = 1.2 * sig - 0.1
                live = (h > 0) & (h < 1) & in_range
                d_alpha = np.where(live, dout * s * (1.2 * sig * (1 - sig)), 0.0)
            dx = dout * in_range if grad_mode == "ste" else np.zeros_like(dout)
            return dx, None, d_alpha
        _, s, z, v, code, in_range, mask, grad_mode = cache
        qmax = self.params.qmax
        if grad_mode == "ste":
            # in range: round(v) - v; clamped: the clamp bound minus z (= code - z)
            ds_elem = code - z
            ds_elem -= v * in_range
            dx = dout * in_range
            gscale = 1.0 / np.sqrt(v.size * qmax)
        else:
            ds_elem = code - z
            dx = np.zeros_like(dout)
            gscale = 1.0
        if mask is not None:
            dx = np.where(mask, dout, dx)
            ds_elem = np.where(mask, 0.0, ds_elem)
        ax = self.params.axis
        if ax is None:
            ds = np.vdot(dout, ds_elem)
        else:
            ds = np.sum(dout * ds_elem, axis=tuple(i for i in range(ds_elem.ndim) if i != ax % ds_elem.ndim))
        d_step_log = ds * self.scale * gscale
        return dx, d_step_log, None


def fake_quant_learnable(x, lq: LearnableQuant, training: bool = True, grad_mode: str = "ste", rng=None):
    """Functional form: returns ``(x_hat, vjp)`` where ``vjp(dout)`` gives ``(dx, d_step_log, d_alpha)``."""
    out, cache = lq.forward(x, training=training, grad_mode=grad_mode, rng=rng)
    return out, lambda dout: lq.backward(dout, cache)
