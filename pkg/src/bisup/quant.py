"""Round-to-nearest quantization kernels.

Symmetric quantization uses ``delta = max|x_g| / (2**(N-1) - 1) * c`` per
group and codes ``clamp(round(x / delta), -2**(N-1), 2**(N-1) - 1)``.
Asymmetric quantization (used for the KV cache) maps ``[min, max]`` onto
``[0, 2**N - 1]`` with an integer zero point.

Grouping always runs along one axis (``axis``): per-channel and per-token
granularity give one group per slice along that axis, ``group`` splits each
slice into contiguous chunks, ``tensor`` uses a single group.

The ``fake_quant_*`` functions are the quantize-dequantize composition used
inside the model; they share the arithmetic of ``quantize_rtn_*`` followed by
``dequantize`` exactly, and return a context for the straight-through
backward pass.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

GRANULARITIES = ("tensor", "per_channel", "per_token", "group")
DEFAULT_CLIP_GRID = tuple(round(0.70 + 0.05 * i, 2) for i in range(7))
DEFAULT_ACT_CLIP = 0.9


def qmax_symmetric(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def qmin_symmetric(bits: int) -> int:
    return -(2 ** (bits - 1))


def round_half_away(u):
    a = np.abs(u)
    fl = np.floor(a)
    return np.copysign(fl + (a - fl >= 0.5), u)


@dataclass(frozen=True, eq=False)
class QuantSpec:
    bits: int
    symmetric: bool = True
    granularity: str = "per_token"
    group_size: int | None = None
    clip: object = None  # None, a float, or an array broadcastable to the group scales

    def __post_init__(self):
        if not 2 <= int(self.bits) <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "group":
            if not self.group_size or self.group_size < 1:
                raise ConfigError("group granularity needs a positive group_size")
        if self.clip is not None:
            c = np.asarray(self.clip, dtype=np.float64)
            if not np.all((c > 0) & (c <= 1)):
                raise ConfigError("clip values must lie in (0, 1]")

    def with_clip(self, clip) -> "QuantSpec":
        return QuantSpec(self.bits, self.symmetric, self.granularity, self.group_size, clip)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray | None
    spec: QuantSpec
    axis: int
    group_size: int

    @property
    def shape(self):
        return self.codes.shape

    def to_bytes(self) -> bytes:
        parts = [
            np.ascontiguousarray(self.codes, dtype="<i8").tobytes(),
            np.ascontiguousarray(self.scales, dtype="<f8").tobytes(),
        ]
        if self.zero_points is not None:
            parts.append(np.ascontiguousarray(self.zero_points, dtype="<i8").tobytes())
        return b"".join(parts)


# -- group layout -------------------------------------------------------------

def _group_view(x: np.ndarray, granularity: str, group_size: int | None, axis: int):
    """Return ``(grouped, group_size, restore)``; grouped has shape (..., n_groups, g)."""
    if granularity == "tensor":
        flat = x.reshape(1, -1)
        return flat.reshape(1, 1, -1), flat.shape[-1], lambda g: g.reshape(x.shape)
    moved = np.moveaxis(x, axis, -1)
    length = moved.shape[-1]
    if granularity == "group":
        g = group_size
        if length % g:
            raise ShapeError(f"group size {g} does not divide axis length {length}")
    else:
        g = length
    grouped = moved.reshape(moved.shape[:-1] + (length // g, g))

    def restore(arr):
        return np.moveaxis(arr.reshape(moved.shape), -1, axis)

    return grouped, g, restore


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericError("quantizer input contains non-finite values")


def _sym_scale(absmax, bits, clip):
    qmax = qmax_symmetric(bits)
    delta = absmax / qmax * clip
    # all-zero groups, and maxima so small that the step underflows, use a unit step
    return np.where(delta > 0, delta, 1.0)


def compute_scale_symmetric(group, bits: int, clip: float = 1.0) -> float:
    """Scale for one group: ``max|group| / (2**(bits-1) - 1) * clip`` (1.0 for an all-zero group)."""
    group = np.asarray(group, dtype=np.float64)
    if group.size == 0:
        raise ShapeError("empty quantization group")
    _check_finite(group)
    return float(_sym_scale(np.max(np.abs(group)), bits, clip))


def _clip_array(spec: QuantSpec, n_scales_shape):
    if spec.clip is None:
        return 1.0
    c = np.asarray(spec.clip, dtype=np.float64)
    try:
        np.broadcast_to(c, n_scales_shape)
    except ValueError as exc:
        raise ShapeError(f"clip shape {c.shape} incompatible with scales {n_scales_shape}") from exc
    return c


def quantize_rtn_symmetric(x, spec: QuantSpec, axis: int = -1) -> QuantizedTensor:
    if not spec.symmetric:
        raise ConfigError("quantize_rtn_symmetric needs a symmetric spec")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    xg, g, restore = _group_view(x, spec.granularity, spec.group_size, axis)
    absmax = np.max(np.abs(xg), axis=-1)
    delta = _sym_scale(absmax, spec.bits, _clip_array(spec, absmax.shape))
    delta = np.broadcast_to(delta, absmax.shape).copy()
    q = round_half_away(xg / delta[..., None])
    q = np.clip(q, qmin_symmetric(spec.bits), qmax_symmetric(spec.bits))
    return QuantizedTensor(restore(q).astype(np.int64), delta, None, spec, axis, g)


def quantize_rtn_asymmetric(x, spec: QuantSpec, axis: int = -1) -> QuantizedTensor:
    if spec.symmetric:
        raise ConfigError("quantize_rtn_asymmetric needs an asymmetric spec")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    xg, g, restore = _group_view(x, spec.granularity, spec.group_size, axis)
    shape = xg.shape[:-1]
    delta, zp, _ = _asym_params(xg, spec.bits, _clip_array(spec, shape))
    qmax = 2**spec.bits - 1
    codes = np.clip(_asym_codes(xg, delta[..., None], zp[..., None], qmax)[1], 0, qmax)
    return QuantizedTensor(restore(codes).astype(np.int64), delta, zp.astype(np.int64), spec, axis, g)


def _asym_params(xg, bits, clip=1.0):
    """Scale, zero point and flatness flag per group.

    Clipping shrinks ``[min, max]`` by ``clip`` around zero, which scales the
    step and leaves the zero point.
    """
    qmax = 2**bits - 1
    lo = np.min(xg, axis=-1)
    hi = np.max(xg, axis=-1)
    step = (hi - lo) / qmax
    # constant groups (or spreads so small the step underflows): one code carries min exactly
    flat = step == 0
    delta = np.where(flat, np.where(lo == 0, 1.0, np.abs(lo)), step)
    zp = np.where(flat, (lo < 0).astype(np.float64),
                  np.clip(round_half_away(-lo / np.where(flat, 1.0, delta)), 0, qmax))
    delta = np.where(flat, delta, delta * clip)
    return delta, zp, flat


def _asym_codes(x, delta, zp, qmax):
    # bounding u first keeps huge ratios finite; the final clamp is unaffected
    u = np.clip(x / delta, -2.0 * (qmax + 1), 2.0 * (qmax + 1))
    return u, round_half_away(u) + zp


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.codes.astype(np.float64)
    cg, _, restore = _group_view(codes, q.spec.granularity, q.group_size, q.axis)
    if q.zero_points is not None:
        cg = cg - q.zero_points[..., None]
    return restore(cg * q.scales[..., None])


def quantize(x, spec: QuantSpec, axis: int = -1) -> QuantizedTensor:
    if spec.symmetric:
        return quantize_rtn_symmetric(x, spec, axis)
    return quantize_rtn_asymmetric(x, spec, axis)


def quant_error(x, spec: QuantSpec, axis: int = -1) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x - dequantize(quantize(x, spec, axis))
    return float(np.sum(d * d))


def grid_search_clip(w, spec: QuantSpec, grid=DEFAULT_CLIP_GRID, axis: int = -1) -> float:
    """Per-tensor clip value minimising the squared reconstruction error.

    Ties go to the larger clip value.
    """
    grid = sorted((float(c) for c in grid), reverse=True)
    if not grid:
        raise ConfigError("empty clip grid")
    best_c, best_err = None, np.inf
    for c in grid:
        err = quant_error(w, spec.with_clip(c), axis)
        if err < best_err:
            best_c, best_err = c, err
    return best_c


# -- "W4A4-g128" notation -----------------------------------------------------

_CONFIG_RE = re.compile(r"^W(\d+)A(\d+)(?:-g(\d+))?$")


@dataclass(frozen=True)
class QuantConfig:
    """Weight/activation/KV settings for a model.  ``None`` bits disable a site."""

    weight_bits: int | None
    act_bits: int | None
    group_size: int | None = None
    kv_bits: int | None = None
    act_clip: float = DEFAULT_ACT_CLIP

    @classmethod
    def parse(cls, text: str) -> "QuantConfig":
        m = _CONFIG_RE.match(text.strip())
        if not m:
            raise ConfigError(f"cannot parse quantization config {text!r}")
        wb, ab, g = int(m.group(1)), int(m.group(2)), m.group(3)
        for b in (wb, ab):
            if not 2 <= b <= 8:
                raise ConfigError(f"bit width {b} outside [2, 8] in {text!r}")
        if g is not None and int(g) < 1:
            raise ConfigError(f"bad group size in {text!r}")
        return cls(wb, ab, int(g) if g else None, kv_bits=ab)

    @classmethod
    def disabled(cls) -> "QuantConfig":
        return cls(None, None, None, None)

    @property
    def name(self) -> str:
        if self.weight_bits is None:
            return "FP"
        base = f"W{self.weight_bits}A{self.act_bits}"
        return base + (f"-g{self.group_size}" if self.group_size else "")

    def _sym(self, bits):
        if bits is None:
            return None
        if self.group_size:
            return QuantSpec(bits, True, "group", self.group_size)
        return QuantSpec(bits, True, "per_channel")

    def weight_spec(self) -> QuantSpec | None:
        # weights are grouped along the input dimension of each output channel
        return self._sym(self.weight_bits)

    def act_spec(self) -> QuantSpec | None:
        spec = self._sym(self.act_bits)
        if spec is not None and spec.granularity == "per_channel":
            spec = QuantSpec(spec.bits, True, "per_token")
        return spec

    def kv_spec(self) -> QuantSpec | None:
        if self.kv_bits is None:
            return None
        return QuantSpec(self.kv_bits, False, "per_token")


# -- fake quantization with straight-through backward --------------------------

@dataclass
class QuantTape:
    """Records rounding residuals, group maxima and clamp masks of every
    quantization site, then replays them with those quantities frozen.

    Replaying gives a smooth surrogate of the quantized forward pass whose
    exact derivative is the straight-through gradient; finite differences on
    the replayed loss therefore check the hand-written backward pass.
    ``flipped`` is set when a live clamp decision disagrees with the recorded
    one during replay.
    """

    mode: str = "record"
    entries: list = field(default_factory=list)
    cursor: int = 0
    flipped: bool = False

    def start_replay(self):
        self.mode = "replay"
        self.cursor = 0
        self.flipped = False

    def _next(self):
        entry = self.entries[self.cursor]
        self.cursor += 1
        return entry


def fake_quant_sym(x, bits: int, group_size: int | None, clip=1.0, tape: QuantTape | None = None):
    """Quantize-dequantize along the last axis.  Returns ``(y, ctx)``.

    ``group_size=None`` means one group per row.  ``clip`` broadcasts against
    the per-group scales of shape ``x.shape[:-1] + (n_groups,)``.
    """
    granularity = "group" if group_size else "per_token"
    xg, _, restore = _group_view(x, granularity, group_size, -1)
    qmin, qmax = qmin_symmetric(bits), qmax_symmetric(bits)
    replay = tape is not None and tape.mode == "replay"
    if replay:
        rec = tape._next()
        absmax = rec["absmax"]
    else:
        _check_finite(x)
        absmax = np.max(np.abs(xg), axis=-1)
    delta = _sym_scale(absmax, bits, clip)
    delta = np.broadcast_to(delta, absmax.shape)
    u = xg / delta[..., None]
    q = round_half_away(u)
    inside = (q >= qmin) & (q <= qmax)
    qc = np.clip(q, qmin, qmax)
    if replay:
        if np.any(inside != rec["inside"]):
            tape.flipped = True
        inside, qc, q = rec["inside"], rec["qc"], None
        y = np.where(inside, delta[..., None] * (u + rec["resid"]), delta[..., None] * qc)
        resid = rec["resid"]
    else:
        y = qc * delta[..., None]
        resid = q - u
        if tape is not None:
            tape.entries.append({"absmax": absmax, "resid": resid, "inside": inside, "qc": qc})
    ctx = {
        "bits": bits, "absmax": absmax, "resid": resid, "inside": inside, "qc": qc,
        "clip_shape": np.shape(clip), "restore": restore,
    }
    return restore(y), ctx


def fake_quant_sym_backward(dy, ctx):
    """Straight-through gradients ``(dx, dclip)`` of :func:`fake_quant_sym`.

    Rounding passes gradients unchanged inside the clamp range and blocks them
    outside; the scale is differentiated through both its division and its
    multiplication while the group maximum is held constant.
    """
    restore = ctx["restore"]
    dyg = dy.reshape(ctx["inside"].shape)
    inside = ctx["inside"]
    dx = restore(np.where(inside, dyg, 0.0))
    d_delta_elem = np.where(inside, ctx["resid"], ctx["qc"])
    d_delta = np.sum(dyg * d_delta_elem, axis=-1)
    absmax = ctx["absmax"]
    dclip = np.where(absmax > 0, d_delta * (absmax / qmax_symmetric(ctx["bits"])), 0.0)
    return dx, _reduce_to_shape(dclip, ctx["clip_shape"])


def _reduce_to_shape(g, shape):
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def fake_quant_asym(x, bits: int, clip=1.0, tape: QuantTape | None = None):
    """Per-row asymmetric quantize-dequantize along the last axis.

    ``clip`` broadcasts against the per-row scales ``x.shape[:-1]``.
    """
    qmax = 2**bits - 1
    replay = tape is not None and tape.mode == "replay"
    if replay:
        rec = tape._next()
        span_step, zp, flat = rec["span_step"], rec["zp"], rec["flat"]
    else:
        _check_finite(x)
        xg = x[..., None, :]
        span_step, zp, flat = (t[..., 0] for t in _asym_params(xg, bits))
    delta = np.where(flat, span_step, span_step * clip)
    u, code = _asym_codes(x, delta[..., None], zp[..., None], qmax)
    inside = (code >= 0) & (code <= qmax)
    codes = np.clip(code, 0, qmax)
    if replay:
        if np.any(inside != rec["inside"]):
            tape.flipped = True
        inside, codes, resid = rec["inside"], rec["codes"], rec["resid"]
        y = np.where(inside, delta[..., None] * (u + resid), (codes - zp[..., None]) * delta[..., None])
    else:
        y = (codes - zp[..., None]) * delta[..., None]
        resid = round_half_away(u) - u
        if tape is not None:
            tape.entries.append({"span_step": span_step, "zp": zp, "flat": flat, "resid": resid,
                                 "inside": inside, "codes": codes})
    ctx = {"inside": inside, "resid": resid, "codes": codes, "zp": zp, "flat": flat,
           "span_step": span_step, "clip_shape": np.shape(clip)}
    return y, ctx


def fake_quant_asym_backward(dy, ctx):
    """Straight-through gradients ``(dx, dclip)`` of :func:`fake_quant_asym`."""
    inside = ctx["inside"]
    dx = np.where(inside, dy, 0.0)
    d_delta_elem = np.where(inside, ctx["resid"], ctx["codes"] - ctx["zp"][..., None])
    d_delta = np.sum(dy * d_delta_elem, axis=-1)
    dclip = np.where(ctx["flat"], 0.0, d_delta * ctx["span_step"])
    return dx, _reduce_to_shape(dclip, ctx["clip_shape"])
