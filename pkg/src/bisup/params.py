"""Learnable parameter spaces for quantized linear sites.

Each quantized matmul ``y = <x> @ <W>`` (a "site") owns

* clip values for every weight group and every activation column group,
* smoothing vectors ``s1`` (activation columns) and ``s2`` (weight rows),
  stored as logs so positivity is structural,
* a low-rank pair ``A, B`` entering the weight as ``W * (1 + A @ B)``
  (or ``W + A @ B`` in the additive comparison mode).

The forward pass of a site and its straight-through backward pass live here
as well, since the gradients are written by hand per parameter space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .quant import (
    QuantConfig,
    QuantSpec,
    QuantTape,
    dequantize,
    fake_quant_sym,
    fake_quant_sym_backward,
    grid_search_clip,
    quantize,
)
from .tensor import matmul, svd_truncated

CLIP_MIN = 0.3
CLIP_MAX = 1.0
LOWRANK_INIT_STD = 0.01
TECHNIQUES = ("clip", "smooth", "lowrank")
LOWRANK_MODES = ("slrec", "lrec")


class _Slots:
    """Named parameter arrays with matching gradient slots."""

    names: tuple = ()

    def tensors(self) -> dict:
        return {n: getattr(self, n) for n in self.names}

    def zero_grad(self):
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in self.names}


@dataclass
class ClipParams(_Slots):
    w_clip: np.ndarray  # (d_out, weight groups along d_in)
    a_clip: np.ndarray  # (activation groups along d_in,), shared by all tokens
    kv_clip: np.ndarray | None = None  # (2,): K and V cache quantizers of the qkv site
    grads: dict = field(default_factory=dict, repr=False)

    @property
    def names(self):
        return ("w_clip", "a_clip") if self.kv_clip is None else ("w_clip", "a_clip", "kv_clip")

    def project(self):
        for n in self.names:
            t = getattr(self, n)
            np.clip(t, CLIP_MIN, CLIP_MAX, out=t)


@dataclass
class SmoothParams(_Slots):
    log_s1: np.ndarray
    log_s2: np.ndarray
    grads: dict = field(default_factory=dict, repr=False)
    names = ("log_s1", "log_s2")

    @classmethod
    def identity(cls, d_in: int) -> "SmoothParams":
        return cls(np.zeros(d_in), np.zeros(d_in))

    @classmethod
    def from_factors(cls, s1, s2) -> "SmoothParams":
        s1 = np.asarray(s1, dtype=np.float64)
        s2 = np.asarray(s2, dtype=np.float64)
        if np.any(s1 <= 0) or np.any(s2 <= 0):
            raise ValueError("smoothing factors must be positive")
        return cls(np.log(s1), np.log(s2))

    @property
    def s1(self):
        return np.exp(self.log_s1)

    @property
    def s2(self):
        return np.exp(self.log_s2)


@dataclass
class LowRankParams(_Slots):
    a: np.ndarray  # (d_in, r)
    b: np.ndarray  # (r, d_out)
    mode: str = "slrec"
    grads: dict = field(default_factory=dict, repr=False)
    names = ("a", "b")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @classmethod
    def init(cls, d_in, d_out, rank, rng, mode="slrec") -> "LowRankParams":
        if mode not in LOWRANK_MODES:
            raise ValueError(f"unknown low-rank mode {mode!r}")
        if not 1 <= rank <= min(d_in, d_out):
            raise ShapeError(f"rank {rank} outside [1, {min(d_in, d_out)}]")
        return cls(rng.normal(0.0, LOWRANK_INIT_STD, (d_in, rank)), np.zeros((rank, d_out)), mode)


@dataclass
class SiteParams:
    clip: ClipParams
    smooth: SmoothParams
    lowrank: LowRankParams | None = None

    def spaces(self) -> dict:
        out = {"clip": self.clip, "smooth": self.smooth}
        if self.lowrank is not None:
            out["lowrank"] = self.lowrank
        return out


@dataclass
class BiSupParams:
    """All sites of one transformer layer plus which spaces are trained."""

    sites: dict
    trainable: tuple = TECHNIQUES

    def named_tensors(self, trainable_only=True) -> dict:
        out = {}
        for site_name, site in self.sites.items():
            for space_name, space in site.spaces().items():
                if trainable_only and space_name not in self.trainable:
                    continue
                for n, t in space.tensors().items():
                    out[f"{site_name}.{n}"] = t
        return out

    def named_grads(self) -> dict:
        out = {}
        for site_name, site in self.sites.items():
            for space_name, space in site.spaces().items():
                if space_name not in self.trainable:
                    continue
                for n in space.names:
                    out[f"{site_name}.{n}"] = space.grads[n]
        return out

    def zero_grad(self):
        for site in self.sites.values():
            for space in site.spaces().values():
                space.zero_grad()

    def project(self):
        for site in self.sites.values():
            site.clip.project()

    def copy(self) -> "BiSupParams":
        sites = {}
        for name, s in self.sites.items():
            lr = None
            if s.lowrank is not None:
                lr = LowRankParams(s.lowrank.a.copy(), s.lowrank.b.copy(), s.lowrank.mode)
            sites[name] = SiteParams(
                ClipParams(s.clip.w_clip.copy(), s.clip.a_clip.copy(),
                           None if s.clip.kv_clip is None else s.clip.kv_clip.copy()),
                SmoothParams(s.smooth.log_s1.copy(), s.smooth.log_s2.copy()),
                lr,
            )
        return BiSupParams(sites, tuple(self.trainable))


def n_groups(length: int, group_size: int | None) -> int:
    return length // group_size if group_size else 1


def init_site_params(w, qcfg: QuantConfig, rank: int | None, rng, lowrank_mode="slrec",
                     column_blocks=None, clip_grid=None, kv=False) -> SiteParams:
    """Fresh parameters for one site.

    Weight clips start at the per-tensor grid-search optimum (one search per
    block in ``column_blocks`` for fused weights), activation clips at the
    fixed default, smoothing at identity, and ``B = 0``.  With ``kv=True``
    the site also owns (unclipped) K and V cache clip values.
    """
    d_in, d_out = w.shape
    g = qcfg.group_size
    w_clip = np.ones((d_out, n_groups(d_in, g)))
    wspec = qcfg.weight_spec()
    if wspec is not None:
        blocks = column_blocks or [(0, d_out)]
        for lo, hi in blocks:
            kw = {} if clip_grid is None else {"grid": clip_grid}
            w_clip[lo:hi] = grid_search_clip(w[:, lo:hi], wspec, axis=0, **kw)
    a_clip = np.full(n_groups(d_in, g), qcfg.act_clip if qcfg.act_bits is not None else 1.0)
    lowrank = None
    if rank:
        lowrank = LowRankParams.init(d_in, d_out, rank, rng, lowrank_mode)
    kv_clip = np.ones(2) if kv else None
    return SiteParams(ClipParams(w_clip, a_clip, kv_clip), SmoothParams.identity(d_in), lowrank)


# -- forward application ------------------------------------------------------

def apply_smoothing(x, w, p: SmoothParams):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (x.shape[-1] == w.shape[0] == p.log_s1.shape[0] == p.log_s2.shape[0]):
        raise ShapeError(
            f"smoothing dims disagree: x {x.shape}, w {w.shape}, "
            f"s1 {p.log_s1.shape}, s2 {p.log_s2.shape}"
        )
    return x * p.s1, w * p.s2[:, None]


def effective_weight(w, p: LowRankParams):
    w = np.asarray(w, dtype=np.float64)
    if p.a.shape[0] != w.shape[0] or p.b.shape[1] != w.shape[1] or p.a.shape[1] != p.b.shape[0]:
        raise ShapeError(f"low-rank shapes {p.a.shape}, {p.b.shape} do not fit weight {w.shape}")
    ab = matmul(p.a, p.b)
    if p.mode == "lrec":
        return w + ab
    return w * (1.0 + ab)


def lorc_svd_oracle(w, spec: QuantSpec, r: int, axis: int = 0):
    """Training-free low-rank estimate of the weight quantization error.

    Returns ``(u_hat, v_hat)`` with ``u_hat @ v_hat`` the best rank-``r``
    approximation of ``w - dequantize(quantize(w))``.
    """
    w = np.asarray(w, dtype=np.float64)
    err = w - dequantize(quantize(w, spec, axis))
    res = svd_truncated(err, r)
    return res.u * res.singular_values, res.v_t


def site_forward_rtn(a, w, qcfg: QuantConfig, w_clip=1.0):
    """Plain round-to-nearest ``<a> @ <w>`` without any learnable parameters.

    ``w_clip`` is a scalar or one clip value per output column.
    """
    wspec = qcfg.weight_spec()
    aspec = qcfg.act_spec()
    aq = a if aspec is None else dequantize(quantize(a, aspec.with_clip(qcfg.act_clip), -1))
    if wspec is None:
        wq = w
    else:
        clip = np.asarray(w_clip, dtype=np.float64)
        if clip.ndim == 1:
            clip = clip[:, None]
        wq = dequantize(quantize(w, wspec.with_clip(clip), 0))
    return matmul(aq, wq)


def site_forward(a, w, sp: SiteParams, qcfg: QuantConfig, tape: QuantTape | None = None,
                 need_ctx=False):
    """Quantized ``a @ w`` with the site's parameters applied.  Returns ``(y, ctx)``."""
    s1 = sp.smooth.s1
    s2 = sp.smooth.s2
    a_s = a * s1
    w_s = w * s2[:, None]
    m, w_e = None, w_s
    if sp.lowrank is not None:
        ab = matmul(sp.lowrank.a, sp.lowrank.b)
        if sp.lowrank.mode == "lrec":
            w_e = w_s + ab
        else:
            m = 1.0 + ab
            w_e = w_s * m
    g = qcfg.group_size
    actx = wctx = None
    if qcfg.act_bits is not None:
        a_q, actx = fake_quant_sym(a_s, qcfg.act_bits, g, sp.clip.a_clip, tape)
    else:
        a_q = a_s
    if qcfg.weight_bits is not None:
        wq_t, wctx = fake_quant_sym(w_e.T, qcfg.weight_bits, g, sp.clip.w_clip, tape)
        w_q = wq_t.T
    else:
        w_q = w_e
    y = matmul(a_q, w_q)
    ctx = None
    if need_ctx:
        ctx = {"a": a, "w": w, "s1": s1, "s2": s2, "w_s": w_s, "m": m,
               "a_q": a_q, "w_q": w_q, "actx": actx, "wctx": wctx}
    return y, ctx


def grad_clip(sp: SiteParams, dclip_a, dclip_w):
    sp.clip.grads["a_clip"] += dclip_a
    sp.clip.grads["w_clip"] += dclip_w


def grad_smooth(sp: SiteParams, da_s, dw_s, ctx):
    """Gradients of the log-smoothing vectors from gradients at the smoothed tensors."""
    a = ctx["a"]
    lead = tuple(range(a.ndim - 1))
    sp.smooth.grads["log_s1"] += np.sum(da_s * a, axis=lead) * ctx["s1"]
    sp.smooth.grads["log_s2"] += np.sum(dw_s * ctx["w"], axis=1) * ctx["s2"]


def grad_lowrank(sp: SiteParams, dw_e, ctx):
    """Gradients of ``A, B`` from the gradient at the effective weight; returns dW_s."""
    lr = sp.lowrank
    if lr.mode == "lrec":
        d_ab, dw_s = dw_e, dw_e
    else:
        d_ab, dw_s = dw_e * ctx["w_s"], dw_e * ctx["m"]
    lr.grads["a"] += matmul(d_ab, lr.b.T)
    lr.grads["b"] += matmul(lr.a.T, d_ab)
    return dw_s


def site_backward(dy, sp: SiteParams, ctx, qcfg: QuantConfig):
    """Accumulate parameter gradients into the slots; return the gradient w.r.t. the input."""
    if ctx is None:
        raise StateError("site backward called without a cached forward pass")
    if not sp.clip.grads:
        raise StateError("gradient slots not initialised; call zero_grad() first")
    a_q, w_q = ctx["a_q"], ctx["w_q"]
    d_in, d_out = w_q.shape
    dy2 = dy.reshape(-1, d_out)
    dw_q = matmul(a_q.reshape(-1, d_in).T, dy2)
    da_q = matmul(dy, w_q.T)
    if ctx["actx"] is not None:
        da_s, dclip_a = fake_quant_sym_backward(da_q, ctx["actx"])
    else:
        da_s, dclip_a = da_q, 0.0
    if ctx["wctx"] is not None:
        dwe_t, dclip_w = fake_quant_sym_backward(dw_q.T, ctx["wctx"])
        dw_e = dwe_t.T
    else:
        dw_e, dclip_w = dw_q, 0.0
    grad_clip(sp, dclip_a, dclip_w)
    dw_s = grad_lowrank(sp, dw_e, ctx) if sp.lowrank is not None else dw_e
    grad_smooth(sp, da_s, dw_s, ctx)
    return da_s * ctx["s1"]
