"""A small pre-norm decoder stack with full-precision and quantized paths.

Layer: ``x2 = x + Attn(RMSNorm(x)) @ Wo``; ``out = x2 + SiLU(RMSNorm(x2) @ W_up) @ W_down``.
Attention is causal multi-head attention without positional encoding.

In the quantized path the inputs of the four linear sites (``qkv``, ``out``,
``up``, ``down``) and their weights are quantized symmetrically; K and V are
quantized per token asymmetrically on their way into the KV cache.  Q and
the softmax output stay in full precision.  Tokens inside the system prompt
are encoded by the full-precision model and their K/V kept unquantized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .params import (
    BiSupParams,
    SiteParams,
    effective_weight,
    init_site_params,
    site_backward,
    site_forward,
    site_forward_rtn,
)
from .quant import (
    QuantConfig,
    QuantizedTensor,
    QuantSpec,
    dequantize,
    fake_quant_asym,
    fake_quant_asym_backward,
    grid_search_clip,
    quantize,
    quantize_rtn_asymmetric,
)
from .tensor import matmul, softmax_rows

RMS_EPS = 1e-6
SITES = ("qkv", "out", "up", "down")


@dataclass
class LayerWeights:
    rms1: np.ndarray
    rms2: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.rms1.shape[0]
        if d % self.n_heads:
            raise ShapeError(f"model dim {d} not divisible by {self.n_heads} heads")
        h = self.w_up.shape[1]
        expected = {
            "rms1": (d,), "rms2": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d),
            "wo": (d, d), "w_up": (d, h), "w_down": (h, d),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")
        self._wqkv = np.concatenate([self.wq, self.wk, self.wv], axis=1)

    @property
    def d(self) -> int:
        return self.rms1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_up.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    TENSOR_NAMES = ("rms1", "rms2", "wq", "wk", "wv", "wo", "w_up", "w_down")

    def site_weight(self, site: str) -> np.ndarray:
        return {"qkv": self._wqkv, "out": self.wo, "up": self.w_up, "down": self.w_down}[site]

    def site_blocks(self, site: str):
        if site == "qkv":
            d = self.d
            return [(0, d), (d, 2 * d), (2 * d, 3 * d)]
        return None


@dataclass
class ToyModel:
    embedding: np.ndarray  # (vocab, d)
    layers: list

    @property
    def n_heads(self) -> int:
        return self.layers[0].n_heads

    @property
    def d(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise ShapeError("token id outside the embedding table")
        return self.embedding[tokens]

    def layer_outputs(self, tokens) -> list:
        return model_forward_fp(self, tokens)


def synth_model(d=64, n_heads=4, hidden=256, n_layers=2, vocab=256, seed=0) -> ToyModel:
    """Seeded random model: Gaussian weights with std ``1/sqrt(fan_in)``, unit RMSNorm gains."""
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 1.0, (vocab, d))
    layers = []
    for _ in range(n_layers):
        s = 1.0 / np.sqrt(d)
        layers.append(LayerWeights(
            rms1=np.ones(d), rms2=np.ones(d),
            wq=rng.normal(0, s, (d, d)), wk=rng.normal(0, s, (d, d)),
            wv=rng.normal(0, s, (d, d)), wo=rng.normal(0, s, (d, d)),
            w_up=rng.normal(0, s, (d, hidden)),
            w_down=rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, d)),
            n_heads=n_heads,
        ))
    return ToyModel(emb, layers)


def add_attention_sink(model: ToyModel, strength=4.0, bos=0) -> ToyModel:
    """Copy of ``model`` whose heads all attend mostly to the ``bos`` token.

    The bos embedding becomes a large spike on feature 0; every other token
    gets a shared offset along feature 1.  Each head's query map sends
    feature 1, and its key map sends feature 0, onto the same head direction,
    so every query scores the bos key highly.
    """
    emb = model.embedding.copy()
    d = model.d
    emb[bos] = 0.0
    emb[bos, 0] = strength * np.sqrt(d)
    others = np.arange(model.vocab) != bos
    emb[others, 0] = 0.0
    emb[others, 1] += strength
    layers = []
    for lw in model.layers:
        wq, wk = lw.wq.copy(), lw.wk.copy()
        dh = lw.head_dim
        for h in range(lw.n_heads):
            col = h * dh
            wq[1, col] += strength
            wk[0, col] += strength
        layers.append(LayerWeights(lw.rms1, lw.rms2, wq, wk, lw.wv, lw.wo, lw.w_up, lw.w_down,
                                   lw.n_heads))
    return ToyModel(emb, layers)


# -- small differentiable pieces ----------------------------------------------

def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def silu(u):
    return u * _sigmoid(u)


def _silu_grad(u):
    s = _sigmoid(u)
    return s * (1.0 + u * (1.0 - s))


def _rms_inv(x):
    return 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def _rmsnorm_backward(dy, x, w, inv):
    g = dy * w
    return inv * g - x * inv**3 * np.mean(g * x, axis=-1, keepdims=True)


def _split_heads(t, n_heads):
    b, s, d = t.shape
    return t.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, s, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _causal_mask(t_new, past):
    q_pos = past + np.arange(t_new)[:, None]
    k_pos = np.arange(past + t_new)[None, :]
    return k_pos <= q_pos


def _kv_fp_quant(kv, qcfg):
    # independent quantize/dequantize route for the parameter-free baseline
    spec = qcfg.kv_spec()
    if spec is None:
        return kv
    return dequantize(quantize_rtn_asymmetric(kv, spec, -1))


# -- layer core ---------------------------------------------------------------

def _layer(x, lw: LayerWeights, mode, qcfg=None, theta=None, clips=None, past_kv=None,
           tape=None, need_ctx=False):
    """Shared layer body.

    ``mode`` is ``"fp"`` (no quantization), ``"rtn"`` (quantized, per-column
    weight clips from ``clips``, no learnable parameters) or ``"theta"``
    (quantized with the parameter spaces in ``theta``).  ``x`` is
    ``(batch, tokens, d)``; ``past_kv`` holds K/V of earlier tokens, either
    ``(past, d)`` shared by the batch or ``(batch, past, d)``.
    Returns ``(out, k, v, ctx)`` where ``k, v`` are this call's rows before
    KV quantization.
    """
    b, t, d = x.shape
    nh = lw.n_heads
    ctx = {} if need_ctx else None

    def lin(site, a):
        w = lw.site_weight(site)
        if mode == "fp":
            return matmul(a, w)
        if mode == "rtn":
            return site_forward_rtn(a, w, qcfg, clips[site])
        y, c = site_forward(a, w, theta.sites[site], qcfg, tape, need_ctx)
        if need_ctx:
            ctx[site] = c
        return y

    inv1 = _rms_inv(x)
    h1 = (x * inv1) * lw.rms1
    qkv = lin("qkv", h1)
    q, k_raw, v_raw = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    k, v = k_raw, v_raw
    kctx = vctx = None
    if mode == "rtn":
        k, v = _kv_fp_quant(k, qcfg), _kv_fp_quant(v, qcfg)
    elif mode == "theta" and qcfg.kv_bits is not None:
        kv_clip = theta.sites["qkv"].clip.kv_clip
        kc, vc = (1.0, 1.0) if kv_clip is None else (kv_clip[0:1], kv_clip[1:2])
        k, kctx = fake_quant_asym(k, qcfg.kv_bits, kc, tape)
        v, vctx = fake_quant_asym(v, qcfg.kv_bits, vc, tape)
    past = 0
    k_all, v_all = k, v
    if past_kv is not None:
        pk, pv = past_kv
        past = pk.shape[-2]
        if past:
            pk = np.broadcast_to(pk, (b, past, d))
            pv = np.broadcast_to(pv, (b, past, d))
            k_all = np.concatenate([pk, k], axis=1)
            v_all = np.concatenate([pv, v], axis=1)
    qh, kh, vh = _split_heads(q, nh), _split_heads(k_all, nh), _split_heads(v_all, nh)
    scale = 1.0 / np.sqrt(lw.head_dim)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    mask = _causal_mask(t, past)
    scores = np.where(mask, scores, -np.inf)
    probs = softmax_rows(scores)
    attn = _merge_heads(matmul(probs, vh))
    x2 = x + lin("out", attn)
    inv2 = _rms_inv(x2)
    h2 = (x2 * inv2) * lw.rms2
    u = lin("up", h2)
    act = silu(u)
    out = x2 + lin("down", act)
    if need_ctx:
        ctx.update(x=x, inv1=inv1, x2=x2, inv2=inv2, u=u, qh=qh, kh=kh, vh=vh,
                   probs=probs, scale=scale, past=past, kctx=kctx, vctx=vctx)
    return out, k_raw, v_raw, ctx


def layer_backward(dout, lw: LayerWeights, theta: BiSupParams, qcfg: QuantConfig, ctx):
    """Accumulate gradients of all site parameters given ``dLoss/dout``."""
    sites = theta.sites
    dx2 = dout.copy()
    dact = site_backward(dout, sites["down"], ctx["down"], qcfg)
    du = dact * _silu_grad(ctx["u"])
    dh2 = site_backward(du, sites["up"], ctx["up"], qcfg)
    dx2 += _rmsnorm_backward(dh2, ctx["x2"], lw.rms2, ctx["inv2"])
    dattn = site_backward(dx2, sites["out"], ctx["out"], qcfg)

    nh = lw.n_heads
    probs, qh, kh, vh, scale = ctx["probs"], ctx["qh"], ctx["kh"], ctx["vh"], ctx["scale"]
    do = _split_heads(dattn, nh)
    dprobs = matmul(do, vh.transpose(0, 1, 3, 2))
    dvh = matmul(probs.transpose(0, 1, 3, 2), do)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dqh = matmul(dscores, kh) * scale
    dkh = matmul(dscores.transpose(0, 1, 3, 2), qh) * scale
    past = ctx["past"]
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)[:, past:]
    dv = _merge_heads(dvh)[:, past:]
    if ctx["kctx"] is not None:
        dk, dkc = fake_quant_asym_backward(dk, ctx["kctx"])
        dv, dvc = fake_quant_asym_backward(dv, ctx["vctx"])
        clip = sites["qkv"].clip
        if clip.kv_clip is not None:
            clip.grads["kv_clip"] += np.concatenate([np.ravel(dkc), np.ravel(dvc)])
    dqkv = np.concatenate([dq, dk, dv], axis=-1)
    dh1 = site_backward(dqkv, sites["qkv"], ctx["qkv"], qcfg)
    return dh1


def _as3d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (tokens, d) or (batch, tokens, d), got {x.shape}")
    return x, False


# -- KV cache -----------------------------------------------------------------

@dataclass
class _LayerKV:
    fp_k: list = field(default_factory=list)
    fp_v: list = field(default_factory=list)
    q_k: list = field(default_factory=list)
    q_v: list = field(default_factory=list)


class MixedKVCache:
    """Per-layer K/V store: system-prompt rows in full precision, later rows
    quantized per token asymmetrically.  Single sequence, append-only."""

    def __init__(self, n_layers: int, kv_spec: QuantSpec | None):
        self.kv_spec = kv_spec
        self.layers = [_LayerKV() for _ in range(n_layers)]

    @property
    def boundary(self) -> int:
        return sum(k.shape[0] for k in self.layers[0].fp_k) if self.layers else 0

    def length(self, layer: int) -> int:
        lk = self.layers[layer]
        return sum(k.shape[0] for k in lk.fp_k) + sum(k.shape[0] for k in lk.q_k)

    def append_full(self, layer: int, k, v):
        lk = self.layers[layer]
        if lk.q_k:
            raise ValueError("full-precision rows must precede quantized rows")
        lk.fp_k.append(np.array(k, dtype=np.float64))
        lk.fp_v.append(np.array(v, dtype=np.float64))

    def append_quantized(self, layer: int, k, v):
        lk = self.layers[layer]
        if self.kv_spec is None:
            lk.q_k.append(np.array(k, dtype=np.float64))
            lk.q_v.append(np.array(v, dtype=np.float64))
        else:
            lk.q_k.append(quantize_rtn_asymmetric(k, self.kv_spec, -1))
            lk.q_v.append(quantize_rtn_asymmetric(v, self.kv_spec, -1))

    @staticmethod
    def _rows(entries, d):
        rows = [dequantize(e) if isinstance(e, QuantizedTensor) else e for e in entries]
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, d))

    def keys(self, layer: int, d: int) -> np.ndarray:
        lk = self.layers[layer]
        return np.concatenate([self._rows(lk.fp_k, d), self._rows(lk.q_k, d)], axis=0)

    def values(self, layer: int, d: int) -> np.ndarray:
        lk = self.layers[layer]
        return np.concatenate([self._rows(lk.fp_v, d), self._rows(lk.q_v, d)], axis=0)

    def full_kv(self, layer: int, d: int):
        lk = self.layers[layer]
        return self._rows(lk.fp_k, d), self._rows(lk.fp_v, d)

    def tags(self, layer: int) -> list:
        lk = self.layers[layer]
        n_fp = sum(k.shape[0] for k in lk.fp_k)
        n_q = sum(k.shape[0] for k in lk.q_k)
        return ["full_precision"] * n_fp + ["quantized"] * n_q


def layer_forward_fp(x, w: LayerWeights, cache: MixedKVCache | None = None, layer_idx: int = 0):
    """Full-precision layer.  With a cache, attends to its rows and appends
    this call's K/V as full-precision rows."""
    x3, squeeze = _as3d(x)
    past = None
    if cache is not None:
        if not squeeze:
            raise ShapeError("cached inference runs one sequence at a time")
        past = (cache.keys(layer_idx, w.d), cache.values(layer_idx, w.d))
    out, k, v, _ = _layer(x3, w, "fp", past_kv=past)
    if cache is not None:
        cache.append_full(layer_idx, k[0], v[0])
    return out[0] if squeeze else out


def layer_forward_quant(x, w: LayerWeights, theta: BiSupParams | None, qcfg: QuantConfig,
                        cache: MixedKVCache | None = None, layer_idx: int = 0, clips=None):
    """Quantized layer.  ``theta=None`` runs plain RTN with per-column weight
    clips ``clips`` (grid-searched when omitted).  With a cache, attends to
    its rows and appends this call's K/V as quantized rows."""
    x3, squeeze = _as3d(x)
    past = None
    if cache is not None:
        if not squeeze:
            raise ShapeError("cached inference runs one sequence at a time")
        past = (cache.keys(layer_idx, w.d), cache.values(layer_idx, w.d))
    if theta is None:
        clips = clips if clips is not None else baseline_weight_clips(w, qcfg)
        out, k, v, _ = _layer(x3, w, "rtn", qcfg, clips=clips, past_kv=past)
    else:
        out, k, v, _ = _layer(x3, w, "theta", qcfg, theta=theta, past_kv=past)
    if cache is not None:
        cache.append_quantized(layer_idx, k[0], v[0])
    return out[0] if squeeze else out


def precompute_system_prompt(model: ToyModel, prompt_tokens, kv_spec: QuantSpec | None = None
                             ) -> MixedKVCache:
    """Encode the system prompt with the full-precision model into a fresh cache."""
    cache = MixedKVCache(len(model.layers), kv_spec)
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64).reshape(-1)
    if prompt_tokens.size == 0:
        return cache
    x = model.embed(prompt_tokens)
    for i, lw in enumerate(model.layers):
        x = layer_forward_fp(x, lw, cache, i)
    return cache


# -- whole-model passes ---------------------------------------------------------

def _tokens2d(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        return tokens[None], True
    return tokens, False


def model_forward_fp(model: ToyModel, tokens, collect_kv=False):
    """Per-layer outputs ``(batch, tokens, d)`` of the full-precision model."""
    tok, _ = _tokens2d(tokens)
    x = model.embed(tok)
    outs, kvs = [], []
    for lw in model.layers:
        x, k, v, _ = _layer(x, lw, "fp")
        outs.append(x)
        kvs.append((k, v))
    return (outs, kvs) if collect_kv else outs


def baseline_weight_clips(lw: LayerWeights, qcfg: QuantConfig, grid=None) -> dict:
    """Per-column weight clip arrays from a per-tensor grid search (q, k, v searched separately)."""
    wspec = qcfg.weight_spec()
    out = {}
    for site in SITES:
        w = lw.site_weight(site)
        clips = np.ones(w.shape[1])
        if wspec is not None:
            for lo, hi in lw.site_blocks(site) or [(0, w.shape[1])]:
                kw = {} if grid is None else {"grid": grid}
                clips[lo:hi] = grid_search_clip(w[:, lo:hi], wspec, axis=0, **kw)
        out[site] = clips
    return out


def init_layer_theta(lw: LayerWeights, qcfg: QuantConfig, rank, rng, lowrank_mode="slrec",
                     trainable=("clip", "smooth", "lowrank")) -> BiSupParams:
    sites = {}
    for site in SITES:
        sites[site] = init_site_params(lw.site_weight(site), qcfg, rank, rng, lowrank_mode,
                                       column_blocks=lw.site_blocks(site),
                                       kv=site == "qkv" and qcfg.kv_bits is not None)
    return BiSupParams(sites, tuple(trainable))


@dataclass
class QuantizedModel:
    """A model plus everything needed to run its quantized path.

    ``thetas`` holds one parameter set per layer; ``None`` means plain RTN
    with grid-searched weight clips.  ``boundary`` is the number of leading
    tokens treated as system prompt (encoded in full precision).
    """

    model: ToyModel
    qcfg: QuantConfig
    thetas: list | None = None
    boundary: int = 0
    _clips: list | None = field(default=None, repr=False)

    def clips(self) -> list:
        if self._clips is None:
            self._clips = [baseline_weight_clips(lw, self.qcfg) for lw in self.model.layers]
        return self._clips

    def layer_outputs(self, tokens) -> list:
        return model_forward_quant(self, tokens)

    def quantized_weights(self, layer: int) -> dict:
        """Integer weights of every site with the layer's parameters folded in."""
        lw = self.model.layers[layer]
        wspec = self.qcfg.weight_spec()
        if wspec is None:
            return {}
        out = {}
        for site in SITES:
            w = lw.site_weight(site)
            if self.thetas is None:
                clip = self.clips()[layer][site][:, None]
                out[site] = quantize(w, wspec.with_clip(clip), 0)
                continue
            sp: SiteParams = self.thetas[layer].sites[site]
            w_e = w * sp.smooth.s2[:, None]
            if sp.lowrank is not None:
                w_e = effective_weight(w_e, sp.lowrank)
            out[site] = quantize(w_e, wspec.with_clip(sp.clip.w_clip), 0)
        return out


def model_forward_quant(qm: QuantizedModel, tokens):
    """Per-layer outputs of the quantized model over all positions.

    Positions before ``qm.boundary`` come from the full-precision model,
    which is how the system-prompt cache is produced; the remaining tokens
    run through the quantized layers and attend to that cache.
    """
    tok, _ = _tokens2d(tokens)
    p = qm.boundary
    if p > tok.shape[1]:
        raise ShapeError("boundary beyond sequence length")
    fp_prompt, prompt_kv = ([], [])
    if p:
        fp_prompt, prompt_kv = model_forward_fp(qm.model, tok[:, :p], collect_kv=True)
    x = qm.model.embed(tok[:, p:])
    outs = []
    for i, lw in enumerate(qm.model.layers):
        past = prompt_kv[i] if p else None
        if x.shape[1] == 0:
            y = x
        elif qm.thetas is None:
            y, _, _, _ = _layer(x, lw, "rtn", qm.qcfg, clips=qm.clips()[i], past_kv=past)
        else:
            y, _, _, _ = _layer(x, lw, "theta", qm.qcfg, theta=qm.thetas[i], past_kv=past)
        outs.append(np.concatenate([fp_prompt[i], y], axis=1) if p else y)
        x = y
    return outs


@dataclass
class PropagationTrace:
    mse: list
    tag: str = "eval"
    start: int = 0

    @property
    def final(self) -> float:
        return self.mse[-1]

    def suppression(self, baseline: "PropagationTrace") -> list:
        """``1 - self/baseline`` per layer (0 where the baseline error is 0)."""
        return [0.0 if b == 0 else 1.0 - s / b for s, b in zip(self.mse, baseline.mse)]


def trace_from_outputs(fp_outs, q_outs, tag="eval", start=0) -> PropagationTrace:
    mse = []
    for a, b in zip(fp_outs, q_outs):
        d = a[:, start:] - b[:, start:]
        mse.append(float(np.mean(d * d)))
    return PropagationTrace(mse, tag, start)


def trace_propagation(model_fp, model_quant, tokens, tag="eval", start=0) -> PropagationTrace:
    """Per-layer MSE between two independent runs over the same tokens.

    ``start`` skips leading positions (e.g. to compare only user tokens).
    """
    return trace_from_outputs(model_fp.layer_outputs(tokens), model_quant.layer_outputs(tokens),
                              tag, start)
