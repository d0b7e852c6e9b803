"""Binary model files.

Layout (all integers little-endian u32, tensors in the BSTN encoding of
:mod:`bisup.tensor`)::

    "BSMD" version n_layers d n_heads hidden vocab
    n_tensors  { name_len name tensor }*
    n_sections { key_len key n_tensors { name_len name tensor }* }*
    meta_len   meta (UTF-8 JSON object)

Model tensors are named ``embedding`` and ``layers.<i>.<field>``.  Learned
parameters go into the sections ``theta1`` (clip values), ``theta2``
(log smoothing factors) and ``theta3`` (low-rank factors) with names
``layers.<i>.<site>.<param>``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

from .model import SITES, LayerWeights, QuantizedModel, ToyModel
from .params import BiSupParams, ClipParams, LowRankParams, SiteParams, SmoothParams
from .quant import QuantConfig
from .tensor import read_tensor, write_tensor

MODEL_MAGIC = b"BSMD"
FORMAT_VERSION = 1
THETA_SECTIONS = {"theta1": ("w_clip", "a_clip"), "theta2": ("log_s1", "log_s2"), "theta3": ("a", "b")}


def _u32(fh, n):
    fh.write(struct.pack("<I", n))


def _read_u32(fh) -> int:
    buf = fh.read(4)
    if len(buf) != 4:
        raise ValueError("truncated model file")
    return struct.unpack("<I", buf)[0]


def _write_str(fh, s: str):
    b = s.encode("utf-8")
    _u32(fh, len(b))
    fh.write(b)


def _read_str(fh) -> str:
    n = _read_u32(fh)
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated model file")
    return b.decode("utf-8")


def _write_named(fh, tensors: dict):
    _u32(fh, len(tensors))
    for name, t in tensors.items():
        _write_str(fh, name)
        write_tensor(fh, t)


def _read_named(fh) -> dict:
    out = {}
    for _ in range(_read_u32(fh)):
        name = _read_str(fh)
        out[name] = read_tensor(fh)
    return out


def _theta_sections(thetas) -> dict:
    sections = {k: {} for k in THETA_SECTIONS}
    for i, theta in enumerate(thetas):
        for site, sp in theta.sites.items():
            sections["theta1"][f"layers.{i}.{site}.w_clip"] = sp.clip.w_clip
            sections["theta1"][f"layers.{i}.{site}.a_clip"] = sp.clip.a_clip
            if sp.clip.kv_clip is not None:
                sections["theta1"][f"layers.{i}.{site}.kv_clip"] = sp.clip.kv_clip
            sections["theta2"][f"layers.{i}.{site}.log_s1"] = sp.smooth.log_s1
            sections["theta2"][f"layers.{i}.{site}.log_s2"] = sp.smooth.log_s2
            if sp.lowrank is not None:
                sections["theta3"][f"layers.{i}.{site}.a"] = sp.lowrank.a
                sections["theta3"][f"layers.{i}.{site}.b"] = sp.lowrank.b
    return sections


def model_to_bytes(model: ToyModel, thetas=None, meta=None) -> bytes:
    fh = io.BytesIO()
    fh.write(MODEL_MAGIC)
    for n in (FORMAT_VERSION, len(model.layers), model.d, model.n_heads, model.hidden, model.vocab):
        _u32(fh, n)
    tensors = {"embedding": model.embedding}
    for i, lw in enumerate(model.layers):
        for name in LayerWeights.TENSOR_NAMES:
            tensors[f"layers.{i}.{name}"] = getattr(lw, name)
    _write_named(fh, tensors)
    sections = _theta_sections(thetas) if thetas else {}
    _u32(fh, len(sections))
    for key, named in sections.items():
        _write_str(fh, key)
        _write_named(fh, named)
    _write_str(fh, json.dumps(meta or {}, sort_keys=True))
    return fh.getvalue()


def _build_thetas(n_layers, sections, meta):
    modes = meta.get("lowrank_mode", "slrec")
    trainable = tuple(meta.get("trainable", ("clip", "smooth", "lowrank")))
    t1, t2, t3 = (sections.get(k, {}) for k in THETA_SECTIONS)
    thetas = []
    for i in range(n_layers):
        sites = {}
        for site in SITES:
            pre = f"layers.{i}.{site}."
            lr = None
            if pre + "a" in t3:
                lr = LowRankParams(t3[pre + "a"], t3[pre + "b"], modes)
            sites[site] = SiteParams(
                ClipParams(t1[pre + "w_clip"], t1[pre + "a_clip"], t1.get(pre + "kv_clip")),
                SmoothParams(t2[pre + "log_s1"], t2[pre + "log_s2"]),
                lr,
            )
        thetas.append(BiSupParams(sites, trainable))
    return thetas


def model_from_bytes(data: bytes):
    """Returns ``(model, thetas_or_None, meta)``."""
    fh = io.BytesIO(data)
    if fh.read(4) != MODEL_MAGIC:
        raise ValueError("not a BSMD model file")
    version, n_layers, d, n_heads, hidden, vocab = (_read_u32(fh) for _ in range(6))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    tensors = _read_named(fh)
    sections = {}
    for _ in range(_read_u32(fh)):
        key = _read_str(fh)
        sections[key] = _read_named(fh)
    meta = json.loads(_read_str(fh))
    layers = []
    for i in range(n_layers):
        fields = {name: tensors[f"layers.{i}.{name}"] for name in LayerWeights.TENSOR_NAMES}
        layers.append(LayerWeights(**fields, n_heads=n_heads))
    model = ToyModel(tensors["embedding"], layers)
    if model.d != d or model.hidden != hidden or model.vocab != vocab:
        raise ValueError("model header does not match tensor shapes")
    thetas = _build_thetas(n_layers, sections, meta) if sections else None
    return model, thetas, meta


def save_model(path, model: ToyModel, thetas=None, meta=None) -> None:
    Path(path).write_bytes(model_to_bytes(model, thetas, meta))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def save_quantized(path, qm: QuantizedModel) -> None:
    meta = {"spec": qm.qcfg.name, "boundary": qm.boundary}
    if qm.thetas:
        t0 = qm.thetas[0]
        lr = t0.sites["qkv"].lowrank
        meta["lowrank_mode"] = lr.mode if lr is not None else "slrec"
        meta["trainable"] = list(t0.trainable)
    save_model(path, qm.model, qm.thetas, meta)


def load_quantized(path, spec: str | None = None) -> QuantizedModel:
    model, thetas, meta = load_model(path)
    spec = spec or meta.get("spec")
    if spec is None:
        raise ValueError("model file carries no quantization spec; pass one explicitly")
    qcfg = QuantConfig.disabled() if spec == "FP" else QuantConfig.parse(spec)
    return QuantizedModel(model, qcfg, thetas, int(meta.get("boundary", 0)))
