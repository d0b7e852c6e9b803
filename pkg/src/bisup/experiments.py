"""Experiment commands behind the CLI.

Every command takes a :class:`RunConfig` and returns ``(results, timing)``.
``results`` is plain JSON data and fully determined by the config; wall
times live in ``timing`` and are written to a sidecar file so that reports
stay byte-identical across runs.

Calibration data are seeded random token sequences with the bos token at
position 0.  Toy models have no language, so there is no notion of a
realistic corpus here; the calibration and eval sets simply come from two
independent random streams.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .calibration import (
    CalibBatch,
    CalibConfig,
    calibrate_model,
    site_gradcheck,
    theta_gradcheck,
)
from .errors import ConfigError
from .io import load_model, load_quantized, model_to_bytes, save_quantized
from .model import (
    QuantizedModel,
    _layer,
    add_attention_sink,
    init_layer_theta,
    synth_model,
    trace_propagation,
)
from .params import init_site_params
from .quant import QuantConfig

SCHEMA = "bisup.report/1"
COMMANDS = ("synth", "calibrate", "trace", "ablate", "sweep", "gradcheck")
BOS = 0
CALIB_STREAM, EVAL_STREAM = 1, 2
TOY_AXES = {"samples": [8, 16, 32], "epochs": [2, 5, 10], "rank": [4, 8, 16]}
FULL_AXES = {"samples": [64, 128, 256], "epochs": [5, 10, 20], "rank": [16, 32, 64]}
ABLATION_ROWS = (
    ("baseline RTN", None, 0),
    ("+FWAC", ("clip",), 0),
    ("+SWAS", ("clip", "smooth"), 0),
    ("+SLREC", ("clip", "smooth", "lowrank"), 0),
    ("+PromptMixed", ("clip", "smooth", "lowrank"), None),  # boundary from config
)
DEFAULT_DIMS = {"d": 64, "n_heads": 4, "hidden": 256, "n_layers": 2, "vocab": 256}


def make_tokens(seed: int, n: int, length: int, vocab: int, stream: int) -> np.ndarray:
    """``(n, length)`` token ids, bos first, the rest uniform over the other ids."""
    if vocab < 2:
        raise ConfigError("vocab must hold bos plus at least one other token")
    rng = np.random.default_rng([seed, stream])
    tok = rng.integers(1, vocab, (n, length))
    tok[:, 0] = BOS
    return tok


@dataclass
class RunConfig:
    command: str = "calibrate"
    model: str | None = None  # BSMD file; synthesized from ``dims`` when absent
    quantized: str | None = None  # calibrated model file for trace
    spec: str = "W3A3-g16"
    seed: int = 0
    out: str | None = None
    format: str = "json"
    dims: dict = field(default_factory=dict)
    calib: dict = field(default_factory=dict)  # CalibConfig overrides
    eval_samples: int = 16
    sink: float | None = None  # attention-sink strength for synthesized models
    ablate_boundary: int = 1
    axes: dict | None = None
    full_axes: bool = False
    gradcheck: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.format not in ("json", "csv"):
            raise ConfigError(f"unknown report format {self.format!r}")
        bad = set(self.dims) - set(DEFAULT_DIMS)
        if bad:
            raise ConfigError(f"unknown model dims {sorted(bad)}")
        self.dims = {**DEFAULT_DIMS, **self.dims}
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be positive")
        if self.ablate_boundary < 1:
            raise ConfigError("ablate_boundary must be at least 1")
        if self.axes is not None:
            bad = set(self.axes) - set(TOY_AXES)
            if bad:
                raise ConfigError(f"unknown sweep axes {sorted(bad)}")
            if any(not v for v in self.axes.values()):
                raise ConfigError("sweep axes must be non-empty")
        self.calib_config()  # validates spec and calibration params

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys {sorted(bad)}")
        return cls(**d)

    def calib_config(self, **over) -> CalibConfig:
        kw = {**self.calib, **over}
        bad = set(kw) - {f.name for f in fields(CalibConfig)}
        if bad:
            raise ConfigError(f"unknown calibration params {sorted(bad)}")
        try:
            return CalibConfig(spec=self.spec, seed=self.seed, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def sweep_axes(self) -> dict:
        base = FULL_AXES if self.full_axes else TOY_AXES
        return {**base, **(self.axes or {})}

    def report_config(self) -> dict:
        """The config as recorded in a report (output location excluded)."""
        d = asdict(self)
        d.pop("out")
        d.pop("format")
        return d


def load_run_config(path=None, **overrides) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d)


# -- shared pieces --------------------------------------------------------------

def get_model(cfg: RunConfig):
    if cfg.model:
        try:
            model = load_model(cfg.model)[0]
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load model {cfg.model}: {exc}") from exc
    else:
        model = synth_model(seed=cfg.seed, **cfg.dims)
    if cfg.sink:
        model = add_attention_sink(model, cfg.sink)
    return model


def datasets(cfg: RunConfig, model, n_samples=None):
    cc = cfg.calib_config()
    n = n_samples or cc.n_samples
    calib = make_tokens(cfg.seed, n, cc.seq_len, model.vocab, CALIB_STREAM)
    ev = make_tokens(cfg.seed, cfg.eval_samples, cc.seq_len, model.vocab, EVAL_STREAM)
    return calib, ev


def final_losses(result) -> dict:
    h = result.histories
    return {"first": h[-1][0] if h[-1] else None, "final": h[-1][-1] if h[-1] else None}


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig):
    t0 = time.perf_counter()
    model = get_model(cfg)
    data = model_to_bytes(model)
    res = {
        "dims": cfg.dims if not cfg.model else {
            "d": model.d, "n_heads": model.n_heads, "hidden": model.hidden,
            "n_layers": len(model.layers), "vocab": model.vocab},
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    return res, {"total_s": time.perf_counter() - t0}, data


def run_calibration(cfg: RunConfig, model, calib, ev, **over):
    cc = cfg.calib_config(**over)
    res = calibrate_model(model, calib, cc)
    base = QuantizedModel(model, cc.qcfg)
    tb = trace_propagation(model, base, ev)
    tq = trace_propagation(model, res.qmodel, ev)
    return res, tb, tq


def cmd_calibrate(cfg: RunConfig):
    t0 = time.perf_counter()
    model = get_model(cfg)
    calib, ev = datasets(cfg, model)
    res, tb, tq = run_calibration(cfg, model, calib, ev)
    out = {
        "spec": cfg.spec,
        "layers": [
            {"layer": i, "losses": r.losses, "lr": r.lr, "restarts": r.restarts}
            for i, r in enumerate(res.layer_results)
        ],
        "eval_mse": {"baseline": tb.mse, "bisup": tq.mse},
        "suppression": tq.suppression(tb),
    }
    return out, {"total_s": time.perf_counter() - t0}, res.qmodel


def cmd_trace(cfg: RunConfig):
    t0 = time.perf_counter()
    model = get_model(cfg)
    calib, ev = datasets(cfg, model)
    qcfg = QuantConfig.parse(cfg.spec)
    if cfg.quantized:
        try:
            qm = load_quantized(cfg.quantized, cfg.spec)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load quantized model {cfg.quantized}: {exc}") from exc
    else:
        qm = calibrate_model(model, calib, cfg.calib_config()).qmodel
    base = QuantizedModel(model, qcfg)
    out = {"spec": cfg.spec, "datasets": {}}
    for tag, tok in (("calib", calib), ("eval", ev)):
        tb = trace_propagation(model, base, tok, tag)
        tq = trace_propagation(model, qm, tok, tag)
        out["datasets"][tag] = {"baseline": tb.mse, "bisup": tq.mse,
                                "suppression": tq.suppression(tb)}
    return out, {"total_s": time.perf_counter() - t0}


def cmd_ablate(cfg: RunConfig):
    """The cumulative ladder: RTN, then clipping, smoothing, low-rank, mixed prompt."""
    model = get_model(cfg)
    calib, ev = datasets(cfg, model)
    qcfg = QuantConfig.parse(cfg.spec)
    rows, timing = [], {}
    for name, techniques, boundary in ABLATION_ROWS:
        t0 = time.perf_counter()
        if techniques is None:
            qm, train = QuantizedModel(model, qcfg), {"first": None, "final": None}
            boundary = 0
        else:
            boundary = cfg.ablate_boundary if boundary is None else boundary
            res = calibrate_model(model, calib, cfg.calib_config(techniques=techniques,
                                                                  prompt_len=boundary))
            qm, train = res.qmodel, final_losses(res)
        te = trace_propagation(model, qm, ev, "eval")
        tc = trace_propagation(model, qm, calib, "calib")
        rows.append({
            "row": name,
            "techniques": list(techniques or ()),
            "boundary": boundary,
            "final_mse": te.final,
            "eval_mse": te.mse,
            "calib_mse": tc.final,
            "train_loss": train,
        })
        timing[name] = time.perf_counter() - t0
    return {"spec": cfg.spec, "rows": rows}, timing


def _sweep_cell(args):
    cfg_dict, cell = args
    cfg = RunConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    model = get_model(cfg)
    calib, ev = datasets(cfg, model, n_samples=cell["samples"])
    res, tb, tq = run_calibration(cfg, model, calib, ev, n_samples=cell["samples"],
                                  epochs=cell["epochs"], rank=cell["rank"])
    row = {**cell, "final_mse": tq.final, "baseline_mse": tb.final,
           "train_loss": final_losses(res)}
    return row, time.perf_counter() - t0


def sweep_cells(cfg: RunConfig) -> list:
    ax = cfg.sweep_axes()
    return [{"samples": s, "epochs": e, "rank": r}
            for s in ax["samples"] for e in ax["epochs"] for r in ax["rank"]]


def sweep_workers() -> int:
    raw = os.environ.get("BISUP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BISUP_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("BISUP_THREADS must be at least 1")
    return n


def cmd_sweep(cfg: RunConfig, on_cell=None):
    """One calibration per grid cell.  ``on_cell(partial_results)`` is called after each cell."""
    cells = sweep_cells(cfg)
    base = asdict(cfg)
    jobs = [(base, c) for c in cells]
    rows, timing = [None] * len(cells), {}

    def done(i, row, secs):
        rows[i] = row
        timing[f"cell{i}"] = secs
        if on_cell is not None:
            on_cell({"spec": cfg.spec, "axes": cfg.sweep_axes(), "complete": False,
                     "cells": [r for r in rows if r is not None]})

    workers = min(sweep_workers(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_cell, j): i for i, j in enumerate(jobs)}
            for fut, i in futures.items():
                row, secs = fut.result()
                done(i, row, secs)
    else:
        for i, j in enumerate(jobs):
            done(i, *_sweep_cell(j))
    return {"spec": cfg.spec, "axes": cfg.sweep_axes(), "complete": True, "cells": rows}, timing


def _perturb(sp, rng):
    sp.clip.w_clip[:] = rng.uniform(0.6, 1.0, sp.clip.w_clip.shape)
    sp.clip.a_clip[:] = rng.uniform(0.6, 1.0, sp.clip.a_clip.shape)
    if sp.clip.kv_clip is not None:
        sp.clip.kv_clip[:] = rng.uniform(0.6, 1.0, 2)
    sp.smooth.log_s1[:] = rng.normal(0, 0.2, sp.smooth.log_s1.shape)
    sp.smooth.log_s2[:] = rng.normal(0, 0.2, sp.smooth.log_s2.shape)
    if sp.lowrank is not None:
        sp.lowrank.a[:] = rng.normal(0, 0.3, sp.lowrank.a.shape)
        sp.lowrank.b[:] = rng.normal(0, 0.3, sp.lowrank.b.shape)


def gradcheck_site(seed=0, spec="W3A3-g4", rank=2, h=1e-5, tolerance=1e-4):
    """Every parameter of one site on a 4-token, 8-feature input."""
    rng = np.random.default_rng(seed)
    qcfg = QuantConfig.parse(spec)
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(8, 4))
    sp = init_site_params(w, qcfg, rank, rng)
    _perturb(sp, rng)
    return site_gradcheck(x, w, sp, qcfg, h, tolerance)


def gradcheck_layer(seed=0, spec="W3A3-g4", rank=2, h=1e-5, tolerance=1e-4):
    """A whole tiny layer (d=8, 2 heads) behind a one-token full-precision prompt."""
    rng = np.random.default_rng(seed)
    qcfg = QuantConfig.parse(spec)
    model = synth_model(d=8, n_heads=2, hidden=16, n_layers=1, vocab=20, seed=seed)
    lw = model.layers[0]
    theta = init_layer_theta(lw, qcfg, rank, rng)
    for sp in theta.sites.values():
        _perturb(sp, rng)
    tok = make_tokens(seed, 2, 5, 20, CALIB_STREAM)
    x = model.embed(tok)
    _, k, v, _ = _layer(x[:, :1], lw, "fp")
    y, _, _, _ = _layer(x[:, 1:], lw, "fp", past_kv=(k, v))
    return theta_gradcheck(lw, theta, qcfg, CalibBatch(y, x[:, 1:], (k, v)), h, tolerance)


def cmd_gradcheck(cfg: RunConfig):
    t0 = time.perf_counter()
    kw = {"spec": "W3A3-g4", "rank": 2, "h": 1e-5, "tolerance": 1e-4, **cfg.gradcheck}
    site = gradcheck_site(cfg.seed, **kw)
    layer = gradcheck_layer(cfg.seed, **kw)
    out = {"site": site.to_dict(), "layer": layer.to_dict(),
           "passed": site.passed and layer.passed}
    return out, {"total_s": time.perf_counter() - t0}


# -- reports ------------------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def build_report(cfg: RunConfig, results) -> dict:
    return {
        "schema": SCHEMA,
        "command": cfg.command,
        "config": cfg.report_config(),
        "results": results,
        "results_sha256": hashlib.sha256(_canonical(results)).hexdigest(),
    }


def report_rows(report: dict) -> list:
    """Flat table view of a report for CSV export."""
    cmd, res = report["command"], report["results"]
    if cmd == "ablate":
        return [{"row": r["row"], "techniques": "+".join(r["techniques"]), "boundary": r["boundary"],
                 "final_mse": r["final_mse"], "calib_mse": r["calib_mse"],
                 "train_loss": r["train_loss"]["final"]} for r in res["rows"]]
    if cmd == "sweep":
        return [{"samples": c["samples"], "epochs": c["epochs"], "rank": c["rank"],
                 "final_mse": c["final_mse"], "baseline_mse": c["baseline_mse"],
                 "train_loss": c["train_loss"]["final"]} for c in res["cells"]]
    if cmd == "trace":
        return [{"dataset": tag, "layer": i, "baseline": d["baseline"][i], "bisup": d["bisup"][i],
                 "suppression": d["suppression"][i]}
                for tag, d in res["datasets"].items() for i in range(len(d["baseline"]))]
    if cmd == "calibrate":
        return [{"layer": l["layer"], "step": e, "loss": v}
                for l in res["layers"] for e, v in enumerate(l["losses"])]
    if cmd == "gradcheck":
        return [{"check": k, "max_rel_error": res[k]["max_rel_error"],
                 "n_checked": res[k]["n_checked"], "n_excluded": len(res[k]["excluded"]),
                 "passed": res[k]["passed"]} for k in ("site", "layer")]
    return [{"key": k, "value": json.dumps(v, sort_keys=True)} for k, v in sorted(res.items())]


def render_report(report: dict, fmt="json") -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    rows = report_rows(report)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def write_text_atomic(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_timing(path, command: str, timing: dict):
    side = {"command": command, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "wall_s": timing}
    write_text_atomic(Path(str(path) + ".timing.json"), json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    """Load a JSON report and verify its schema and results hash."""
    rep = json.loads(Path(path).read_text())
    if rep.get("schema") != SCHEMA:
        raise ValueError(f"unsupported report schema {rep.get('schema')!r}")
    if hashlib.sha256(_canonical(rep["results"])).hexdigest() != rep["results_sha256"]:
        raise ValueError("report results do not match their hash")
    return rep


def run(cfg: RunConfig, out=None):
    """Run one command; write its report (and model file, if any) under ``out``.

    Returns the report dict.
    """
    out = out if out is not None else cfg.out
    extra = None
    if cfg.command == "synth":
        res, timing, extra = cmd_synth(cfg)
    elif cfg.command == "calibrate":
        res, timing, extra = cmd_calibrate(cfg)
    elif cfg.command == "trace":
        res, timing = cmd_trace(cfg)
    elif cfg.command == "ablate":
        res, timing = cmd_ablate(cfg)
    elif cfg.command == "sweep":
        def flush(partial):
            write_text_atomic(out, render_report(build_report(cfg, partial), cfg.format))
        res, timing = cmd_sweep(cfg, flush if out is not None else None)
    else:
        res, timing = cmd_gradcheck(cfg)
    report = build_report(cfg, res)
    if out is not None:
        out = Path(out)
        if cfg.command == "synth":
            # the model file is the product; the report goes next to it
            out.write_bytes(extra)
            rep_path = Path(str(out) + ".report." + cfg.format)
        elif cfg.command == "calibrate":
            save_quantized(out, extra)
            rep_path = Path(str(out) + ".report." + cfg.format)
        else:
            rep_path = out
        write_text_atomic(rep_path, render_report(report, cfg.format))
        write_timing(rep_path, cfg.command, timing)
    return report
