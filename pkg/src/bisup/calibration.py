"""Layer-wise quantization-aware fine-tuning of the parameter spaces.

Layers are calibrated in order.  Two activation streams run side by side:
the full-precision stream (inputs to, and targets from, the original layers)
and the quantized stream (inputs produced by the already-calibrated quantized
layers).  Each layer's parameters are trained with AdamW on the mean squared
error between its quantized output and the full-precision target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .model import (
    QuantizedModel,
    ToyModel,
    _layer,
    init_layer_theta,
    layer_backward,
)
from .params import BiSupParams, SiteParams, site_backward, site_forward
from .quant import QuantConfig, QuantTape
from .tensor import matmul

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass
class CalibConfig:
    spec: str = "W3A3-g16"
    epochs: int = 5
    lr: float = 0.005
    batch_size: int = 8
    n_samples: int = 32
    seq_len: int = 32
    rank: int = 32
    seed: int = 0
    prompt_len: int = 0
    preprocess: str = "none"
    techniques: tuple = ("clip", "smooth", "lowrank")
    lowrank_mode: str = "slrec"
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.techniques = tuple(self.techniques)
        self.betas = tuple(self.betas)
        bad = set(self.techniques) - {"clip", "smooth", "lowrank"}
        if bad:
            raise ConfigError(f"unknown techniques {sorted(bad)}")
        if self.lowrank_mode not in ("slrec", "lrec"):
            raise ConfigError(f"unknown low-rank mode {self.lowrank_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.n_samples < 1 or self.seq_len < 1:
            raise ConfigError("epochs, batch_size, n_samples and seq_len must be positive")
        if not 0 <= self.prompt_len < self.seq_len:
            raise ConfigError("prompt_len must be in [0, seq_len)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        self.qcfg  # validate the spec string

    @property
    def qcfg(self) -> QuantConfig:
        return QuantConfig.parse(self.spec)

    @property
    def effective_rank(self):
        return self.rank if "lowrank" in self.techniques else None


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> None:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def mse_layer_loss(y_fp, y_int) -> float:
    y_fp = np.asarray(y_fp, dtype=np.float64)
    y_int = np.asarray(y_int, dtype=np.float64)
    if y_fp.shape != y_int.shape:
        raise ValueError(f"shape mismatch {y_fp.shape} vs {y_int.shape}")
    d = y_int - y_fp
    return float(np.mean(d * d))


# -- layer calibration --------------------------------------------------------

@dataclass
class CalibBatch:
    """``x_fp``: full-precision target of the layer being calibrated;
    ``x_int``: its input on the quantized stream; ``prompt_kv``: full-precision
    K/V of the system prompt for this layer (or ``None``)."""

    x_fp: np.ndarray
    x_int: np.ndarray
    prompt_kv: tuple | None = None

    def __post_init__(self):
        if self.x_fp.shape != self.x_int.shape:
            raise ValueError("fp and quantized streams must have the same shape")


@dataclass
class LayerResult:
    theta: BiSupParams
    losses: list
    lr: float
    restarts: int = 0


def layer_loss_and_grad(lw, theta: BiSupParams, qcfg: QuantConfig, batch: CalibBatch,
                        tape: QuantTape | None = None):
    """Quantized forward on one batch, loss, and gradients accumulated into ``theta``."""
    out, _, _, ctx = _layer(batch.x_int, lw, "theta", qcfg, theta=theta,
                            past_kv=batch.prompt_kv, tape=tape, need_ctx=True)
    loss = mse_layer_loss(batch.x_fp, out)
    dout = 2.0 * (out - batch.x_fp) / out.size
    layer_backward(dout, lw, theta, qcfg, ctx)
    return loss


def calibrate_layer(lw, batches: list, theta: BiSupParams, qcfg: QuantConfig,
                    config: CalibConfig) -> LayerResult:
    """Train ``theta`` on ``batches`` for ``config.epochs`` epochs.

    If the loss exceeds ten times its first value the layer is restarted once
    from the initial parameters at half the learning rate; a second blow-up,
    or any non-finite loss, raises :class:`NumericError`.
    """
    start = theta.copy()
    lr = config.lr
    for attempt in range(2):
        theta = start.copy() if attempt else theta
        state = AdamWState(lr, config.betas[0], config.betas[1], config.eps, config.weight_decay)
        losses = []
        diverged = False
        for _ in range(config.epochs):
            for batch in batches:
                theta.zero_grad()
                loss = layer_loss_and_grad(lw, theta, qcfg, batch)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite calibration loss at step {len(losses)} (lr={lr}); "
                        "try a smaller learning rate"
                    )
                losses.append(loss)
                if loss > DIVERGENCE_FACTOR * losses[0] and losses[0] > 0:
                    diverged = True
                    break
                adamw_step(theta.named_tensors(), theta.named_grads(), state)
                theta.project()
            if diverged:
                break
        if not diverged:
            return LayerResult(theta, losses, lr, attempt)
        log.warning("calibration loss diverged (%.3g > %gx initial); restarting with lr=%g",
                    losses[-1], DIVERGENCE_FACTOR, lr / 2)
        lr /= 2
    raise NumericError(f"calibration diverged twice (final lr={lr}); lower the learning rate")


PREPROCESS_HOOKS = {"none": lambda model, tokens: model}


@dataclass
class CalibrationResult:
    qmodel: QuantizedModel
    layer_results: list
    x_fp: np.ndarray
    x_int: np.ndarray

    @property
    def histories(self) -> list:
        return [r.losses for r in self.layer_results]


def _chunks(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def calibrate_model(model: ToyModel, tokens, config: CalibConfig, rng=None) -> CalibrationResult:
    """Calibrate every layer in order on ``tokens`` (``(n_samples, seq_len)`` ids).

    The first ``config.prompt_len`` positions form the system prompt: they are
    encoded by the full-precision model only, and the quantized stream starts
    after them.
    """
    if config.preprocess not in PREPROCESS_HOOKS:
        raise ConfigError(f"unknown preprocessing hook {config.preprocess!r}")
    tokens = np.asarray(tokens, dtype=np.int64)
    model = PREPROCESS_HOOKS[config.preprocess](model, tokens)
    qcfg = config.qcfg
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    p = config.prompt_len
    x_fp = model.embed(tokens)
    x_int = model.embed(tokens[:, p:])
    chunks = _chunks(tokens.shape[0], config.batch_size)
    thetas, results = [], []
    for i, lw in enumerate(model.layers):
        try:
            x_fp, k_fp, v_fp, _ = _layer(x_fp, lw, "fp")
            prompt_kv = (k_fp[:, :p], v_fp[:, :p]) if p else None
            theta = init_layer_theta(lw, qcfg, config.effective_rank, rng, config.lowrank_mode,
                                     config.techniques)
            batches = []
            for sl in chunks:
                pkv = (prompt_kv[0][sl], prompt_kv[1][sl]) if p else None
                batches.append(CalibBatch(x_fp[sl, p:], x_int[sl], pkv))
            res = calibrate_layer(lw, batches, theta, qcfg, config)
            x_int, _, _, _ = _layer(x_int, lw, "theta", qcfg, theta=res.theta, past_kv=prompt_kv)
        except NumericError as exc:
            raise NumericError(f"layer {i}: {exc}") from exc
        log.info("layer %d: loss %.4g -> %.4g", i, res.losses[0] if res.losses else float("nan"),
                 res.losses[-1] if res.losses else float("nan"))
        thetas.append(res.theta)
        results.append(res)
    qm = QuantizedModel(model, qcfg, thetas, boundary=p)
    return CalibrationResult(qm, results, x_fp, x_int)


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple | None
    excluded: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "n_checked": self.n_checked,
            "worst": list(self.worst) if self.worst else None,
            "excluded": [list(e) for e in self.excluded],
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def finite_diff_check(loss_fn, params: dict, analytic: dict, h=1e-5, tolerance=1e-4,
                      max_coords=None, rng=None, floor=1e-8) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns a float or ``(float, reason)``; a non-empty
    reason on either side of a difference excludes that coordinate (used to
    skip points where a straight-through mask switches).  ``max_coords``
    samples at most that many coordinates per tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, worst_err, checked, excluded = None, 0.0, 0, []

    def evaluate():
        r = loss_fn(params)
        return r if isinstance(r, tuple) else (r, None)

    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        g = np.asarray(analytic[name]).reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp, rp = evaluate()
            flat[j] = orig - h
            fm, rm = evaluate()
            flat[j] = orig
            if rp or rm:
                excluded.append((name, int(j), rp or rm))
                continue
            num = (fp - fm) / (2 * h)
            err = abs(num - g[j]) / max(abs(num), abs(g[j]), floor)
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, int(j), float(g[j]), float(num))
    return GradCheckReport(float(worst_err), checked, worst, excluded, tolerance)


STE_BOUNDARY = "clamp boundary: straight-through mask switches within +-h"


def theta_gradcheck(lw, theta: BiSupParams, qcfg: QuantConfig, batch: CalibBatch, h=1e-5,
                    tolerance=1e-4, max_coords=None, rng=None) -> GradCheckReport:
    """Check the hand-written backward of a whole layer against finite differences.

    The forward pass is recorded once; finite differences are then taken on
    the replayed pass in which rounding residuals, group maxima and KV scales
    are frozen, i.e. on the exact function the straight-through gradient
    differentiates.
    """
    tape = QuantTape()
    theta.zero_grad()
    layer_loss_and_grad(lw, theta, qcfg, batch, tape)
    analytic = {k: v.copy() for k, v in theta.named_grads().items()}

    def loss_fn(_):
        tape.start_replay()
        out, _, _, _ = _layer(batch.x_int, lw, "theta", qcfg, theta=theta,
                              past_kv=batch.prompt_kv, tape=tape)
        return mse_layer_loss(batch.x_fp, out), (STE_BOUNDARY if tape.flipped else None)

    return finite_diff_check(loss_fn, theta.named_tensors(), analytic, h, tolerance,
                             max_coords, rng)


def site_gradcheck(x, w, sp: SiteParams, qcfg: QuantConfig, h=1e-5, tolerance=1e-4,
                   max_coords=None, rng=None) -> GradCheckReport:
    """Same check for a single quantized matmul site, loss ``mse(x @ w, <x> @ <w>)``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    target = matmul(x, w)
    theta = BiSupParams({"site": sp})
    tape = QuantTape()
    theta.zero_grad()
    y, ctx = site_forward(x, w, sp, qcfg, tape, need_ctx=True)
    site_backward(2.0 * (y - target) / y.size, sp, ctx, qcfg)
    analytic = {k: v.copy() for k, v in theta.named_grads().items()}

    def loss_fn(_):
        tape.start_replay()
        out, _ = site_forward(x, w, sp, qcfg, tape)
        return mse_layer_loss(target, out), (STE_BOUNDARY if tape.flipped else None)

    return finite_diff_check(loss_fn, theta.named_tensors(), analytic, h, tolerance,
                             max_coords, rng)
