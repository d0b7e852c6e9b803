"""
Layer-by-layer error of a quantized toy model
=============================================

Plain RTN against a calibrated model on held-out inputs.  Calibration
here uses a shortened schedule so the script finishes in a few seconds.
"""
import numpy as np

from bisup import CalibConfig, QuantizedModel, calibrate_model, synth_model, trace_propagation
from bisup.experiments import make_tokens

model = synth_model(seed=0)
calib = make_tokens(0, 16, 32, model.vocab, 1)
held_out = make_tokens(0, 8, 32, model.vocab, 2)

cfg = CalibConfig(spec="W3A3-g16", epochs=2, n_samples=16)
rtn = QuantizedModel(model, cfg.qcfg)
result = calibrate_model(model, calib, cfg)

base = trace_propagation(model, rtn, held_out)
tuned = trace_propagation(model, result.qmodel, held_out)
for i, (b, t, s) in enumerate(zip(base.mse, tuned.mse, tuned.suppression(base))):
    print(f"layer {i}: rtn {b:.4f}  calibrated {t:.4f}  suppressed {100 * s:.0f}%")

for i, losses in enumerate(result.histories):
    print(f"layer {i} training loss {losses[0]:.4f} -> {losses[-1]:.4f}")
print("error grows with depth:", bool(np.all(np.diff(base.mse) >= 0)))
