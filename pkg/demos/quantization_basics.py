"""
Round-to-nearest quantization on a small tensor
===============================================

Symmetric codes, clipping, group-wise scales and the asymmetric
per-token format used for the KV cache.
"""
import numpy as np

from bisup.quant import QuantSpec, dequantize, quant_error, quantize

rng = np.random.default_rng(0)
x = rng.normal(size=(2, 16))
x[0, 3] = 8.0  # one outlier in the first row

# 3-bit symmetric per-token: codes live in [-3, 3], -4 is never used
q = quantize(x, QuantSpec(3))
print("codes, row 0:", q.codes[0])
print("scales:", q.scales.ravel())
print("squared error:", quant_error(x, QuantSpec(3)))

# clipping trades the outlier for finer steps on the rest of the row
bulk = np.arange(16) != 3
for c in (1.0, 0.7, 0.5):
    err = (x - dequantize(quantize(x, QuantSpec(3, clip=c)))) ** 2
    print(f"clip {c}: row 0 bulk error {err[0, bulk].sum():.3f}, total {err.sum():.3f}")

# groups of 4 isolate the outlier to its own scale
print("group of 4:", quant_error(x, QuantSpec(3, True, "group", 4)))

# asymmetric per-token, the KV cache format
kv = rng.uniform(-1, 3, size=(2, 8))
qa = quantize(kv, QuantSpec(3, False))
print("zero points:", qa.zero_points.ravel())
print("max abs error:", np.max(np.abs(kv - dequantize(qa))))
