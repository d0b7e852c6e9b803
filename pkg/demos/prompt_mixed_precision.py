"""
Keeping the first token in full precision
=========================================

On a model whose heads all lean on the first token, leaving that
token's keys and values unquantized removes most of the error.
"""
from bisup import QuantConfig, QuantizedModel, synth_model, trace_propagation
from bisup.experiments import make_tokens
from bisup.model import add_attention_sink

qcfg = QuantConfig.parse("W3A3-g16")
plain = synth_model(seed=1)
sink = add_attention_sink(plain)
tokens = make_tokens(1, 8, 32, plain.vocab, 2)

for name, model in (("plain", plain), ("first-token heavy", sink)):
    for boundary in (0, 1):
        t = trace_propagation(model, QuantizedModel(model, qcfg, boundary=boundary), tokens, start=1)
        print(f"{name:18s} boundary {boundary}: final-layer MSE {t.final:.4f}")
