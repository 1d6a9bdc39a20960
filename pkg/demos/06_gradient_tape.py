"""The reverse-mode tape that everything trains on.

Nodes are recorded in construction order (a topological order by
construction), so the backward pass is one reversed sweep. Every primitive's
hand-derived backward rule is verified against central finite differences.
"""

import numpy as np

from ovvad import numkernel as nk

rng = np.random.default_rng(2)

# a small expression: mean(gelu(X W) * M)
x = rng.standard_normal((4, 3))
w = rng.standard_normal((3, 2))
m = rng.standard_normal((4, 2))

tape = nk.Tape()
xv, wv = tape.leaf(x, name="x"), tape.leaf(w, name="w")
loss = nk.vmean(nk.gelu_v(xv @ wv) * m)
print(f"forward value: {float(loss.data):.6f}")

tape.backward(loss)
print("d loss / d w:")
print(np.round(tape.gradient(wv), 4))

# the same gradient, the slow way
err = nk.grad_check(lambda p: nk.vmean(nk.gelu_v(p["x"] @ p["w"]) * m), {"x": x, "w": w})
print(f"max relative error vs central differences: {err:.2e}")

# an untouched leaf gets an exact-zero gradient
unused = tape.leaf(np.ones(5), name="unused")
print(f"gradient of an unused parameter: {tape.gradient(unused)}")

# and one AdamW step on the checked gradients
params = {"w": w.copy()}
state = nk.adamw_init(params, lr=0.1)
nk.adamw_step(params, {"w": tape.gradient(wv)}, state)
print(f"|w - w'| after one AdamW step at lr=0.1: {np.abs(params['w'] - w).max():.4f}")
