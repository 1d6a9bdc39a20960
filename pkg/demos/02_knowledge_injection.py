"""Sigmoid-gated knowledge injection, frame by frame.

Each frame queries a small bank of phrase embeddings; sigmoid (rather than
softmax) gating lets a frame pick up several related concepts at once. The
injected vector is the gated average of the bank rows.
"""

import numpy as np

from ovvad.model import inject_knowledge
from ovvad.numkernel import Tape, sigmoid

rng = np.random.default_rng(1)
c = 8

# two knowledge prototypes: a "normal scene" direction and an "anomaly cue"
normal_proto = np.zeros(c)
normal_proto[0] = 1.0
anomaly_proto = np.zeros(c)
anomaly_proto[1] = 1.0
bank = np.stack([normal_proto, anomaly_proto])

# three frames: clearly normal, clearly anomalous, ambiguous
frames = np.stack([
    4.0 * normal_proto + 0.1 * rng.standard_normal(c),
    4.0 * anomaly_proto + 0.1 * rng.standard_normal(c),
    2.0 * normal_proto + 2.0 * anomaly_proto,
])

gates = sigmoid(frames @ bank.T)
print("gate matrix (rows: frames, cols: [normal proto, anomaly proto]):")
print(np.round(gates, 3))

tape = Tape()
injected = inject_knowledge(tape.leaf(frames), tape.leaf(bank)).data
print("\ninjected rows (first two coordinates carry the prototypes):")
print(np.round(injected[:, :2], 3))
print("\nthe ambiguous frame absorbs both concepts; sigmoid does not force a choice")
