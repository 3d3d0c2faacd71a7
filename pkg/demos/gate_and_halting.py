"""Walk through one gated refinement step and the three halting rules.

Run: python demos/gate_and_halting.py
"""

import numpy as np

from loopus import autograd as ag
from loopus.gate import GateParams, gate_step
from loopus.halting import HaltPolicy, run_halting, stop_cdf
from loopus.loop import LoopUSModel, encode_no_grad, unroll_eval
from loopus.model import BlockSplit, ModelConfig

rng = np.random.default_rng(0)

# a neutral gate (zero weights, a_log = 0) moves exactly half way to the proposal
p = GateParams(4, np.float64)
h = rng.normal(size=(1, 2, 4))
m = rng.normal(size=(1, 2, 4))
out, rec = gate_step(ag.Tensor(h), ag.Tensor(m), p)
print("alpha with neutral init:", rec.alpha.ravel()[:4])
print("out == (h + m) / 2:", np.allclose(out.data, (h + m) / 2))

# hazard-rate halting: two steps of 0.5 give a cumulative exit probability of 0.75
for lams in ([0.5], [0.5, 0.5]):
    stop, cdf = stop_cdf(lams, 0.7)
    print(f"hazards {lams}: cdf {cdf:.2f}, stop at q_th=0.7: {stop}")

# an untrained looped model, unrolled past its training budget
cfg = ModelConfig(vocab_size=12, context_len=16, d_model=32, n_heads=4, n_layers=4,
                  split=BlockSplit(1, 3), mlp_ratio=2, seed=0)
model = LoopUSModel(cfg)
x = rng.integers(1, 12, size=(2, 8))
traj = unroll_eval(model, encode_no_grad(model, x), 12)
steps = [np.linalg.norm(b - a) for a, b in zip(traj.states, traj.states[1:])]
print("step sizes along the loop:", " ".join(f"{s:.2f}" for s in steps))

for mode in ("threshold", "convergence", "cdf"):
    _, trace = run_halting(encode_no_grad(model, x[:1]), HaltPolicy(mode=mode, eps=1.0), model)
    print(f"{mode:12s} exit depth {trace.exit_depth}")
