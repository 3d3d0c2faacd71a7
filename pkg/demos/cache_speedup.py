"""Cached vs uncached looped generation, and why the per-depth caches matter.

Run: python demos/cache_speedup.py [gen_len]
"""

import sys

import numpy as np

from loopus.cache import bench_cache, generate, generate_uncached
from loopus.loop import LoopUSModel
from loopus.model import BlockSplit, ModelConfig

gen = int(sys.argv[1]) if len(sys.argv) > 1 else 128
cfg = ModelConfig(vocab_size=14, context_len=16 + gen, d_model=64, n_heads=4, n_layers=6,
                  split=BlockSplit(1, 5), mlp_ratio=2, seed=0)
model = LoopUSModel(cfg)

x = np.random.default_rng(0).integers(1, 14, size=(1, 16))
a = generate(model, x, 16, 4, keep_logits=True)
b = generate_uncached(model, x, 16, 4, keep_logits=True)
print("same tokens:", np.array_equal(a.tokens, b.tokens),
      " max logit diff:", max(float(np.abs(p - q).max()) for p, q in zip(a.logits, b.logits)))

r = bench_cache(model, 16, gen, depth=4, runs=3)
print(f"cached   {r.median('cached') * 1e3:7.2f} ms/token, slope {r.slope('cached'):.2e} s per prefix token")
print(f"uncached {r.median('uncached') * 1e3:7.2f} ms/token, slope {r.slope('uncached'):.2e} s per prefix token")
print(f"speedup {r.speedup:.1f}x")
