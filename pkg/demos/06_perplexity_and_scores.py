"""Byte-level perplexity against memory caps, plus kNN / focus scores.

Run:  python3 demos/06_perplexity_and_scores.py
"""

import numpy as np

from fot.analysis import focus_score, knn_score, perplexity_eval
from fot.config import get_preset
from fot.memstore import MemoryIndex
from fot.model import Transformer
from fot.tasks import encode_bytes, gen_text_corpus

cfg = get_preset("desk-byte")
cfg.model.local_ctx_len = 64
model = Transformer(cfg.model, seed=0)

docs = [(i, encode_bytes(d)) for i, d in enumerate(gen_text_corpus(4, 600, seed=1))]

print("untrained byte model: perplexity should sit at vocab size (256)")
print(f"{'memory cap':>10} {'ppl':>9} {'tokens':>7}")
for cap in (0, 64, 256):
    res = perplexity_eval(model, docs, "single_doc", k=16, memory_token_cap=cap)
    print(f"{cap:>10} {res.ppl:>9.2f} {res.n_tokens:>7}")

res_multi = perplexity_eval(model, docs, "multi_doc", k=16)
print(f"multi-doc (no resets): ppl {res_multi.ppl:.2f} over {res_multi.n_tokens} tokens")

print("\nkNN score: softmax share over retrieved entries only")
rng = np.random.default_rng(0)
q = rng.standard_normal(8)
keys = rng.standard_normal((4, 8))
print("  4 random entries:", np.round(knn_score(q, keys), 3))

print("\nfocus score: one entry against its +-32 positional neighbors")
idx = MemoryIndex([0], 1, 8)
block = rng.standard_normal((1, 80, 8)).astype(np.float32)
idx.append_block(0, block, block, doc_id=0, positions=np.arange(80))
s = focus_score(idx, 0, 0, doc_id=0, position=40, query=block[0, 40] * 4)
print(f"  entry at position 40, query aligned with its key: {s:.3f}")
