"""Knowledge injection on the bride/church example.

Builds a three-fact knowledge base, enriches one question/answer pair and
prints the resulting token layout, relative positions and visible matrix.
Then shows that, in a one-layer encoder, tokens that received no knowledge
keep exactly the outputs they had without it.

    python demos/inject_church.py
"""

import numpy as np

from kgvl import Config, Model, Region, Vocab, assemble
from kgvl.embedding import encode
from kgvl.kb import DEFAULT_STOPLIST, kb_from_text
from kgvl.model import collate
from kgvl.pipeline import tokenize

kb = kb_from_text(
    "bride\tRelatedTo\tchurch\t3.2\n"
    "church\tUsedFor\tget married\t2.8\n"
    "church\tIsA\tbuilding\t1.1\n"
)

rng = np.random.default_rng(0)
regions = [
    Region((0, 0, 640, 480), rng.normal(size=4)),  # whole image
    Region((120, 40, 300, 420), rng.normal(size=4), "person"),
]
query = tokenize("why is the bride here")
answer = tokenize("she is getting married at the church")

seq = assemble(query, answer, regions, kb, k=2, stoplist=DEFAULT_STOPLIST, d_app=4)
print(f"{'i':>2}  {'token':<10} seg pos anchor")
for i, t in enumerate(seq.tokens):
    anchor = "" if t.anchor is None else t.anchor
    print(f"{i:>2}  {t.surface:<10} {'ABC'[t.segment]:>3} {t.rel_pos:>3} {anchor:>6}")

print("\nvisible matrix (row i sees column j):")
for i, row in enumerate(seq.visible.rows()):
    print(f"{i:>2} {row}")

# the plain sequence keeps every original position
plain = assemble(query, answer, regions, kb, k=0, stoplist=DEFAULT_STOPLIST, d_app=4)
kept = [t.rel_pos for t in seq.tokens if not t.injected]
print("\noriginal positions unchanged by injection:", kept == list(plain.rel_pos))

# one layer: rows that are not anchors see exactly what they saw before
cfg = Config(d=16, heads=2, layers=1, d_ff=32, d_app=4, init_scale=0.3)
vocab = Vocab(sorted({t.surface for t in seq.tokens}))
model = Model(cfg, vocab)


def hidden(s):
    return model.hidden(collate([encode(s, vocab, cfg.d, cfg.p_max)]))[0][0]


h_k, h_0 = hidden(seq), hidden(plain)
original = [i for i, t in enumerate(seq.tokens) if not t.injected]
anchors = {t.anchor for t in seq.tokens if t.injected}
print("\nmax |change| per original token after one layer:")
for j, i in enumerate(original):
    diff = np.abs(h_k[i] - h_0[j]).max()
    note = "  <- anchor" if i in anchors else ""
    print(f"  {seq.tokens[i].surface:<10} {diff:.2e}{note}")
