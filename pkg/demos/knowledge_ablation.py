"""Does the model actually need the knowledge base?

Trains the same small model on the synthetic choice task three ways:
with k=2 injected entities per token, with k=0 (no injection) and with
the mask switched off. Eval questions use concept words never seen in
training, so only the injected facts can connect them to the question.

Takes a few minutes on one core:

    python demos/knowledge_ablation.py [--epochs 12] [--n-train 4000]
"""

import argparse
import time

from kgvl import Config, make_synthetic, train
from kgvl.task import build_vocab

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=12)
parser.add_argument("--n-train", type=int, default=4000)
parser.add_argument("--n-eval", type=int, default=1000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

train_set, eval_set, kb = make_synthetic(args.seed, args.n_train, args.n_eval)
vocab = build_vocab(train_set + eval_set, kb)
base = Config(d=32, heads=4, layers=2, d_ff=64, lr=0.02, clip_norm=1.0,
              epochs=args.epochs, seed=args.seed)

runs = {
    "k=2": base,
    "k=0": base.replace(k=0),
    "k=2, mask off": base.replace(mask_off=True),
}
for name, cfg in runs.items():
    t0 = time.perf_counter()

    def show(r, name=name):
        print(f"  [{name}] epoch {r['epoch']:>2}  loss {r['loss']:.4f}  eval acc {r['acc_QA']:.3f}", flush=True)

    _, history = train(train_set, cfg, kb, eval_set=eval_set, vocab=vocab, on_epoch=show)
    best = max(r["acc_QA"] for r in history)
    print(f"{name}: best eval acc_QA {best:.3f} ({time.perf_counter() - t0:.0f}s)\n")
