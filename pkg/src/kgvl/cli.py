"""Command-line entry point: ``kgvl <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .data import N_CHOICES, load_jsonl, make_synthetic, write_jsonl
from .embedding import Vocab
from .kb import DEFAULT_STOPLIST, KnowledgeBase, ingest_kb, load_stoplist, query_entities, write_kb
from .model import Model, collate
from .pipeline import InstanceError, assemble
from .task import build_vocab, evaluate, metrics_jsonl, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

MODEL_FILE, VOCAB_FILE, METRICS_FILE, CONFIG_FILE = "model.bin", "vocab.txt", "metrics.jsonl", "config.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers ---------------------------------------------------------------

def _emit(args, payload: dict, text: str | None = None):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif text is not None:
        print(text)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _config(args) -> Config:
    try:
        return _build_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _build_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    changes = {
        "seed": args.seed, "k": args.k, "d": args.d, "heads": args.heads, "layers": args.layers,
        "d_ff": args.d_ff, "d_app": args.d_app, "max_seq": args.max_seq, "lr": args.lr,
        "batch_size": args.batch_size, "epochs": args.epochs, "stoplist": args.stoplist,
        "init_scale": args.init_scale, "clip_norm": args.clip_norm,
    }
    if args.mask_off:
        changes["mask_off"] = True
    modes = [m for m, on in (("absolute", args.absolute_pos), ("anchor", args.anchor_pos)) if on]
    if len(modes) > 1:
        raise UsageError("--absolute-pos and --anchor-pos are mutually exclusive")
    if modes:
        changes["position_mode"] = modes[0]
    return cfg.replace(**changes)


def _kb(path) -> KnowledgeBase:
    if path is None:
        raise UsageError("--kb is required")
    return ingest_kb(path)


def _instances(path):
    if path is None:
        raise UsageError("--in is required")
    return load_jsonl(path)


def _load_model(directory, cfg_override: Config | None = None) -> Model:
    d = Path(directory)
    vocab = Vocab.load(d / VOCAB_FILE)
    return Model.load(d / MODEL_FILE, vocab, cfg_override)


# --- subcommands -----------------------------------------------------------

def cmd_ingest(args):
    kb = _kb(args.kb)
    report = kb.report.as_dict()
    payload = {"facts": len(kb), "concepts": len(kb.index), **report}
    if args.query is not None:
        k = 2 if args.k is None else args.k
        payload["query"] = {
            "token": args.query, "k": k,
            "entities": [{"entity": e, "weight": w} for e, w in query_entities(kb, args.query, k)],
        }
    if args.out:
        write_kb(kb, args.out)
    text = f"accepted {report['accepted']} facts, rejected {report['rejected']} lines"
    for line, reason in kb.report.errors:
        print(f"{args.kb}:{line}: {reason}", file=sys.stderr)
    if args.query is not None:
        text += "\n" + "\n".join(f"{e['entity']}\t{e['weight']}" for e in payload["query"]["entities"])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    train_set, eval_set, kb = make_synthetic(
        seed, args.n_train, args.n_eval, n_concepts=args.n_concepts,
        d_app=16 if args.d_app is None else args.d_app, rationales=args.rationales,
    )
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(train_set, out / "train.jsonl")
    write_jsonl(eval_set, out / "eval.jsonl")
    write_kb(kb, out / "kb.tsv")
    payload = {"train": len(train_set), "eval": len(eval_set), "facts": len(kb), "out": str(out)}
    _emit(args, payload, f"wrote {len(train_set)} train / {len(eval_set)} eval instances and {len(kb)} facts to {out}")
    return EXIT_OK


def cmd_transform(args):
    cfg = _config(args)
    kb = _kb(args.kb)
    insts = _instances(args.input)
    stoplist = load_stoplist(cfg.stoplist) if cfg.stoplist else DEFAULT_STOPLIST
    records = []
    for inst in insts:
        for c in range(N_CHOICES):
            try:
                seq = assemble(inst.query, inst.responses[c], inst.regions, kb, cfg.k, stoplist,
                               image_size=inst.image_size, position_mode=cfg.position_mode,
                               mask_off=cfg.mask_off)
            except InstanceError as exc:
                raise InstanceError(f"{inst.id}: {exc}") from None
            records.append({"id": inst.id, "mode": inst.mode, "candidate": c, **seq.to_json()})
    if args.out:
        _write_json(args.out, records)
    payload = {"sequences": len(records), "out": args.out}
    if args.json:
        _emit(args, payload if args.out else {"sequences": records})
    elif not args.out:
        print(json.dumps(records, sort_keys=True, indent=1))
    else:
        print(f"wrote {len(records)} enriched sequences to {args.out}")
    return EXIT_OK


def cmd_forward(args):
    kb = _kb(args.kb)
    insts = _instances(args.input)
    if args.model:
        model = _load_model(args.model)
        model = Model(_config_on(model.config, args), model.vocab, model.params)
    else:
        cfg = _config(args)
        model = Model(cfg, build_vocab(insts, kb))
    rows = []
    for inst in insts:
        sv = predict(inst, model, kb)
        rows.append({
            "id": inst.id, "mode": inst.mode, "scores": sv.scores.tolist(),
            "probabilities": sv.probabilities.tolist(), "prediction": sv.argmax, "gold": inst.gold,
        })
    if args.out:
        _write_json(args.out, rows)
    if args.json:
        _emit(args, {"predictions": rows})
    else:
        for r in rows:
            print(f"{r['id']}\t{r['mode']}\tpred {r['prediction']}\tgold {r['gold']}\t"
                  + " ".join(f"{s:.4f}" for s in r["scores"]))
    return EXIT_OK


def _config_on(cfg: Config, args) -> Config:
    """Apply the pipeline flags (k and ablation modes) to a loaded model's config."""
    changes = {"k": args.k, "stoplist": args.stoplist}
    if args.mask_off:
        changes["mask_off"] = True
    if args.absolute_pos:
        changes["position_mode"] = "absolute"
    if args.anchor_pos:
        changes["position_mode"] = "anchor"
    return cfg.replace(**changes)


def gradcheck(seed: int = 7, n_params: int = 200, eps: float = 1e-3) -> dict:
    """Central differences vs the analytic backward pass of a d=16, 2-layer model.

    The loss is a fixed random projection of the four candidate scores of
    one synthetic instance, so every parameter group receives gradient.
    """
    rng = np.random.default_rng(seed)
    train_set, _, kb = make_synthetic(seed, 4, 1, n_concepts=200, d_app=4)
    cfg = Config(d=16, heads=2, layers=2, d_ff=32, d_app=4, seed=seed, init_scale=0.3)
    model = Model(cfg, build_vocab(train_set, kb))
    batch = collate([model.encode_pair(train_set[0], c, kb) for c in range(N_CHOICES)])
    proj = rng.normal(size=N_CHOICES)
    model.forward(batch)
    grads = model.backward(proj)
    # sample from entries that influence the loss so zero-vs-zero checks do not pad the count
    candidates = [(name, int(i)) for name in sorted(grads) for i in np.flatnonzero(grads[name])]
    picks = rng.choice(len(candidates), size=min(n_params, len(candidates)), replace=False)
    worst, worst_at = 0.0, None
    for p in sorted(picks):
        name, idx = candidates[p]
        arr = model.params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + eps
        up = float(model.forward(batch) @ proj)
        arr[idx] = old - eps
        down = float(model.forward(batch) @ proj)
        arr[idx] = old
        num = (up - down) / (2 * eps)
        ana = float(grads[name].reshape(-1)[idx])
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        if rel > worst:
            worst, worst_at = rel, f"{name}[{idx}]"
    return {"seed": seed, "checked": len(picks), "eps": eps, "max_rel_err": worst,
            "worst": worst_at, "tolerance": GRADCHECK_TOL, "passed": worst < GRADCHECK_TOL}


def cmd_gradcheck(args):
    report = gradcheck(7 if args.seed is None else args.seed, args.n_params)
    _emit(args, report, f"checked {report['checked']} parameters, max relative error "
                        f"{report['max_rel_err']:.3e} ({'ok' if report['passed'] else 'FAILED'})")
    return EXIT_OK if report["passed"] else EXIT_CHECK


def cmd_train(args):
    cfg = _config(args)
    kb = _kb(args.kb)
    if args.train is None:
        raise UsageError("--train is required")
    train_set = load_jsonl(args.train)
    eval_set = load_jsonl(args.eval) if args.eval else None
    if not train_set:
        raise DataError(f"{args.train}: no instances")
    vocab = build_vocab(train_set + (eval_set or []), kb)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)

    def progress(record):
        if not args.json:
            print(json.dumps(record, sort_keys=True), flush=True)

    model, history = train(train_set, cfg, kb, eval_set=eval_set, vocab=vocab, on_epoch=progress)
    model.save(out / MODEL_FILE, dtype=args.dtype)
    vocab.save(out / VOCAB_FILE)
    (out / METRICS_FILE).write_text(metrics_jsonl(history), encoding="utf-8")
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    final = history[-1] if history else {}
    _emit(args, {"out": str(out), "epochs": len(history), "final": final})
    return EXIT_OK


def cmd_eval(args):
    if not args.model:
        raise UsageError("--model is required")
    kb = _kb(args.kb)
    insts = _instances(args.input)
    model = _load_model(args.model)
    model = Model(_config_on(model.config, args), model.vocab, model.params)
    metrics = evaluate(insts, model, kb, threads=args.threads)
    if args.out:
        _write_json(args.out, metrics)
    text = "\n".join(f"{k}\t{metrics[k]}" for k in ("acc_QA", "acc_QAR_given", "acc_joint"))
    _emit(args, metrics, text)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def _common(p):
    p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--kb", help="knowledge base TSV (head, relation, tail, weight)")
    p.add_argument("--k", type=int, help="entities injected per token")
    p.add_argument("--stoplist", help="file with one excluded token per line")
    p.add_argument("--mask-off", action="store_true", help="make every token visible to every other")
    p.add_argument("--absolute-pos", action="store_true", help="number injected tokens in sequence order")
    p.add_argument("--anchor-pos", action="store_true", help="injected tokens share their anchor's position")
    for name, typ in (("d", int), ("heads", int), ("layers", int), ("d-ff", int), ("d-app", int),
                      ("max-seq", int), ("lr", float), ("batch-size", int), ("epochs", int),
                      ("init-scale", float), ("clip-norm", float)):
        p.add_argument(f"--{name}", type=typ)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgvl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="load a knowledge base and report rejected lines")
    _common(p)
    p.add_argument("--kb", required=True)
    p.add_argument("--query", help="print the top-k related entities of this token")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write the synthetic knowledge-dependent task")
    _common(p)
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-eval", type=int, default=1000)
    p.add_argument("--n-concepts", type=int, default=1200)
    p.add_argument("--d-app", type=int)
    p.add_argument("--rationales", action="store_true", help="also emit QAtoR instances")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transform", help="write enriched sequences and visible matrices")
    _common(p)
    _model_flags(p)
    p.add_argument("--in", dest="input")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("forward", help="score every candidate of every instance")
    _common(p)
    _model_flags(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--model", help="directory written by train")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _common(p)
    p.add_argument("--n-params", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a model and write checkpoint, vocabulary and metrics")
    _common(p)
    _model_flags(p)
    p.add_argument("--train", help="training JSONL")
    p.add_argument("--eval", help="evaluation JSONL reported after each epoch")
    p.add_argument("--dtype", choices=("<f4", "<f8"), default="<f4", help="checkpoint storage type")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy metrics of a trained model")
    _common(p)
    _model_flags(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--model", help="directory written by train")
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InstanceError, FileNotFoundError, IsADirectoryError, PermissionError,
            UnicodeDecodeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # config validation and malformed checkpoints
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())
