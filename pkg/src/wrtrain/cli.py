"""``wrtrain`` command line: the full data -> pretrain -> fine-tune -> evaluate pipeline.

Every subcommand accepts ``--config FILE`` (a flat JSON object whose keys are
the long flag names with dashes turned into underscores), ``--seed`` and
``--out-dir``. Precedence: explicit flag > config file > built-in default.
The resolved settings are written to ``<out-dir>/resolved_config.json``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure
(non-finite loss, unreadable or corrupted checkpoint).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint
from .decoding import DecodeConfig, greedy_decode_batch, strip_eos
from .model import G_MAPPINGS, ModelConfig
from .training import TrainConfig, TrainingError, finetune_ul, finetune_wr, pretrain

logger = logging.getLogger("wrtrain")


class CLIError(Exception):
    """Invalid invocation or input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


# (flag, type, default, help); type "list" means one or more strings, "flag" a switch
_COMMON = [
    ("--config", str, None, "JSON file of defaults for this subcommand"),
    ("--seed", int, 0, "random seed"),
    ("--out-dir", str, None, "directory for all outputs (required)"),
    ("--log-level", str, "INFO", "console log level"),
]
_MODEL = [
    ("--d-model", int, 64, "model width"),
    ("--n-heads", int, 4, "attention heads (must divide d-model)"),
    ("--n-enc-layers", int, 2, "encoder layers"),
    ("--n-dec-layers", int, 2, "decoder layers"),
    ("--d-ffn", int, 128, "feed-forward width"),
    ("--max-len", int, 48, "longest sequence the model accepts"),
    ("--dropout", float, 0.1, "dropout probability"),
    ("--g-mapping", str, "linear_projection", f"representation mapping: {', '.join(G_MAPPINGS)}"),
]
_TRAIN = [
    ("--lr", float, 3e-4, "Adam learning rate"),
    ("--beta1", float, 0.9, "Adam beta1"),
    ("--beta2", float, 0.999, "Adam beta2"),
    ("--eps", float, 1e-8, "Adam epsilon"),
    ("--batch-size", int, 32, "examples per step"),
    ("--max-steps", int, 1000, "optimizer steps"),
    ("--checkpoint-every", int, 0, "save a checkpoint every N steps (0: only at the end)"),
    ("--grad-clip", float, 1.0, "global gradient-norm clip"),
    ("--precision", int, 32, "float precision, 32 or 64"),
    ("--log-every", int, 50, "console progress interval in steps"),
]
_SUBCOMMANDS = {
    "gen-data": ("write a seeded synthetic corpus (pretraining stories + train/test triples)", [
        ("--topics", int, 6, "number of topics (>= 2)"),
        ("--stories-per-topic", int, 300, "training triples per topic"),
        ("--test-stories-per-topic", int, 100, "held-out triples per topic"),
        ("--pretrain-stories-per-topic", int, 300, "pretraining stories per topic"),
        ("--negatives", int, 1, "negatives per triple"),
    ]),
    "build-vocab": ("build a vocab file from text corpora and/or .jsonl triple files", [
        ("--corpus", "list", None, "input files (required)"),
        ("--min-freq", int, 1, "minimum token frequency"),
    ]),
    "pretrain": ("MLE pretraining on successive-sentence pairs", _MODEL + _TRAIN + [
        ("--corpus", str, None, "story corpus, blank-line separated (required)"),
        ("--vocab", str, None, "vocab file (required)"),
    ]),
    "train-wr": ("fine-tune with the WR loss (lambda * CE + cosine triplet)", _TRAIN + [
        ("--data", str, None, "triple dataset .jsonl (required)"),
        ("--base", str, None, "pretrained checkpoint (required)"),
        ("--vocab", str, None, "vocab file (default: the one stored in the checkpoint)"),
        ("--lambda", float, 1.0, "weight of the cross-entropy term"),
        ("--decode-k", float, 5.0, "duplication penalty for anchor decoding"),
        ("--fabricate-negatives", int, 0, "if > 0, replace negatives by M positives from other stories"),
    ]),
    "train-ul": ("fine-tune with CE + unlikelihood on repeated n-grams", _TRAIN + [
        ("--data", str, None, "triple dataset .jsonl (required)"),
        ("--base", str, None, "pretrained checkpoint (required)"),
        ("--vocab", str, None, "vocab file (default: the one stored in the checkpoint)"),
        ("--ul-n", int, 4, "n-gram order of the repetition penalty"),
        ("--ul-weight", float, 1.0, "weight of the unlikelihood term"),
        ("--ul-candidates", str, "repeat", "'repeat' (repeated n-grams) or 'negative' (negative-only tokens)"),
        ("--ul-decode-k", float, 0.0, "duplication penalty used when decoding UL targets"),
        ("--ul-fixed-length", "flag", False, "decode UL targets to full length with EOS barred"),
        ("--decode-max-len", int, None, "length of decoded UL targets (default: model max_len - 2)"),
    ]),
    "generate": ("greedy continuations for contexts, one per input line", [
        ("--checkpoint", str, None, "model checkpoint (required)"),
        ("--input", str, None, "text file, one context per line (required)"),
        ("--vocab", str, None, "vocab file (default: the one stored in the checkpoint)"),
        ("--k", float, 5.0, "duplication penalty"),
        ("--decode-max-len", int, 20, "maximum generated tokens"),
        ("--fixed-length", "flag", False, "bar EOS so every continuation has decode-max-len tokens"),
    ]),
    "evaluate": ("BLEU-1, distinct-n, repetition rate and preference accuracy on triples", [
        ("--checkpoint", str, None, "model checkpoint (required)"),
        ("--data", str, None, "triple dataset .jsonl (required)"),
        ("--vocab", str, None, "vocab file (default: the one stored in the checkpoint)"),
        ("--k", float, 5.0, "duplication penalty"),
        ("--decode-max-len", int, 20, "maximum generated tokens"),
        ("--fixed-length", "flag", False, "bar EOS so every continuation has decode-max-len tokens"),
        ("--n", int, 4, "n-gram order for the repetition rate"),
    ]),
    "gradcheck": ("finite-difference check of every op and the full WR loss", [
        ("--precision", int, 64, "must be 64; 32-bit central differences are not meaningful"),
        ("--max-entries", int, 0, "check at most N entries per parameter (0: all)"),
    ]),
}
_REQUIRED = {
    "build-vocab": ["corpus"], "pretrain": ["corpus", "vocab"], "train-wr": ["data", "base"],
    "train-ul": ["data", "base"], "generate": ["checkpoint", "input"],
    "evaluate": ["checkpoint", "data"],
}


def _specs(command: str):
    own = _SUBCOMMANDS[command][1]
    names = {s[0] for s in own}
    return [s for s in _COMMON if s[0] not in names] + own


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wrtrain", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for name, (help_text, _) in _SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, typ, default, help_ in _specs(name):
            shown = f" (default: {default})" if default is not None else ""
            if typ == "list":
                p.add_argument(flag, nargs="+", default=None, help=help_ + shown)
            elif typ == "flag":
                p.add_argument(flag, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, type=typ, default=None, help=help_ + shown)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    specs = _specs(command)
    dests = {flag[2:].replace("-", "_"): default for flag, _, default, _ in specs}
    resolved = dict(dests)
    if ns.config is not None:
        try:
            cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {ns.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise CLIError("config file must hold a JSON object")
        unknown = set(cfg) - set(dests) - {"config"}
        if unknown:
            raise CLIError(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update(cfg)
    for key in dests:
        value = getattr(ns, key, None)
        if value is not None:
            resolved[key] = value
    resolved.pop("config", None)
    missing = [k for k in ["out_dir", *_REQUIRED.get(command, [])] if resolved.get(k) is None]
    if missing:
        raise CLIError(f"{command}: missing required setting(s): "
                       + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {path}")
    return p


def _train_config(stage: str, r: dict) -> TrainConfig:
    keys = ("lr", "beta1", "beta2", "eps", "batch_size", "max_steps", "checkpoint_every",
            "grad_clip", "precision", "log_every")
    extra = {}
    if stage == "wr":
        extra = {"lam": r["lambda"], "decode_k": r["decode_k"]}
    elif stage == "ul":
        extra = {"ul_n": r["ul_n"], "ul_weight": r["ul_weight"],
                 "ul_candidates": r["ul_candidates"], "ul_decode_k": r["ul_decode_k"],
                 "ul_fixed_length": bool(r["ul_fixed_length"]), "decode_max_len": r["decode_max_len"]}
    return TrainConfig(stage=stage, seed=r["seed"], **{k: r[k] for k in keys}, **extra)


def _vocab_for(r: dict, ckpt) -> D.Vocab:
    if r.get("vocab"):
        vocab = D.Vocab.load(_existing(r["vocab"], "vocab file"))
    elif ckpt.vocab is not None:
        vocab = D.Vocab(ckpt.vocab[D.NUM_RESERVED:])
    else:
        raise CLIError("checkpoint stores no vocab; pass --vocab")
    if len(vocab) != ckpt.model_config.vocab_size:
        raise CLIError(f"vocab has {len(vocab)} entries but the model expects "
                       f"{ckpt.model_config.vocab_size}")
    return vocab


def cmd_gen_data(r: dict, out: Path) -> None:
    rng = np.random.default_rng(r["seed"])
    corpus = D.gen_synthetic(r["topics"], r["stories_per_topic"], rng,
                             negatives_per_triple=r["negatives"],
                             pretrain_stories_per_topic=r["pretrain_stories_per_topic"])
    held_out = D.gen_synthetic(r["topics"], r["test_stories_per_topic"],
                               np.random.default_rng([r["seed"], 1]),
                               negatives_per_triple=r["negatives"], pretrain_stories_per_topic=0)
    D.save_stories(out / "pretrain.txt", corpus.stories)
    D.save_triples(out / "train.jsonl", corpus.triples)
    D.save_triples(out / "test.jsonl", held_out.triples)
    print(f"wrote {len(corpus.stories)} stories, {len(corpus.triples)} train and "
          f"{len(held_out.triples)} test triples to {out}")


def cmd_build_vocab(r: dict, out: Path) -> None:
    paths = [_existing(p, "corpus file") for p in r["corpus"]]
    vocab = D.build_vocab(paths, r["min_freq"])
    vocab.save(out / "vocab.txt")
    print(f"wrote {len(vocab)} tokens ({len(vocab) - D.NUM_RESERVED} + reserved) to {out / 'vocab.txt'}")


def cmd_pretrain(r: dict, out: Path) -> None:
    vocab = D.Vocab.load(_existing(r["vocab"], "vocab file"))
    stories = D.load_stories(_existing(r["corpus"], "corpus file"))
    text_pairs = [p for s in stories for p in D.split_into_pairs(s, r["max_len"])]
    if not text_pairs:
        raise CLIError("corpus yields no sentence pairs")
    pairs = D.encode_pairs(vocab, text_pairs, r["max_len"])
    try:
        mc = ModelConfig(vocab_size=len(vocab), d_model=r["d_model"], n_heads=r["n_heads"],
                         n_enc_layers=r["n_enc_layers"], n_dec_layers=r["n_dec_layers"],
                         d_ffn=r["d_ffn"], max_len=r["max_len"], dropout=r["dropout"],
                         g_mapping=r["g_mapping"], seed=r["seed"])
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    result = pretrain(_train_config("pretrain", r), pairs, model_config=mc, vocab=vocab.itos,
                      out_dir=out, log_path=out / "train_log.jsonl")
    print(f"pretrained {result.checkpoint.step} steps; final ce={result.log[-1]['ce']:.4f}"
          if result.log else "no steps run")


def _load_triples_for(r: dict, ckpt, vocab: D.Vocab, need_negatives: bool):
    triples = D.load_triples(_existing(r["data"], "dataset"))
    m = r.get("fabricate_negatives") or 0
    if m > 0:
        triples = D.fabricate_negatives(triples, m, np.random.default_rng([r["seed"], 2]))
    if need_negatives and any(not t.negatives for t in triples):
        raise CLIError("some triples have no negatives; use --fabricate-negatives M")
    return D.encode_triples(vocab, triples, ckpt.model_config.max_len)


def _finetune(stage: str, r: dict, out: Path) -> None:
    base = load_checkpoint(_existing(r["base"], "checkpoint"))
    vocab = _vocab_for(r, base)
    triples = _load_triples_for(r, base, vocab, need_negatives=(stage == "wr"))
    fn = finetune_wr if stage == "wr" else finetune_ul
    result = fn(_train_config(stage, r), triples, base, vocab=vocab.itos, out_dir=out,
                log_path=out / "train_log.jsonl")
    last = result.log[-1] if result.log else {}
    print(f"{stage}: {result.checkpoint.step} steps; final "
          + " ".join(f"{k}={v:.4f}" for k, v in last.items() if isinstance(v, float)
                     and k != "wall_time"))


def cmd_generate(r: dict, out: Path) -> None:
    inp = _existing(r["input"], "input file")
    ckpt = load_checkpoint(_existing(r["checkpoint"], "checkpoint"))
    vocab = _vocab_for(r, ckpt)
    contexts = [line.strip() for line in inp.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not contexts:
        raise CLIError("input file holds no contexts")
    model = ckpt.build_model()
    cfg = DecodeConfig(k=r["k"], max_len=min(r["decode_max_len"], model.config.max_len - 1),
                       stop_at_eos=not r["fixed_length"])
    ids = [vocab.tokenize(c) for c in contexts]
    too_long = [i for i, x in enumerate(ids, 1) if len(x) > model.config.max_len]
    if too_long:
        raise CLIError(f"input line(s) {too_long} exceed max_len={model.config.max_len} tokens")
    outputs = []
    for start in range(0, len(ids), 64):
        outputs += greedy_decode_batch(model, ids[start: start + 64], cfg)
    with open(out / "generations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ctx, o in zip(contexts, outputs):
            text = vocab.detokenize(strip_eos(o))
            fh.write(json.dumps({"context": ctx, "continuation": text}) + "\n")
            print(text)


def cmd_evaluate(r: dict, out: Path) -> None:
    from .eval import evaluate

    ckpt = load_checkpoint(_existing(r["checkpoint"], "checkpoint"))
    vocab = _vocab_for(r, ckpt)
    triples = _load_triples_for(r, ckpt, vocab, need_negatives=True)
    model = ckpt.build_model()
    cfg = DecodeConfig(k=r["k"], max_len=min(r["decode_max_len"], model.config.max_len - 1),
                       stop_at_eos=not r["fixed_length"])
    report = evaluate(model, vocab, triples, cfg, n=r["n"])
    report.write_jsonl(out / "eval_report.jsonl")
    summary = report.summary()
    (out / "eval_summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)


def cmd_gradcheck(r: dict, out: Path) -> int:
    from .gradcheck import run_model_check, run_op_suite

    if r["precision"] != 64:
        raise CLIError("gradcheck runs at 64-bit precision only (--precision 64)")
    limit = r["max_entries"] or None
    results = run_op_suite(seed=r["seed"])
    results += [run_model_check(seed=r["seed"], g_mapping=g, max_entries_per_param=limit)
                for g in G_MAPPINGS]
    lines = [res.line() for res in results]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    ok = all(res.passed for res in results)
    print("all gradient checks passed" if ok else "GRADIENT CHECK FAILURES")
    return 0 if ok else 2


_HANDLERS = {
    "gen-data": cmd_gen_data, "build-vocab": cmd_build_vocab, "pretrain": cmd_pretrain,
    "train-wr": lambda r, out: _finetune("wr", r, out),
    "train-ul": lambda r, out: _finetune("ul", r, out),
    "generate": cmd_generate, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        r = resolve(ns.command, ns)
        logging.basicConfig(level=getattr(logging, str(r["log_level"]).upper(), logging.INFO),
                            format="%(message)s", force=True)
        out = Path(r["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"command": ns.command, **r}
        (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True)
                                                  + "\n", encoding="utf-8")
        code = _HANDLERS[ns.command](r, out)
        return 0 if code is None else code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, CheckpointError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (D.DataError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
