# Pretrain, then fine-tune once with the WR loss and once with unlikelihood, and compare.
# Small settings so this finishes in a couple of minutes; the acceptance suite uses larger ones.
import numpy as np

from wrtrain import data as D
from wrtrain.decoding import DecodeConfig
from wrtrain.eval import evaluate
from wrtrain.model import ModelConfig, Seq2SeqTransformer
from wrtrain.training import TrainConfig, finetune_ul, finetune_wr, pretrain

train = D.gen_synthetic(4, 150, np.random.default_rng(0), pretrain_stories_per_topic=150)
test = D.gen_synthetic(4, 50, np.random.default_rng(1), pretrain_stories_per_topic=0)
texts = [s for c in (train, test) for t in c.triples for s in (*t.context, t.positive, *t.negatives)]
texts += [p.context for p in train.pairs] + [p.continuation for p in train.pairs]
vocab = D.build_vocab_from_texts(texts)

ML = 48
pairs = D.encode_pairs(vocab, train.pairs, ML)
tr = D.encode_triples(vocab, train.triples, ML)
te = D.encode_triples(vocab, test.triples, ML)
mc = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, d_ffn=64, max_len=ML)

base = pretrain(TrainConfig(stage="pretrain", lr=1e-3, max_steps=400, log_every=100), pairs,
                model_config=mc).checkpoint
wr = finetune_wr(TrainConfig(stage="wr", lr=1e-3, max_steps=400, log_every=100), tr, base).checkpoint
ul = finetune_ul(TrainConfig(stage="ul", lr=1e-3, max_steps=100, log_every=50), tr, base).checkpoint

decode = DecodeConfig(k=5.0, max_len=20)
models = {"random": Seq2SeqTransformer(mc), "pretrain": base.build_model(),
          "wr": wr.build_model(), "ul": ul.build_model()}
for name, m in models.items():
    agg = evaluate(m, vocab, te, decode).aggregate
    print(f"{name:>8}  bleu1={agg['bleu1']:.1f}  distinct2={agg['distinct_2']:.3f}  "
          f"pref_acc={agg['preference_accuracy']:.3f}")

# a few continuations side by side
report = evaluate(models["wr"], vocab, te[:3], decode)
for ex in report.examples:
    print("\n", ex["context"], "\n  ref:", ex["reference"], "\n  wr :", ex["hypothesis"])
