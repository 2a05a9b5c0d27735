# Synthetic stories, the vocab, and what the duplication penalty does to greedy decodes.
import numpy as np

from wrtrain import data as D
from wrtrain.decoding import DecodeConfig, greedy_decode_batch, penalize, strip_eos
from wrtrain.model import ModelConfig
from wrtrain.training import TrainConfig, pretrain

corpus = D.gen_synthetic(4, 50, np.random.default_rng(0), pretrain_stories_per_topic=50)
t = corpus.triples[0]
print("context :", " ".join(t.context))
print("positive:", t.positive)
print("negative:", t.negatives[0])  # same person, other topic

vocab = D.build_vocab_from_texts([p.context for p in corpus.pairs]
                                 + [p.continuation for p in corpus.pairs])
print(len(vocab), "tokens; first few:", vocab.itos[:12])

# the penalty rescales already-emitted tokens without renormalising
p = np.array([0.6, 0.3, 0.1])
print("count=1, k=5:", penalize(p, np.array([1, 0, 0]), 5.0))  # 0.6/6 = 0.1

pairs = D.encode_pairs(vocab, corpus.pairs, 32)
mc = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, d_ffn=64, max_len=32)
model = pretrain(TrainConfig(stage="pretrain", lr=1e-3, max_steps=150, log_every=50), pairs,
                 model_config=mc).checkpoint.build_model()

# EOS barred so the decoder has to keep going; without the penalty it loops
ctxs = [list(x.context) for x in pairs[:5]]
for k in (0.0, 5.0):
    outs = greedy_decode_batch(model, ctxs, DecodeConfig(k=k, max_len=20, stop_at_eos=False))
    print(f"k={k}")
    for o in outs:
        print("   ", vocab.detokenize(strip_eos(o)))
