"""Tokenisation, corpus files, fabricated negatives and a synthetic story generator.

File formats
------------
* pretraining corpus: UTF-8 text, one story per blank-line separated block;
  sentences end with ``.``, ``!`` or ``?`` followed by whitespace.
* triple dataset: JSON lines, each ``{"context": [str, ...], "positive": str,
  "negatives": [str, ...], "source_id": str}``.
* vocab file: one token per line; the token on line ``n`` (1-based) has id
  ``n - 1 + NUM_RESERVED``. Reserved tokens are not written.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, CLS, UNK = "[PAD]", "[BOS]", "[EOS]", "[CLS]", "[UNK]"
RESERVED = (PAD, BOS, EOS, CLS, UNK)
PAD_ID, BOS_ID, EOS_ID, CLS_ID, UNK_ID = range(5)
NUM_RESERVED = len(RESERVED)
SPECIAL_IDS = frozenset(range(NUM_RESERVED))

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")


class DataError(ValueError):
    pass


def tokenize_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize_words(text))


def segment_sentences(text: str) -> list[str]:
    text = " ".join(text.split())
    if not text:
        return []
    return [s for s in _SENTENCE_END_RE.split(text) if s]


class Vocab:
    """Token <-> id bijection with the reserved block at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise DataError(f"duplicate vocab token {tok!r}")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def tokenize(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        """Space-joined tokens; PAD/BOS/EOS/CLS are dropped, UNK is kept visible."""
        out = []
        for i in ids:
            i = int(i)
            if i in SPECIAL_IDS and i != UNK_ID:
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.itos[NUM_RESERVED:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        for lineno, tok in enumerate(tokens, 1):
            if not tok or tok in RESERVED:
                raise DataError(f"{path}:{lineno}: invalid vocab entry {tok!r}")
        return cls(tokens)


def build_vocab_from_texts(texts: Iterable[str], min_freq: int = 1) -> Vocab:
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize_words(text))
    if not counts:
        raise DataError("empty corpus")
    kept = sorted((tok for tok, n in counts.items() if n >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab(kept)


def _corpus_texts(path: Path) -> Iterator[str]:
    if path.suffix == ".jsonl":
        for triple in load_triples(path):
            yield from triple.context
            yield triple.positive
            yield from triple.negatives
    else:
        yield path.read_text(encoding="utf-8")


def build_vocab(corpus_paths: Sequence[str | Path], min_freq: int = 1) -> Vocab:
    """Vocab over plain-text corpora and/or ``.jsonl`` triple files.

    Ids follow (frequency desc, token asc) after the reserved block.
    """

    def texts():
        for p in corpus_paths:
            yield from _corpus_texts(Path(p))

    return build_vocab_from_texts(texts(), min_freq)


# records ----------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainPair:
    context: str
    continuation: str


@dataclass(frozen=True)
class Triple:
    context: tuple[str, ...]
    positive: str
    negatives: tuple[str, ...] = ()
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "negatives", tuple(self.negatives))

    def validate(self) -> None:
        if not 1 <= len(self.context) <= 5:
            raise DataError(f"context must hold 1-5 sentences, got {len(self.context)}")
        if not all(isinstance(s, str) and s.strip() for s in self.context):
            raise DataError("context sentences must be nonempty strings")
        if not isinstance(self.positive, str) or not self.positive.strip():
            raise DataError("positive must be a nonempty string")
        if not all(isinstance(s, str) and s.strip() for s in self.negatives):
            raise DataError("negatives must be nonempty strings")
        if normalize(self.positive) in {normalize(n) for n in self.negatives}:
            raise DataError("positive appears among the negatives")
        if not isinstance(self.source_id, str):
            raise DataError("source_id must be a string")

    def to_record(self) -> dict:
        return {"context": list(self.context), "positive": self.positive,
                "negatives": list(self.negatives), "source_id": self.source_id}

    @classmethod
    def from_record(cls, rec: dict) -> "Triple":
        if not isinstance(rec, dict):
            raise DataError("record is not an object")
        expected = {"context", "positive", "negatives", "source_id"}
        if set(rec) != expected:
            raise DataError(f"record keys {sorted(rec)} != {sorted(expected)}")
        if not isinstance(rec["context"], list) or not isinstance(rec["negatives"], list):
            raise DataError("context and negatives must be lists")
        triple = cls(tuple(rec["context"]), rec["positive"], tuple(rec["negatives"]),
                     rec["source_id"])
        triple.validate()
        return triple


def load_triples(path: str | Path) -> list[Triple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Triple.from_record(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def save_triples(path: str | Path, triples: Iterable[Triple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_record(), ensure_ascii=False) + "\n")


def load_stories(path: str | Path) -> list[list[str]]:
    """Blank-line separated stories, each segmented into sentences."""
    text = Path(path).read_text(encoding="utf-8")
    blocks = re.split(r"\n\s*\n", text)
    return [segment_sentences(b) for b in blocks if b.strip()]


def save_stories(path: str | Path, stories: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n\n".join(" ".join(s) for s in stories) + "\n")


def split_into_pairs(story: Sequence[str], max_len: int | None = None) -> list[PretrainPair]:
    """Overlapping (sentence, next sentence) pairs.

    With ``max_len`` set, pairs where either side exceeds ``max_len - 2``
    tokens are dropped and the number dropped is logged.
    """
    pairs = [PretrainPair(a, b) for a, b in zip(story, story[1:])]
    if max_len is None:
        return pairs
    limit = max_len - 2
    kept = [p for p in pairs
            if 0 < len(tokenize_words(p.context)) <= limit
            and 0 < len(tokenize_words(p.continuation)) <= limit]
    if len(kept) < len(pairs):
        logger.warning("dropped %d of %d pairs longer than %d tokens",
                       len(pairs) - len(kept), len(pairs), limit)
    return kept


def fabricate_negatives(dataset: Sequence[Triple], m: int,
                        rng: np.random.Generator) -> list[Triple]:
    """Give every triple ``m`` negatives borrowed from other stories' positives."""
    if len({t.source_id for t in dataset}) < 2:
        raise DataError("need at least two distinct source_ids to fabricate negatives")
    sources: dict[str, set[str]] = {}
    texts: dict[str, str] = {}
    for t in dataset:
        key = normalize(t.positive)
        sources.setdefault(key, set()).add(t.source_id)
        texts.setdefault(key, t.positive)
    keys = list(sources)
    out = []
    for t in dataset:
        own = normalize(t.positive)
        pool = [k for k in keys if k != own and sources[k] - {t.source_id}]
        if len(pool) < m:
            raise DataError(f"triple {t.source_id!r}: only {len(pool)} foreign positives for m={m}")
        picks = rng.choice(len(pool), size=m, replace=False)
        out.append(Triple(t.context, t.positive, tuple(texts[pool[i]] for i in picks),
                          t.source_id))
    return out


# encoded form -------------------------------------------------------------------

@dataclass(frozen=True)
class EncodedTriple:
    context: tuple[int, ...]
    positive: tuple[int, ...]
    negatives: tuple[tuple[int, ...], ...]
    source_id: str = ""


@dataclass(frozen=True)
class EncodedPair:
    context: tuple[int, ...]
    continuation: tuple[int, ...]


def encode_triples(vocab: Vocab, triples: Iterable[Triple], max_len: int) -> list[EncodedTriple]:
    out = []
    for i, t in enumerate(triples):
        ctx = tuple(vocab.tokenize(" ".join(t.context)))
        pos = tuple(vocab.tokenize(t.positive))
        negs = tuple(tuple(vocab.tokenize(n)) for n in t.negatives)
        for name, seq in (("context", ctx), ("positive", pos)) + tuple(("negative", n) for n in negs):
            limit = max_len if name == "context" else max_len - 2
            if not seq or len(seq) > limit:
                raise DataError(f"triple {i} ({t.source_id}): {name} has {len(seq)} tokens, "
                                f"allowed 1..{limit}")
        out.append(EncodedTriple(ctx, pos, negs, t.source_id))
    return out


def encode_pairs(vocab: Vocab, pairs: Iterable[PretrainPair], max_len: int) -> list[EncodedPair]:
    out = []
    for i, p in enumerate(pairs):
        ctx, cont = tuple(vocab.tokenize(p.context)), tuple(vocab.tokenize(p.continuation))
        for name, seq in (("context", ctx), ("continuation", cont)):
            if not seq or len(seq) > max_len - 2:
                raise DataError(f"pair {i}: {name} has {len(seq)} tokens, allowed 1..{max_len - 2}")
        out.append(EncodedPair(ctx, cont))
    return out


# batching -----------------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ``(ids [B, T], mask [B, T])``."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
        mask[row, : len(s)] = True
    return ids, mask


def batch(items: Sequence[Sequence[int]], batch_size: int,
          pad_id: int = PAD_ID) -> list[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [pad_batch(items[i: i + batch_size], pad_id) for i in range(0, len(items), batch_size)]


# synthetic corpus ---------------------------------------------------------------

@dataclass(frozen=True)
class Topic:
    name: str
    places: tuple[str, ...]
    objects: tuple[str, ...]
    verbs: tuple[str, ...]
    adjectives: tuple[str, ...]

    @property
    def keywords(self) -> frozenset[str]:
        return frozenset(self.places + self.objects + self.verbs + self.adjectives)


BASE_TOPICS = (
    Topic("kitchen", ("kitchen", "bakery"), ("bread", "oven", "flour", "cake", "pan"),
          ("baked", "mixed", "sliced", "cooked"), ("warm", "sweet", "crispy")),
    Topic("beach", ("beach", "shore"), ("wave", "sand", "shell", "towel", "surfboard"),
          ("swam", "surfed", "dug", "collected"), ("salty", "sunny", "wet")),
    Topic("farm", ("farm", "barn"), ("cow", "tractor", "hay", "chicken", "fence"),
          ("milked", "fed", "plowed", "fixed"), ("muddy", "noisy", "rusty")),
    Topic("space", ("station", "rocket"), ("planet", "helmet", "star", "moon", "telescope"),
          ("launched", "orbited", "explored", "floated"), ("distant", "bright", "silent")),
    Topic("school", ("school", "library"), ("book", "pencil", "desk", "exam", "lesson"),
          ("studied", "wrote", "read", "passed"), ("quiet", "difficult", "long")),
    Topic("garden", ("garden", "park"), ("flower", "tree", "seed", "shovel", "rose"),
          ("planted", "watered", "picked", "trimmed"), ("green", "tall", "fresh")),
    Topic("music", ("concert", "studio"), ("guitar", "drum", "song", "piano", "violin"),
          ("played", "sang", "tuned", "recorded"), ("loud", "happy", "gentle")),
    Topic("winter", ("mountain", "lodge"), ("snow", "sled", "ski", "scarf", "fire"),
          ("skied", "shoveled", "slid", "froze"), ("cold", "icy", "white")),
)

_NAMES = (("tom", "he", "his"), ("anna", "she", "her"), ("ben", "he", "his"),
          ("lucy", "she", "her"), ("sam", "he", "his"), ("mia", "she", "her"))

_OPENER = "{name} went to the {place} ."
_TEMPLATES = (
    "{pron} {verb} the {obj} .",
    "the {obj} was very {adj} .",
    "{pron} saw a {adj} {obj} near the {place} .",
    "then {pron} {verb} a {obj} with {poss} friend .",
    "{poss} {obj} looked {adj} .",
    "{pron} {verb} the {adj} {obj} all day .",
)


def synthetic_topics(n: int) -> list[Topic]:
    """First ``n`` topics; beyond the built-in ones, lexicons get numeric suffixes."""
    out = []
    for i in range(n):
        base = BASE_TOPICS[i % len(BASE_TOPICS)]
        cycle = i // len(BASE_TOPICS)
        if cycle == 0:
            out.append(base)
            continue

        def tag(words):
            return tuple(f"{w}{cycle}" for w in words)

        out.append(Topic(f"{base.name}{cycle}", tag(base.places), tag(base.objects),
                         tag(base.verbs), tag(base.adjectives)))
    return out


def _sentence(template: str, topic: Topic, person: tuple[str, str, str],
              rng: np.random.Generator) -> str:
    name, pron, poss = person

    def pick(options):
        return options[int(rng.integers(len(options)))]

    return template.format(name=name, pron=pron, poss=poss, place=pick(topic.places),
                           obj=pick(topic.objects), verb=pick(topic.verbs),
                           adj=pick(topic.adjectives))


def _story(topic: Topic, person, n_sentences: int, rng: np.random.Generator) -> list[str]:
    sents = [_sentence(_OPENER, topic, person, rng)]
    while len(sents) < n_sentences:
        s = _sentence(_TEMPLATES[int(rng.integers(len(_TEMPLATES)))], topic, person, rng)
        if s not in sents:
            sents.append(s)
    return sents


@dataclass
class SyntheticCorpus:
    triples: list[Triple]
    pairs: list[PretrainPair]
    topics: list[Topic] = field(default_factory=list)
    stories: list[list[str]] = field(default_factory=list)  # source of ``pairs``


def gen_synthetic(topics: int, stories_per_topic: int, rng: np.random.Generator,
                  negatives_per_triple: int = 1, pretrain_stories_per_topic: int | None = None,
                  context_sentences: tuple[int, int] = (2, 4)) -> SyntheticCorpus:
    """Template stories whose final sentence stays on the context's topic.

    Each triple's negatives reuse the protagonist (so they stay cohesive) but
    are drawn from a different topic's lexicon. Topic lexicons are disjoint,
    so negatives share no topic keyword with their context. Pretraining pairs
    come from a separate set of stories from the same generator.
    """
    if topics < 2:
        raise ValueError("need at least two topics")
    lexicons = synthetic_topics(topics)
    lo, hi = context_sentences
    triples = []
    for tid, topic in enumerate(lexicons):
        for k in range(stories_per_topic):
            person = _NAMES[int(rng.integers(len(_NAMES)))]
            story = _story(topic, person, int(rng.integers(lo, hi + 1)) + 1, rng)
            negs: list[str] = []
            while len(negs) < negatives_per_triple:
                other = int(rng.integers(topics - 1))
                other += other >= tid
                s = _sentence(_TEMPLATES[int(rng.integers(len(_TEMPLATES)))],
                              lexicons[other], person, rng)
                if s not in negs:
                    negs.append(s)
            triples.append(Triple(tuple(story[:-1]), story[-1], tuple(negs),
                                  f"{topic.name}-{k}"))
    order = rng.permutation(len(triples))
    triples = [triples[i] for i in order]

    n_pre = stories_per_topic if pretrain_stories_per_topic is None else pretrain_stories_per_topic
    stories, pairs = [], []
    for topic in lexicons:
        for _ in range(n_pre):
            person = _NAMES[int(rng.integers(len(_NAMES)))]
            stories.append(_story(topic, person, int(rng.integers(3, 6)), rng))
            pairs.extend(split_into_pairs(stories[-1]))
    order = rng.permutation(len(pairs))
    return SyntheticCorpus(triples, [pairs[i] for i in order], lexicons, stories)
