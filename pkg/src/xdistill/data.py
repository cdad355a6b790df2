"""Synthetic multilingual corpora and a language-invariant pair classification task.

All languages verbalize one shared concept-level Markov chain. A fixed
fraction of concepts ("anchors") use the same token id in every language;
the rest map into language-private id ranges. Task labels are decided on
concept sequences before verbalization, so parallel examples share labels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import CLS, PAD, SEP, SequenceBatch

FIRST_FREE_ID = 4
ENTAIL, CONTRADICT, NEUTRAL = 0, 1, 2
LABELS = ("entail", "contradict", "neutral")
NUM_CLASSES = 3
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ConceptGrammar:
    num_concepts: int
    transition: np.ndarray
    start: np.ndarray
    sentence_length: tuple
    seed: int

    def antonym(self, concept):
        # fixed involution: pairs (0, 1), (2, 3), ...
        return concept ^ 1

    def sample_chain(self, rng, length):
        chain = [int(rng.choice(self.num_concepts, p=self.start))]
        for _ in range(length - 1):
            chain.append(int(rng.choice(self.num_concepts, p=self.transition[chain[-1]])))
        return chain


def gen_grammar(seed, num_concepts, sentence_length=(5, 12), successors=3, smoothing=0.05):
    """Sparse random order-1 chain over concepts.

    Each row puts Dirichlet weight on a few successors and ``smoothing`` mass
    spread over all concepts, so the chain is irreducible.
    """
    if num_concepts < 8:
        raise ConfigError(f"need at least 8 concepts, got {num_concepts}")
    if num_concepts % 2:
        raise ConfigError("num_concepts must be even (concepts come in antonym pairs)")
    lo, hi = sentence_length
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad sentence length range {sentence_length!r}")
    rng = np.random.default_rng(seed)
    trans = np.full((num_concepts, num_concepts), smoothing / num_concepts)
    for c in range(num_concepts):
        nxt = rng.choice(num_concepts, size=successors, replace=False)
        trans[c, nxt] += (1.0 - smoothing) * rng.dirichlet(np.ones(successors))
    trans /= trans.sum(axis=1, keepdims=True)
    start = np.full(num_concepts, 1.0 / num_concepts)
    return ConceptGrammar(num_concepts, trans, start, (int(lo), int(hi)), int(seed))


def stationary_distribution(grammar, iters=10_000, tol=1e-14):
    pi = grammar.start.copy()
    for _ in range(iters):
        nxt = pi @ grammar.transition
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    return pi


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: str
    concept_to_token: tuple
    anchor_set: frozenset
    anchor_fraction: float

    def verbalize(self, concepts):
        table = self.concept_to_token
        return [table[c] for c in concepts]

    @property
    def tokens(self):
        return set(self.concept_to_token)

    @property
    def max_token(self):
        return max(self.concept_to_token)


def anchor_concepts(grammar, anchor_fraction):
    """The shared concept set; depends only on the grammar seed and fraction."""
    if not 0.0 <= anchor_fraction <= 1.0:
        raise ConfigError(f"anchor_fraction must lie in [0, 1], got {anchor_fraction}")
    count = int(round(anchor_fraction * grammar.num_concepts))
    order = np.random.default_rng([grammar.seed, 7919]).permutation(grammar.num_concepts)
    return sorted(int(c) for c in order[:count])


def derive_language(grammar, lang_seed, anchor_fraction, vocab_offset, lang_id=None, vocab_size=None):
    """Concept -> token map: anchors at ids 4.., private concepts from ``vocab_offset``."""
    anchors = anchor_concepts(grammar, anchor_fraction)
    private = [c for c in range(grammar.num_concepts) if c not in set(anchors)]
    if private and vocab_offset < FIRST_FREE_ID + len(anchors):
        raise ConfigError("private token range overlaps the anchor range")
    if vocab_size is not None and vocab_offset + len(private) > vocab_size:
        raise ConfigError(
            f"vocab overflow: language needs ids up to {vocab_offset + len(private) - 1}, "
            f"vocab_size is {vocab_size}"
        )
    table = [0] * grammar.num_concepts
    for rank, c in enumerate(anchors):
        table[c] = FIRST_FREE_ID + rank
    perm = np.random.default_rng(lang_seed).permutation(len(private))
    for c, slot in zip(private, perm):
        table[c] = vocab_offset + int(slot)
    return LanguageSpec(lang_id or f"lang{lang_seed}", tuple(table), frozenset(anchors), float(anchor_fraction))


def required_vocab(num_concepts, anchor_fraction, num_languages):
    anchors = int(round(anchor_fraction * num_concepts))
    return FIRST_FREE_ID + anchors + num_languages * (num_concepts - anchors)


def build_languages(grammar, num_languages, anchor_fraction, seed, vocab_size=None):
    """``num_languages`` languages with disjoint private ranges; index 0 is the
    fine-tuning (English-analog) language."""
    anchors = int(round(anchor_fraction * grammar.num_concepts))
    width = grammar.num_concepts - anchors
    base = FIRST_FREE_ID + anchors
    return [
        derive_language(grammar, [seed, i], anchor_fraction, base + i * width,
                        lang_id=f"L{i}", vocab_size=vocab_size)
        for i in range(num_languages)
    ]


# -------------------------------------------------------------------- corpus


def gen_corpus(grammar, language, num_sentences, seed, seq_len=16):
    """[num_sentences x seq_len] int array: CLS tokens SEP then PAD."""
    lo, hi = grammar.sentence_length
    if hi + 2 > seq_len:
        raise ConfigError(f"sentences up to {hi} tokens do not fit seq_len {seq_len}")
    rng = np.random.default_rng(seed)
    out = np.full((num_sentences, seq_len), PAD, dtype=np.int64)
    for i in range(num_sentences):
        chain = grammar.sample_chain(rng, int(rng.integers(lo, hi + 1)))
        toks = [CLS] + language.verbalize(chain) + [SEP]
        out[i, : len(toks)] = toks
    return out


# ---------------------------------------------------------------------- task


@dataclass(frozen=True)
class TaskExample:
    premise: tuple
    hypothesis: tuple
    label: int


@dataclass(frozen=True)
class TaskShape:
    premise_length: tuple = (5, 8)
    hypothesis_length: tuple = (3, 5)
    neutral_overlap: float = 0.3


def _concept_example(grammar, rng, label, shape):
    plo, phi = shape.premise_length
    hlo, hhi = shape.hypothesis_length
    while True:
        premise = grammar.sample_chain(rng, int(rng.integers(plo, phi + 1)))
        k = int(rng.integers(hlo, min(hhi, len(premise)) + 1))
        if label == NEUTRAL:
            for _ in range(100):
                hyp = grammar.sample_chain(rng, k)
                shared = sum(c in premise for c in hyp)
                if shared / k < shape.neutral_overlap:
                    return premise, hyp
            continue
        idx = np.sort(rng.choice(len(premise), size=k, replace=False))
        hyp = [premise[i] for i in idx]
        if label == ENTAIL:
            return premise, hyp
        options = [j for j, c in enumerate(hyp) if grammar.antonym(c) not in premise]
        if not options:
            continue
        j = options[int(rng.integers(len(options)))]
        hyp[j] = grammar.antonym(hyp[j])
        return premise, hyp


def gen_concept_task(grammar, num_examples, seed, shape=TaskShape()):
    """Language-free (premise, hypothesis, label) concept triples, classes balanced."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_examples) % NUM_CLASSES)
    return [(*_concept_example(grammar, rng, int(y), shape), int(y)) for y in labels]


def verbalize_task(concept_task, language):
    return [TaskExample(tuple(language.verbalize(p)), tuple(language.verbalize(h)), y)
            for p, h, y in concept_task]


def gen_task(grammar, language, num_examples, seed, shape=TaskShape()):
    return verbalize_task(gen_concept_task(grammar, num_examples, seed, shape), language)


# ------------------------------------------------------------------- batches


def encode_pairs(examples, seq_len):
    """CLS premise SEP hypothesis SEP, type ids 0 up to the first SEP and 1 after."""
    n = len(examples)
    ids = np.full((n, seq_len), PAD, dtype=np.int64)
    types = np.zeros((n, seq_len), dtype=np.int64)
    mask = np.zeros((n, seq_len), dtype=np.int64)
    for i, ex in enumerate(examples):
        first = [CLS, *ex.premise, SEP]
        second = [*ex.hypothesis, SEP]
        total = len(first) + len(second)
        if total > seq_len:
            raise DataError(f"pair of {total} tokens does not fit seq_len {seq_len}")
        ids[i, :total] = first + second
        types[i, len(first):total] = 1
        mask[i, :total] = 1
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return SequenceBatch(ids, types, mask), labels


def sequences_to_batch(rows):
    return SequenceBatch.from_token_ids(rows)


def as_sequences(corpus):
    if isinstance(corpus, SequenceBatch):
        return corpus
    return SequenceBatch.from_token_ids(np.asarray(corpus))


def concat_sequences(parts):
    return SequenceBatch(np.concatenate([p.token_ids for p in parts]),
                         np.concatenate([p.type_ids for p in parts]),
                         np.concatenate([p.attention_mask for p in parts]))


def pack_corpus(corpus, pair_rate, seed):
    """Join consecutive sentences into two-segment sequences.

    With probability ``pair_rate`` (and when it fits) sentence i is followed
    by sentence i + 1 as segment B: CLS a SEP b SEP, type ids 0 then 1. The
    result is a SequenceBatch with one row per emitted sequence.
    """
    corpus = np.asarray(corpus)
    n, seq_len = corpus.shape
    rng = np.random.default_rng(seed)
    lengths = (corpus != PAD).sum(axis=1)
    ids = np.full((n, seq_len), PAD, dtype=np.int64)
    types = np.zeros((n, seq_len), dtype=np.int64)
    out = 0
    i = 0
    while i < n:
        a = corpus[i, : lengths[i]]
        if i + 1 < n and rng.random() < pair_rate and lengths[i] + lengths[i + 1] - 1 <= seq_len:
            b = corpus[i + 1, 1 : lengths[i + 1]]
            ids[out, : len(a)] = a
            ids[out, len(a) : len(a) + len(b)] = b
            types[out, len(a) : len(a) + len(b)] = 1
            i += 2
        else:
            ids[out, : len(a)] = a
            i += 1
        out += 1
    ids, types = ids[:out], types[:out]
    return SequenceBatch(ids, types, (ids != PAD).astype(np.int64))


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def build_batches(items, batch_size, seed, epochs=1, seq_len=None):
    """Yield shuffled batches epoch by epoch.

    ``items`` is either an int array of padded sequences (yields
    SequenceBatch) or a list of TaskExample (yields (SequenceBatch, labels)).
    """
    if len(items) == 0:
        raise DataError("cannot batch an empty input")
    pairs = not isinstance(items, np.ndarray)
    if pairs:
        if seq_len is None:
            raise ConfigError("seq_len is required for pair examples")
        encoded, labels = encode_pairs(items, seq_len)
    for epoch in range(epochs):
        order = epoch_order(len(items), seed, epoch)
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            if pairs:
                yield SequenceBatch(encoded.token_ids[sel], encoded.type_ids[sel],
                                    encoded.attention_mask[sel]), labels[sel]
            else:
                yield sequences_to_batch(items[sel])


# --------------------------------------------------------------------- files


def write_corpus(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#xdistill-corpus\tversion={SCHEMA_VERSION}\tfields=tokens\n")
        for row in rows:
            toks = row[row != PAD] if isinstance(row, np.ndarray) else row
            f.write(" ".join(str(int(t)) for t in toks) + "\n")


def read_corpus(path, seq_len):
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        _check_header(header, "xdistill-corpus", path)
        rows = [list(map(int, line.split())) for line in f if line.strip()]
    out = np.full((len(rows), seq_len), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > seq_len:
            raise DataError(f"{path}: line {i + 2} longer than seq_len {seq_len}")
        out[i, : len(r)] = r
    return out


def write_task(path, examples):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#xdistill-task\tversion={SCHEMA_VERSION}\tfields=premise,hypothesis,label\n")
        for ex in examples:
            f.write(" ".join(map(str, ex.premise)) + "\t" + " ".join(map(str, ex.hypothesis))
                    + f"\t{ex.label}\n")


def read_task(path):
    with open(path, encoding="utf-8") as f:
        _check_header(f.readline(), "xdistill-task", path)
        out = []
        for i, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {i} needs 3 tab-separated fields")
            out.append(TaskExample(tuple(map(int, parts[0].split())),
                                   tuple(map(int, parts[1].split())), int(parts[2])))
    return out


def _check_header(header, kind, path):
    fields = header.strip().lstrip("#").split("\t")
    if not fields or fields[0] != kind:
        raise DataError(f"{path}: missing {kind} header")
    meta = dict(f.split("=", 1) for f in fields[1:] if "=" in f)
    if meta.get("version") != str(SCHEMA_VERSION):
        raise DataError(f"{path}: unsupported schema version {meta.get('version')!r}")


# --------------------------------------------------------------------- world


@dataclass
class World:
    """Everything one seed of an experiment reads: corpora and task splits."""

    languages: list
    corpora: list
    train: list
    dev: list
    tests: list

    @property
    def lang_ids(self):
        return [lang.lang_id for lang in self.languages]


def build_world(data_cfg, seq_len, vocab_size, seed):
    """Generate the full synthetic world for ``seed`` from a DataConfig."""
    grammar = gen_grammar(seed, data_cfg.num_concepts, tuple(data_cfg.sentence_length),
                          data_cfg.successors, data_cfg.smoothing)
    languages = build_languages(grammar, data_cfg.num_languages, data_cfg.anchor_fraction, seed, vocab_size)
    corpora = [
        pack_corpus(gen_corpus(grammar, lang, data_cfg.corpus_sentences, [seed, 10, i], seq_len),
                    data_cfg.pair_rate, [seed, 11, i])
        for i, lang in enumerate(languages)
    ]
    shape = TaskShape(tuple(data_cfg.premise_length), tuple(data_cfg.hypothesis_length), data_cfg.neutral_overlap)
    if shape.premise_length[1] + shape.hypothesis_length[1] + 3 > seq_len:
        raise ConfigError("task pairs do not fit seq_len")
    english = languages[0]
    train = verbalize_task(gen_concept_task(grammar, data_cfg.train_examples, [seed, 20], shape), english)
    dev = verbalize_task(gen_concept_task(grammar, data_cfg.dev_examples, [seed, 22], shape), english)
    concept_test = gen_concept_task(grammar, data_cfg.test_examples, [seed, 21], shape)
    tests = [verbalize_task(concept_test, lang) for lang in languages]
    return World(languages, corpora, train, dev, tests)
