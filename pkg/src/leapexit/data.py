"""Synthetic topic corpus with graded similarity pairs.

Sentences are bags of topic-conditioned tokens drawn from a latent topic
mixture. Pair gold scores are 5 * cos(latent_a, latent_b) plus bounded
uniform noise, so a model that recovers the latent mixture from tokens
scores well on them.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import ContractError

PAD = 0


@dataclass
class SyntheticCorpus:
    vocab_size: int
    num_topics: int
    tokens: list
    topics: np.ndarray
    pairs: np.ndarray
    scores: np.ndarray
    ids: list = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.ids is None:
            self.ids = [f"s{i:06d}" for i in range(len(self.tokens))]
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float)

    def __len__(self):
        return len(self.tokens)

    @property
    def paired_ids(self):
        return np.unique(self.pairs)

    def subset(self, indices, pair_rows):
        indices = np.asarray(indices, dtype=np.int64)
        remap = {int(old): new for new, old in enumerate(indices)}
        pairs = np.array([[remap[int(a)], remap[int(b)]] for a, b in self.pairs[pair_rows]],
                         dtype=np.int64).reshape(-1, 2)
        return SyntheticCorpus(self.vocab_size, self.num_topics,
                               [self.tokens[i] for i in indices], self.topics[indices],
                               pairs, self.scores[pair_rows], [self.ids[i] for i in indices], self.seed)

    def arrays(self, indices=None, max_len=None):
        idx = range(len(self.tokens)) if indices is None else indices
        return pad_batch([self.tokens[i] for i in idx], max_len)


def pad_batch(token_lists, max_len=None):
    """(tokens, mask) arrays padded with PAD to the longest sequence."""
    n = max(len(t) for t in token_lists) if max_len is None else max_len
    tokens = np.full((len(token_lists), n), PAD, dtype=np.int64)
    mask = np.zeros((len(token_lists), n), dtype=bool)
    for i, t in enumerate(token_lists):
        tokens[i, :len(t)] = t
        mask[i, :len(t)] = True
    return tokens, mask


def _vocab_layout(vocab_size, num_topics):
    n_common = max(4, vocab_size // 8)
    per_topic = (vocab_size - 1 - n_common) // num_topics
    if per_topic < 4:
        raise ContractError(f"vocab_size {vocab_size} too small for {num_topics} topics")
    common = np.arange(1, 1 + n_common)
    blocks = [1 + n_common + t * per_topic + np.arange(per_topic) for t in range(num_topics)]
    return common, blocks


def _zipf(n, s=1.0):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def generate(seed=0, n_sentences=20000, n_pairs=2000, vocab_size=256, num_topics=8,
             min_len=8, max_len=32, concentration=0.05, common_frac=0.1, noise=0.25,
             check_learnable=True):
    """Build a corpus of ``n_sentences`` unpaired sentences plus ``n_pairs`` graded pairs.

    Pair sentences are extra (2 * n_pairs of them) and appear in no other pair.
    """
    if num_topics < 2:
        raise ContractError("need at least 2 topics")
    if not 1 <= min_len <= max_len:
        raise ContractError("invalid length range")
    rng = np.random.default_rng(seed)
    common, blocks = _vocab_layout(vocab_size, num_topics)
    common_p = _zipf(len(common))
    topic_p = _zipf(len(blocks[0]))
    starts = np.array([b[0] for b in blocks])

    def mixture():
        return rng.dirichlet(np.full(num_topics, concentration))

    def sentence(z):
        n = int(rng.integers(min_len, max_len + 1))
        is_common = rng.random(n) < common_frac
        topic = rng.choice(num_topics, size=n, p=z / z.sum())
        out = np.empty(n, dtype=np.int64)
        out[is_common] = rng.choice(common, size=int(is_common.sum()), p=common_p)
        rest = ~is_common
        ranks = rng.choice(len(topic_p), size=int(rest.sum()), p=topic_p)
        out[rest] = starts[topic[rest]] + ranks
        return out

    topics, tokens = [], []
    for _ in range(n_sentences):
        z = mixture()
        topics.append(z)
        tokens.append(sentence(z))

    pairs, scores = [], []
    for _ in range(n_pairs):
        za = mixture()
        lam = rng.random()
        zb = lam * za + (1.0 - lam) * mixture()
        ia = len(tokens)
        for z in (za, zb):
            topics.append(z)
            tokens.append(sentence(z))
        pairs.append((ia, ia + 1))
        scores.append(gold_score(za, zb, rng, noise))

    corpus = SyntheticCorpus(vocab_size, num_topics, tokens, np.array(topics), np.array(pairs),
                             np.array(scores), seed=seed)
    if check_learnable and n_pairs >= 3:
        rho = probe_spearman(corpus)
        if rho < 0.6:
            raise ContractError(f"generated corpus fails the learnability gate (probe rho={rho:.3f})")
    return corpus


def gold_score(za, zb, rng, noise=0.25):
    return float(np.clip(5.0 * _cos(za, zb) + rng.uniform(-noise, noise), 0.0, 5.0))


def latent_spearman(corpus):
    """Spearman between gold scores and the latent-mixture cosine of each pair."""
    lat = [_cos(corpus.topics[a], corpus.topics[b]) for a, b in corpus.pairs]
    return float(spearmanr(lat, corpus.scores).correlation)


def bag_of_words(corpus, indices):
    x = np.zeros((len(indices), corpus.vocab_size))
    for row, i in enumerate(indices):
        np.add.at(x[row], corpus.tokens[i], 1.0)
    x[:, PAD] = 0.0
    return x / x.sum(axis=1, keepdims=True)


def probe_spearman(corpus, ridge=1e-3):
    """Held-out Spearman of a linear bag-of-words probe fit to the latent mixtures."""
    paired = set(corpus.paired_ids.tolist())
    train = [i for i in range(len(corpus)) if i not in paired]
    if len(train) < corpus.vocab_size // 4:
        train = list(range(len(corpus)))
    x = bag_of_words(corpus, train)
    y = corpus.topics[train]
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    ea = bag_of_words(corpus, corpus.pairs[:, 0]) @ w
    eb = bag_of_words(corpus, corpus.pairs[:, 1]) @ w
    pred = np.sum(ea * eb, axis=1) / (np.linalg.norm(ea, axis=1) * np.linalg.norm(eb, axis=1))
    return float(spearmanr(pred, corpus.scores).correlation)


def split(corpus, fractions=(0.8, 0.1, 0.1), seed=0):
    """Disjoint train/val/test corpora; both sentences of a pair land in the same part."""
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)

    def cut(n):
        sizes = [int(round(n * fr[1])), int(round(n * fr[2]))]
        sizes.insert(0, n - sum(sizes))
        order = rng.permutation(n)
        return np.split(order, np.cumsum(sizes)[:-1])

    paired = set(corpus.paired_ids.tolist())
    singles = np.array([i for i in range(len(corpus)) if i not in paired], dtype=np.int64)
    pair_parts = cut(len(corpus.pairs))
    single_parts = cut(len(singles))
    out = []
    for rows, srows in zip(pair_parts, single_parts):
        rows = np.sort(rows)
        sent = np.concatenate([singles[np.sort(srows)], corpus.pairs[rows].reshape(-1)])
        out.append(corpus.subset(sent, rows))
    return tuple(out)


# -- file formats -----------------------------------------------------------

def save_corpus(corpus, directory):
    """sentences.jsonl + pairs.csv + meta.json under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "sentences.jsonl"), "w") as fh:
        for tid, toks, z in zip(corpus.ids, corpus.tokens, corpus.topics):
            fh.write(json.dumps({"tokens": [int(t) for t in toks], "text_id": tid,
                                 "topic": [round(float(v), 12) for v in z]}) + "\n")
    with open(os.path.join(directory, "pairs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id_a", "id_b", "score"])
        for (a, b), s in zip(corpus.pairs, corpus.scores):
            w.writerow([corpus.ids[a], corpus.ids[b], repr(float(s))])
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump({"vocab_size": corpus.vocab_size, "num_topics": corpus.num_topics,
                   "seed": corpus.seed, "n_sentences": len(corpus)}, fh, sort_keys=True)


def load_corpus(directory):
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    tokens, topics, ids = [], [], []
    with open(os.path.join(directory, "sentences.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            tokens.append(np.asarray(rec["tokens"], dtype=np.int64))
            topics.append(rec.get("topic", [0.0] * meta["num_topics"]))
            ids.append(rec["text_id"])
    index = {tid: i for i, tid in enumerate(ids)}
    pairs, scores = [], []
    with open(os.path.join(directory, "pairs.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append((index[row["id_a"]], index[row["id_b"]]))
            scores.append(float(row["score"]))
    return SyntheticCorpus(meta["vocab_size"], meta["num_topics"], tokens, np.array(topics),
                           np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(scores), ids, meta["seed"])


def read_token_jsonl(path):
    """Token input records {"tokens": [...], "text_id": ...} -> (ids, token arrays)."""
    ids, toks = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.append(rec.get("text_id", str(len(ids))))
                toks.append(np.asarray(rec["tokens"], dtype=np.int64))
    return ids, toks
