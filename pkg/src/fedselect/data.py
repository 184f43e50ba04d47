"""Synthetic federated datasets and the ``.fdc`` client-shard format.

Shard format, one UTF-8 file per client (``#`` lines and blank lines are
ignored)::

    3,7<TAB>0:1 5:1        sparse: labels, then sorted idx:val pairs
    2<TAB>0.5,-1.0         dense: class label, then comma-separated features
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import BadConfig, ParseError
from .models import DenseBatch, DenseExample, SparseBatch, SparseExample


@dataclass
class ClientData:
    client_id: int
    examples: tuple
    batch: object = field(repr=False, default=None)

    def __len__(self):
        return len(self.examples)


@dataclass
class FederatedDataset:
    """Per-client examples for one split.

    ``kind`` is ``"sparse"`` (tag prediction) or ``"dense"``
    (classification); ``n_labels`` counts tags or classes.
    """

    clients: list
    kind: str
    n_features: int
    n_labels: int
    split: str = "train"

    def __post_init__(self):
        for c in self.clients:
            if len(c.examples) == 0:
                raise BadConfig(f"client {c.client_id} has no examples")
            if c.batch is None:
                c.batch = self._batch(c.examples)

    def _batch(self, examples):
        if self.kind == "sparse":
            return SparseBatch.from_examples(examples, self.n_labels)
        return DenseBatch.from_examples(examples, self.n_labels)

    def __len__(self):
        return len(self.clients)

    @property
    def client_ids(self) -> list:
        return [c.client_id for c in self.clients]

    def by_id(self, client_id: int) -> ClientData:
        return self._index()[client_id]

    def _index(self):
        idx = getattr(self, "_idx", None)
        if idx is None:
            idx = {c.client_id: c for c in self.clients}
            self._idx = idx
        return idx

    def pooled(self):
        """All examples of the split as one batch."""
        cached = getattr(self, "_pooled", None)
        if cached is None:
            cached = self._batch([ex for c in self.clients for ex in c.examples])
            self._pooled = cached
        return cached

    def n_examples(self) -> int:
        return sum(len(c) for c in self.clients)


@dataclass
class FederatedSplits:
    train: FederatedDataset
    valid: FederatedDataset
    test: FederatedDataset

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


@dataclass(frozen=True)
class SyntheticTagConfig:
    """Knobs for :func:`gen_sparse_tag_dataset` (defaults are stated, not calibrated)."""

    clients: int = 100
    vocab: int = 500
    tags: int = 10
    valid_clients: int = 20
    test_clients: int = 20
    examples_per_client: tuple = (10, 30)
    words_per_example: tuple = (4, 10)
    background_words: tuple = (0, 2)
    zipf_exponent: float = 1.1
    topics: int = 20
    topics_per_client: int = 2
    topic_vocab: int = 40
    tags_per_topic: int = 2
    label_noise: float = 0.3
    seed: int = 0


def _check_range(name, pair, minimum):
    lo, hi = pair
    if lo < minimum or hi < lo:
        raise BadConfig(f"{name} must satisfy {minimum} <= lo <= hi, got {pair}")


def gen_sparse_tag_dataset(config: SyntheticTagConfig) -> FederatedSplits:
    """Bag-of-words tag-prediction federation with topic-skewed clients.

    Word frequencies follow a global Zipf law.  Each topic owns a subset of
    the vocabulary and a few associated tags; clients mix a handful of
    topics, so each client's support is a small part of the vocabulary.
    Tags come from a planted sparse linear model plus noise.
    """
    cfg = config
    if cfg.clients < 1 or cfg.valid_clients < 1 or cfg.test_clients < 1:
        raise BadConfig("every split needs at least one client")
    if cfg.tags < 2 or cfg.vocab < cfg.tags:
        raise BadConfig("need vocab >= tags >= 2")
    if cfg.zipf_exponent <= 1:
        raise BadConfig("zipf exponent must exceed 1")
    if not 1 <= cfg.topics_per_client <= cfg.topics:
        raise BadConfig("topics_per_client must lie in [1, topics]")
    if not 1 <= cfg.topic_vocab <= cfg.vocab:
        raise BadConfig("topic_vocab must lie in [1, vocab]")
    if not 1 <= cfg.tags_per_topic <= cfg.tags:
        raise BadConfig("tags_per_topic must lie in [1, tags]")
    _check_range("examples_per_client", cfg.examples_per_client, 1)
    _check_range("words_per_example", cfg.words_per_example, 1)
    _check_range("background_words", cfg.background_words, 0)

    rng = np.random.default_rng(cfg.seed)
    n, t = cfg.vocab, cfg.tags
    zipf = 1.0 / np.arange(1, n + 1) ** cfg.zipf_exponent
    zipf /= zipf.sum()

    topic_words, topic_probs = [], []
    planted = np.zeros((n, t))
    # tags are dealt to topics round-robin so every tag is used
    tag_cycle = rng.permutation(t)
    for j in range(cfg.topics):
        # membership is uniform; within a topic words keep their Zipf weight
        words = np.sort(rng.choice(n, size=cfg.topic_vocab, replace=False))
        weights = zipf[words] * rng.lognormal(0.0, 0.5, size=words.size)
        topic_words.append(words)
        topic_probs.append(weights / weights.sum())
        # each topic word votes for one of the topic's tags, so labels depend
        # on which words an example uses and not only on its topic
        tags = tag_cycle[(j * cfg.tags_per_topic + np.arange(cfg.tags_per_topic)) % t]
        planted[words, rng.choice(tags, size=words.size)] += rng.lognormal(0.0, 0.5, size=words.size)

    def make_client(cid):
        topics = rng.choice(cfg.topics, size=cfg.topics_per_client, replace=False)
        mixture = rng.dirichlet(np.ones(cfg.topics_per_client))
        count = rng.integers(cfg.examples_per_client[0], cfg.examples_per_client[1] + 1)
        examples = []
        for _ in range(count):
            k = topics[rng.choice(topics.size, p=mixture)]
            words, probs = topic_words[k], topic_probs[k]
            length = min(rng.integers(cfg.words_per_example[0], cfg.words_per_example[1] + 1), words.size)
            chosen = set(rng.choice(words, size=length, replace=False, p=probs).tolist())
            extra = rng.integers(cfg.background_words[0], cfg.background_words[1] + 1)
            if extra:
                chosen.update(rng.choice(n, size=extra, p=zipf).tolist())
            idx = np.array(sorted(chosen), dtype=np.int64)
            score = planted[idx].sum(axis=0) / np.sqrt(idx.size)
            score = score + cfg.label_noise * rng.standard_normal(t)
            best = int(np.argmax(score))
            labels = {best} | {int(j) for j in np.flatnonzero(score > 0.75 * score[best]) if score[best] > 0}
            examples.append(SparseExample(tuple(int(i) for i in idx), (1.0,) * idx.size, frozenset(labels)))
        return ClientData(cid, tuple(examples))

    sizes = (cfg.clients, cfg.valid_clients, cfg.test_clients)
    return _build_splits(make_client, sizes, "sparse", n, t)


def _build_splits(make_client, sizes, kind, n_features, n_labels) -> FederatedSplits:
    out, next_id = [], 0
    for split, size in zip(("train", "valid", "test"), sizes):
        clients = [make_client(next_id + i) for i in range(size)]
        next_id += size
        out.append(FederatedDataset(clients, kind, n_features, n_labels, split))
    return FederatedSplits(*out)


def gen_dense_task(
    clients: int = 100,
    d: int = 20,
    c: int = 10,
    per_client: tuple = (20, 40),
    heterogeneity: float = 0.5,
    seed: int = 0,
    valid_clients: int = 20,
    test_clients: int = 20,
    modes_per_class: int = 3,
    separation: float = 1.5,
) -> FederatedSplits:
    """Gaussian mixture classification with per-client label skew.

    Each class is a mixture of ``modes_per_class`` Gaussian blobs, which
    makes the task only partly linearly separable.  Client label marginals
    are ``Dirichlet(1/heterogeneity)``; ``heterogeneity=0`` gives every
    client the uniform marginal.
    """
    if clients < 1 or valid_clients < 1 or test_clients < 1:
        raise BadConfig("every split needs at least one client")
    if d < 1 or c < 2 or modes_per_class < 1:
        raise BadConfig("need d >= 1, c >= 2 and at least one mode per class")
    if heterogeneity < 0:
        raise BadConfig("heterogeneity must be non-negative")
    _check_range("per_client", per_client, 1)
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((c, modes_per_class, d))

    def make_client(cid):
        if heterogeneity == 0:
            marginal = np.full(c, 1.0 / c)
        else:
            marginal = rng.dirichlet(np.full(c, 1.0 / heterogeneity))
        count = rng.integers(per_client[0], per_client[1] + 1)
        labels = rng.choice(c, size=count, p=marginal)
        modes = rng.integers(0, modes_per_class, size=count)
        X = centers[labels, modes] + rng.standard_normal((count, d))
        examples = tuple(DenseExample(tuple(row.tolist()), int(y)) for row, y in zip(X, labels))
        return ClientData(cid, examples)

    return _build_splits(make_client, (clients, valid_clients, test_clients), "dense", d, c)


def _parse_line(text: str, path, lineno, mode):
    if "\t" not in text:
        raise ParseError(path, lineno, "expected <labels><TAB><features>")
    label_part, feat_part = text.split("\t", 1)
    # accept the typographic minus sign some editors insert
    feat_part = feat_part.strip().replace("\u2212", "-")
    try:
        labels = [int(tok) for tok in label_part.split(",")]
    except ValueError:
        raise ParseError(path, lineno, f"bad label field {label_part!r}") from None
    if any(lab < 0 for lab in labels):
        raise ParseError(path, lineno, "labels must be non-negative")
    line_mode = mode
    if line_mode is None:
        line_mode = "sparse" if (":" in feat_part or len(labels) > 1 or not feat_part) else "dense"
    if line_mode == "sparse":
        indices, values = [], []
        for tok in feat_part.split():
            idx, sep, val = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                indices.append(int(idx))
                values.append(float(val))
            except ValueError:
                raise ParseError(path, lineno, f"bad sparse pair {tok!r}") from None
        if any(i < 0 for i in indices):
            raise ParseError(path, lineno, "feature indices must be non-negative")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ParseError(path, lineno, "feature indices must be strictly increasing")
        return "sparse", SparseExample(tuple(indices), tuple(values), frozenset(labels))
    if len(labels) != 1:
        raise ParseError(path, lineno, "dense lines carry exactly one label")
    try:
        feats = tuple(float(tok) for tok in feat_part.split(","))
    except ValueError:
        raise ParseError(path, lineno, f"bad dense features {feat_part!r}") from None
    return "dense", DenseExample(feats, labels[0])


def parse_shard(path, mode=None) -> tuple:
    """Parse one ``.fdc`` file; returns ``(mode, examples)``."""
    path = Path(path)
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.rstrip("\r\n")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            line_mode, ex = _parse_line(text, path, lineno, mode)
            if mode is None:
                mode = line_mode
            elif line_mode != mode:
                raise ParseError(path, lineno, f"{line_mode} line in a {mode} shard")
            if mode == "dense" and examples and len(ex.features) != len(examples[0].features):
                raise ParseError(path, lineno, "dense feature count differs from earlier lines")
            examples.append(ex)
    return mode, examples


def load_client_shards(directory, mode=None, n_features=None, n_labels=None, split="train") -> FederatedDataset:
    """Load every ``*.fdc`` file in ``directory`` as one client.

    Client ids follow lexicographic file order.  Feature and label counts
    are inferred from the data unless given.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise BadConfig(f"{directory} is not a directory")
    files = sorted(directory.glob("*.fdc"), key=lambda p: p.name)
    if not files:
        raise BadConfig(f"no .fdc shards in {directory}")
    parsed = []
    for path in files:
        file_mode, examples = parse_shard(path, mode)
        if not examples:
            raise ParseError(path, 0, "shard has no examples")
        if mode is None:
            mode = file_mode
        elif file_mode != mode:
            raise ParseError(path, 1, f"{file_mode} shard in a {mode} dataset")
        parsed.append(examples)
    if mode == "sparse":
        max_feat = max((ex.indices[-1] for exs in parsed for ex in exs if ex.indices), default=-1)
        max_label = max(max(ex.labels) for exs in parsed for ex in exs if ex.labels)
    else:
        widths = {len(ex.features) for exs in parsed for ex in exs}
        if len(widths) != 1:
            raise BadConfig(f"dense shards disagree on feature count: {sorted(widths)}")
        max_feat = widths.pop() - 1
        max_label = max(ex.label for exs in parsed for ex in exs)
    n_features = max_feat + 1 if n_features is None else n_features
    n_labels = max_label + 1 if n_labels is None else n_labels
    if max_feat >= n_features or max_label >= n_labels:
        raise BadConfig("data exceed the declared feature or label count")
    clients = [ClientData(i, tuple(exs)) for i, exs in enumerate(parsed)]
    return FederatedDataset(clients, mode, n_features, n_labels, split)


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def write_client_shards(dataset: FederatedDataset, directory) -> list:
    """Write one ``client_<id>.fdc`` per client; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = len(str(max(dataset.client_ids, default=0)))
    paths = []
    for client in dataset.clients:
        lines = []
        for ex in client.examples:
            if dataset.kind == "sparse":
                labels = ",".join(str(l) for l in sorted(ex.labels))
                feats = " ".join(f"{i}:{_fmt(v)}" for i, v in zip(ex.indices, ex.values))
            else:
                labels = str(ex.label)
                feats = ",".join(repr(float(v)) for v in ex.features)
            lines.append(f"{labels}\t{feats}\n")
        path = directory / f"client_{client.client_id:0{width}d}.fdc"
        path.write_text("".join(lines), encoding="utf-8")
        paths.append(path)
    return paths


def support_sizes(dataset: FederatedDataset) -> np.ndarray:
    """Distinct features per client (sparse datasets)."""
    return np.array([np.unique(c.batch.indices).size for c in dataset.clients])
