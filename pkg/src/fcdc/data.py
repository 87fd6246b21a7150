"""Hierarchically labelled corpora: synthetic generation, JSONL/TSV ingestion,
vocabulary building and deterministic batching.

Training consumers only ever see :class:`Batch` objects, which carry token
ids, masks and coarse labels. Fine labels stay on :class:`Document` and are
read by evaluation code only.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PAD, UNK = 0, 1


@dataclass(frozen=True)
class Document:
    text: str
    coarse: int
    fine: int | None = None
    split: str = "train"
    ids: tuple[int, ...] = ()


@dataclass
class Corpus:
    documents: list[Document]
    coarse_names: list[str]
    fine_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        parent: dict[int, int] = {}
        for d in self.documents:
            if d.split not in ("train", "test"):
                raise ValueError(f"unknown split {d.split!r}")
            if d.fine is None:
                continue
            if parent.setdefault(d.fine, d.coarse) != d.coarse:
                name = self.fine_names[d.fine] if d.fine < len(self.fine_names) else d.fine
                raise ValueError(f"fine label {name!r} appears under more than one coarse label")
        has_train = {d.coarse for d in self.documents if d.split == "train"}
        missing = set(range(len(self.coarse_names))) - has_train
        if self.documents and missing:
            raise ValueError(f"coarse classes without training documents: {sorted(missing)}")

    @property
    def num_coarse(self) -> int:
        return len(self.coarse_names)

    @property
    def num_fine(self) -> int:
        return len(self.fine_names)

    def split(self, name: str) -> list[Document]:
        return [d for d in self.documents if d.split == name]

    def __len__(self) -> int:
        return len(self.documents)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    num_coarse: int = 4
    fine_per_coarse: int = 3
    train_per_fine: int = 50
    test_per_fine: int = 20
    doc_len: int = 16
    coarse_pool: int = 20
    fine_pool: int = 5
    noise_pool: int = 200
    p_coarse: float = 0.4
    p_fine: float = 0.4
    p_noise: float = 0.2
    fine_sharing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        probs = (self.p_coarse, self.p_fine, self.p_noise)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("mixing probabilities must be non-negative and sum to 1")
        for p, size, name in zip(probs, (self.coarse_pool, self.fine_pool, self.noise_pool),
                                 ("coarse", "fine", "noise")):
            if p > 0 and size <= 0:
                raise ValueError(f"{name} pool is empty but has probability {p}")
        if not 0.0 <= self.fine_sharing <= 1.0:
            raise ValueError("fine_sharing must be in [0, 1]")
        if self.num_coarse < 1 or self.fine_per_coarse < 1 or self.doc_len < 1 or self.train_per_fine < 1:
            raise ValueError("class counts, docs per class and doc length must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Each token is drawn from the coarse pool of the document's coarse class,
    the fine pool of its fine class, or a shared noise pool.

    With probability ``fine_sharing`` a fine-source token instead comes from a
    pool indexed only by the fine position k, shared by fine class k of every
    coarse class, so fine vocabulary alone no longer identifies the coarse class.
    """
    rng = np.random.default_rng(spec.seed)
    probs = np.array([spec.p_coarse, spec.p_fine, spec.p_noise])
    docs = []
    fine_names = []
    for c in range(spec.num_coarse):
        for k in range(spec.fine_per_coarse):
            fine_id = len(fine_names)
            fine_names.append(f"c{c}.f{k}")
            for split, count in (("train", spec.train_per_fine), ("test", spec.test_per_fine)):
                for _ in range(count):
                    which = rng.choice(3, size=spec.doc_len, p=probs)
                    words = []
                    for w in which:
                        if w == 0:
                            words.append(f"c{c}_{rng.integers(spec.coarse_pool)}")
                        elif w == 1:
                            j = rng.integers(spec.fine_pool)
                            shared = spec.fine_sharing > 0 and rng.random() < spec.fine_sharing
                            words.append(f"f{k}_{j}" if shared else f"c{c}.f{k}_{j}")
                        else:
                            words.append(f"n_{rng.integers(spec.noise_pool)}")
                    docs.append(Document(" ".join(words), c, fine_id, split))
    return Corpus(docs, [f"c{c}" for c in range(spec.num_coarse)], fine_names)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_len: int | None = None) -> tuple[int, ...]:
        ids = tuple(self.index.get(w, UNK) for w in text.split())
        return ids[:max_len] if max_len is not None else ids


def build_vocab(corpus: Corpus, min_freq: int = 1, split: str | None = "train") -> Vocab:
    docs = corpus.documents if split is None else corpus.split(split)
    freq = Counter(w for d in docs for w in d.text.split())
    kept = sorted((w for w, n in freq.items() if n >= min_freq), key=lambda w: (-freq[w], w))
    return Vocab(["<pad>", "<unk>"] + kept)


def tokenize(corpus: Corpus, vocab: Vocab, max_len: int) -> Corpus:
    docs = []
    for d in corpus.documents:
        ids = vocab.encode(d.text, max_len)
        if not ids:
            raise ValueError(f"empty document: {d.text!r}")
        docs.append(Document(d.text, d.coarse, d.fine, d.split, ids))
    return Corpus(docs, corpus.coarse_names, corpus.fine_names)


# ---------------------------------------------------------------------------
# file formats


def _stratified_split(docs: list[dict], seed: int, test_frac: float = 0.2) -> None:
    groups: dict[str, list[int]] = {}
    for i, d in enumerate(docs):
        if "split" not in d:
            key = d.get("fine") if d.get("fine") is not None else d["coarse"]
            groups.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    for key in sorted(groups):
        idx = groups[key]
        order = rng.permutation(len(idx))
        n_test = int(round(test_frac * len(idx))) if len(idx) > 1 else 0
        for rank, j in enumerate(order):
            docs[idx[j]]["split"] = "test" if rank < n_test else "train"


def _build_corpus(records: list[dict], source: str, seed: int) -> Corpus:
    if not records:
        raise ValueError(f"{source}: no documents")
    _stratified_split(records, seed)
    coarse_ids: dict[str, int] = {}
    fine_ids: dict[str, int] = {}
    fine_parent: dict[str, str] = {}
    docs = []
    for r in records:
        c = coarse_ids.setdefault(r["coarse"], len(coarse_ids))
        f = None
        if r.get("fine") is not None:
            name = r["fine"]
            if fine_parent.setdefault(name, r["coarse"]) != r["coarse"]:
                raise ValueError(
                    f"{source}: hierarchy violation: fine label {name!r} appears under "
                    f"coarse labels {fine_parent[name]!r} and {r['coarse']!r}")
            f = fine_ids.setdefault(name, len(fine_ids))
        docs.append(Document(r["text"], c, f, r["split"]))
    return Corpus(docs, list(coarse_ids), list(fine_ids))


def load_jsonl(path, seed: int = 0) -> Corpus:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(r, dict) or not isinstance(r.get("text"), str) or not isinstance(r.get("coarse"), str):
                raise ValueError(f"{path}: line {lineno}: record needs string fields 'text' and 'coarse'")
            if "fine" in r and r["fine"] is not None and not isinstance(r["fine"], str):
                raise ValueError(f"{path}: line {lineno}: 'fine' must be a string")
            if "split" in r and r["split"] not in ("train", "test"):
                raise ValueError(f"{path}: line {lineno}: split must be 'train' or 'test'")
            records.append(r)
    return _build_corpus(records, str(path), seed)


def load_tsv(path, seed: int = 0) -> Corpus:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise ValueError(f"{path}: line {lineno}: expected text<TAB>coarse[<TAB>fine]")
            r = {"text": parts[0], "coarse": parts[1]}
            if len(parts) == 3 and parts[2]:
                r["fine"] = parts[2]
            records.append(r)
    return _build_corpus(records, str(path), seed)


def load_corpus(path, seed: int = 0) -> Corpus:
    return load_tsv(path, seed) if str(path).endswith(".tsv") else load_jsonl(path, seed)


def save_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus.documents:
            r = {"text": d.text, "coarse": corpus.coarse_names[d.coarse]}
            if d.fine is not None:
                r["fine"] = corpus.fine_names[d.fine]
            r["split"] = d.split
            fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray  # [B, T] int64, PAD-filled
    mask: np.ndarray  # [B, T] 0/1
    coarse: np.ndarray  # [B]
    index: np.ndarray  # positions within the split, for bookkeeping


def collate(docs: list[Document], index=None) -> Batch:
    if any(not d.ids for d in docs):
        raise ValueError("documents must be tokenized before batching")
    t = max(len(d.ids) for d in docs)
    tokens = np.full((len(docs), t), PAD, dtype=np.int64)
    mask = np.zeros((len(docs), t), dtype=np.int64)
    for i, d in enumerate(docs):
        tokens[i, : len(d.ids)] = d.ids
        mask[i, : len(d.ids)] = 1
    coarse = np.array([d.coarse for d in docs], dtype=np.int64)
    return Batch(tokens, mask, coarse, np.arange(len(docs)) if index is None else np.asarray(index))


def batches(corpus: Corpus, batch_size: int, seed: int, epoch: int, split: str = "train") -> Iterator[Batch]:
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    docs = corpus.split(split)
    order = np.random.default_rng([seed, epoch]).permutation(len(docs))
    for start in range(0, len(docs), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield collate([docs[i] for i in idx], idx)


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)


def load_spec(path) -> SyntheticSpec:
    return SyntheticSpec.from_dict(json.loads(Path(path).read_text()))
