"""Seeded synthetic text-classification corpus with planted synonym structure.

Every class owns a pool of keyword tokens split into synonym groups; an
example carries 1-3 keywords of its class scattered among neutral noise
words.  Substituting within a group never changes the ideal label.  Optional
*bridge* links pair a keyword of one class with a keyword of another, which is
what gives a substitution attack something to exploit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .minibert import PAD_ID, UNK_ID

PAD, UNK = "<pad>", "<unk>"


class CorpusFormatError(ValueError):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("ids 0 and 1 are reserved for <pad> and <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token strings")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i != PAD_ID]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


@dataclass
class Example:
    tokens: np.ndarray
    label: int
    length: int


@dataclass
class Dataset:
    """Tokens padded at the tail to a common length, shape (n, seq_len)."""

    tokens: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Example:
        return Example(self.tokens[i], int(self.labels[i]), int(self.lengths[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.tokens[idx], self.labels[idx], self.lengths[idx])

    @classmethod
    def empty(cls, seq_len: int) -> "Dataset":
        return cls(np.zeros((0, seq_len), dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64))


class SynonymTable(dict):
    """token id -> list of substitute ids; symmetric, no self-substitutes."""

    def validate(self) -> None:
        for a, subs in self.items():
            if a in subs:
                raise ValueError(f"token {a} lists itself as a substitute")
            for b in subs:
                if a not in self.get(b, ()):
                    raise ValueError(f"substitution {a}->{b} is not symmetric")

    def restricted(self, keep) -> "SynonymTable":
        """Sub-table containing only edges whose endpoints both satisfy ``keep``."""
        out = SynonymTable()
        for a, subs in self.items():
            kept = [b for b in subs if keep(a) and keep(b)]
            if kept:
                out[a] = kept
        return out

    def save(self, path, vocab: Vocab) -> None:
        lines = [f"{vocab.tokens[a]}: " + " ".join(vocab.tokens[b] for b in subs)
                 for a, subs in sorted(self.items())]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path, vocab: Vocab) -> "SynonymTable":
        out = cls()
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if ":" not in line:
                raise CorpusFormatError(f"{path}:{n}: expected 'token: sub1 sub2 ...'")
            head, rest = line.split(":", 1)
            out[vocab.index[head.strip()]] = [vocab.index[w] for w in rest.split()]
        return out


@dataclass(frozen=True)
class GenSpec:
    n_classes: int = 2
    vocab_size: int = 200
    seq_len: int = 32
    n_train: int = 2000
    n_test: int = 500
    planted_keywords_per_class: int = 12
    synonym_group_size: int = 4
    noise_token_fraction: float = 0.75
    label_noise: float = 0.0
    bridge_groups: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.seq_len < 3:
            raise ValueError("seq_len must leave room for 3 keywords")
        if self.synonym_group_size < 1 or self.planted_keywords_per_class % self.synonym_group_size:
            raise ValueError("planted_keywords_per_class must be a multiple of synonym_group_size")
        n_kw = self.n_classes * self.planted_keywords_per_class
        if 2 + n_kw + self.synonym_group_size > self.vocab_size:
            raise ValueError(f"vocab_size={self.vocab_size} too small for {n_kw} keywords plus noise words")
        if not 0.0 <= self.label_noise <= 1.0 or not 0.0 < self.noise_token_fraction <= 1.0:
            raise ValueError("label_noise must be in [0,1] and noise_token_fraction in (0,1]")
        max_bridges = self.planted_keywords_per_class * (self.n_classes // 2)
        if not 0 <= self.bridge_groups <= max_bridges:
            raise ValueError(f"bridge_groups must be in [0, {max_bridges}]")


@dataclass
class Corpus:
    train: Dataset
    test: Dataset
    synonyms: SynonymTable
    vocab: Vocab
    keywords: list[np.ndarray]      # per class, keyword ids

    def keyword_class(self) -> dict[int, int]:
        return {int(t): c for c, ids in enumerate(self.keywords) for t in ids}


def generate(spec: GenSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    K, g, C = spec.planted_keywords_per_class, spec.synonym_group_size, spec.n_classes
    words = [PAD, UNK]
    keywords = []
    for c in range(C):
        keywords.append(np.arange(len(words), len(words) + K))
        words.extend(f"c{c}k{j}" for j in range(K))
    noise = np.arange(len(words), spec.vocab_size)
    words.extend(f"w{j}" for j in range(len(noise)))
    vocab = Vocab(words)

    syn = SynonymTable()

    def link(a: int, b: int) -> None:
        syn.setdefault(a, [])
        syn.setdefault(b, [])
        if b not in syn[a]:
            syn[a].append(b)
            syn[b].append(a)

    groups = [kw[i:i + g] for kw in keywords for i in range(0, K, g)]
    groups += [noise[i:i + g] for i in range(0, len(noise), g)]
    for grp in groups:
        for a in grp:
            for b in grp:
                if a < b:
                    link(int(a), int(b))
    # bridges pair keyword j of class 2i with keyword j of class 2i+1, spread over groups
    order = np.concatenate([np.arange(s, K, g) for s in range(g)])
    for n in range(spec.bridge_groups):
        pair, j = divmod(n, K)
        link(int(keywords[2 * pair][order[j]]), int(keywords[2 * pair + 1][order[j]]))
    for a in syn:
        syn[a].sort()

    n_total = spec.n_train + spec.n_test
    T = spec.seq_len
    tokens = np.zeros((n_total, T), dtype=np.int64)
    labels = np.zeros(n_total, dtype=np.int64)
    lengths = np.zeros(n_total, dtype=np.int64)
    base = np.concatenate([np.arange(spec.n_train) % C, np.arange(spec.n_test) % C])
    for i in range(n_total):
        y = int(base[i])
        m = int(rng.integers(1, 4))
        n_fill = int(rng.binomial(T - m, spec.noise_token_fraction))
        n = m + n_fill
        row = rng.choice(noise, size=n)
        row[rng.choice(n, size=m, replace=False)] = rng.choice(keywords[y], size=m)
        tokens[i, :n] = row
        lengths[i] = n
        if rng.random() < spec.label_noise:
            y = int(rng.choice([c for c in range(C) if c != y]))
        labels[i] = y
    train = Dataset(tokens[:spec.n_train], labels[:spec.n_train], lengths[:spec.n_train])
    test = Dataset(tokens[spec.n_train:], labels[spec.n_train:], lengths[spec.n_train:])
    return Corpus(train, test, syn, vocab, keywords)


def save_dataset(path, data: Dataset, vocab: Vocab) -> None:
    lines = [f"{int(y)}\t" + " ".join(vocab.decode(row[:n]))
             for row, y, n in zip(data.tokens, data.labels, data.lengths)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_dataset(path, vocab: Vocab, seq_len: int) -> Dataset:
    """Parse ``label<TAB>tok tok ...`` lines; unknown words become <unk>."""
    rows, labels, lengths = [], [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusFormatError(f"{path}:{n}: expected 'label<TAB>tokens'")
        lab, text = line.split("\t", 1)
        try:
            y = int(lab)
        except ValueError:
            raise CorpusFormatError(f"{path}:{n}: label {lab!r} is not an integer") from None
        ids = vocab.encode(text.split())[:seq_len]
        row = np.zeros(seq_len, dtype=np.int64)
        row[:len(ids)] = ids
        rows.append(row)
        labels.append(y)
        lengths.append(len(ids))
    if not rows:
        return Dataset.empty(seq_len)
    return Dataset(np.stack(rows), np.array(labels, dtype=np.int64), np.array(lengths, dtype=np.int64))
