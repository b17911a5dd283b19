"""Embedding tables, corpora and gold annotations.

Embedding files are whitespace-separated text: a token followed by its
values, one record per line, with an optional ``"V d"`` header line. Corpus
files hold one sentence per line with single-space separated fields. Gold
heads use 0 for the root and 1-based positions otherwise.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

UNK_ERROR = "error"
UNK_MEAN = "mean"

DEFAULT_PUNCT = frozenset(
    {",", ".", ":", ";", "?", "!", "``", "''", '"', "'", "-LRB-", "-RRB-", "(", ")", "--", "-", "...", "`", "#", "$"}
)


class DataError(ValueError):
    pass


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingTable:
    vocab: tuple
    vectors: np.ndarray
    unk_policy: str = UNK_MEAN
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.vocab):
            if tok in index:
                raise DataError(f"duplicate token {tok!r}")
            index[tok] = i
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocab):
            raise DataError("vectors must be a |vocab| x dim matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding table contains non-finite values")
        if self.unk_policy not in (UNK_ERROR, UNK_MEAN):
            raise DataError(f"unknown unk_policy {self.unk_policy!r}")
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "vectors", _readonly(self.vectors))

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vocab)

    def lookup(self, token):
        i = self.index.get(token)
        if i is not None:
            return self.vectors[i]
        if self.unk_policy == UNK_ERROR:
            raise DataError(f"unknown token {token!r}")
        return self.vectors.mean(axis=0)


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    embeddings: np.ndarray
    gold_tags: Optional[tuple] = None
    gold_heads: Optional[tuple] = None
    projective: Optional[bool] = None

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise DataError("sentence must contain at least one token")
        emb = _readonly(self.embeddings)
        if emb.ndim != 2 or emb.shape[0] != n:
            raise DataError(f"expected {n} embeddings, got shape {emb.shape}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "embeddings", emb)
        if self.gold_tags is not None:
            if len(self.gold_tags) != n:
                raise DataError(f"{len(self.gold_tags)} tags for {n} tokens")
            object.__setattr__(self, "gold_tags", tuple(self.gold_tags))
        if self.gold_heads is not None:
            heads = tuple(int(h) for h in self.gold_heads)
            check_tree(heads)
            object.__setattr__(self, "gold_heads", heads)
            object.__setattr__(self, "projective", is_projective(heads))

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Corpus:
    sentences: tuple
    tag_inventory: Optional[frozenset] = None

    def __post_init__(self):
        sents = tuple(self.sentences)
        if not sents:
            raise DataError("empty corpus")
        dims = {s.embeddings.shape[1] for s in sents}
        if len(dims) != 1:
            raise DataError(f"inconsistent embedding dimensions {sorted(dims)}")
        object.__setattr__(self, "sentences", sents)
        if self.tag_inventory is None and all(s.gold_tags is not None for s in sents):
            object.__setattr__(self, "tag_inventory", frozenset(t for s in sents for t in s.gold_tags))

    @property
    def dim(self):
        return self.sentences[0].embeddings.shape[1]

    @property
    def n_tokens(self):
        return sum(len(s) for s in self.sentences)

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


def check_tree(heads):
    """Raise unless ``heads`` is a single-rooted tree over 1..n."""
    n = len(heads)
    for i, h in enumerate(heads, 1):
        if not 0 <= h <= n:
            raise DataError(f"head {h} of token {i} out of range [0, {n}]")
        if h == i:
            raise DataError(f"token {i} heads itself")
    roots = [i for i, h in enumerate(heads, 1) if h == 0]
    if len(roots) != 1:
        raise DataError(f"expected exactly one root, found {len(roots)}")
    for i in range(1, n + 1):
        seen = set()
        j = i
        while j != 0:
            if j in seen:
                raise DataError(f"cycle through token {j}")
            seen.add(j)
            j = heads[j - 1]


def is_projective(heads):
    arcs = [(min(h, d), max(h, d)) for d, h in enumerate(heads, 1) if h != 0]
    for a, b in arcs:
        for c, d in arcs:
            if a < c < b < d:
                return False
    # the root arc spans everything, so no arc may cover the root word
    root = heads.index(0) + 1
    return not any(a < root < b for a, b in arcs)


def load_embeddings(path, expected_dim=None, unk_policy=UNK_MEAN):
    vocab, rows = [], []
    seen = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if lineno == 1 and len(fields) == 2 and all(x.lstrip("-").isdigit() for x in fields):
                dim = int(fields[1])
                continue
            tok, vals = fields[0], fields[1:]
            if dim is None:
                dim = len(vals)
            if len(vals) != dim or dim == 0:
                raise DataError(f"{path}:{lineno}: dimension mismatch, expected {dim} values, got {len(vals)}")
            try:
                row = [float(v) for v in vals]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if tok in seen:
                raise DataError(f"{path}:{lineno}: duplicate token {tok!r} (first on line {seen[tok]})")
            seen[tok] = lineno
            vocab.append(tok)
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no embedding records")
    if expected_dim is not None and dim != expected_dim:
        raise DataError(f"{path}: dimension {dim} differs from expected {expected_dim}")
    return EmbeddingTable(tuple(vocab), np.array(rows), unk_policy)


def save_embeddings(path, tokens, vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tok, row in zip(tokens, vectors):
            f.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().split("\n") if line.strip()]


def load_corpus(tokens_path, embeddings, tags_path=None, heads_path=None):
    token_lines = _read_lines(tokens_path)
    tag_lines = _read_lines(tags_path) if tags_path else None
    head_lines = _read_lines(heads_path) if heads_path else None
    for name, other in (("tags", tag_lines), ("heads", head_lines)):
        if other is not None and len(other) != len(token_lines):
            raise DataError(f"{name} file has {len(other)} sentences, tokens file has {len(token_lines)}")
    sentences = []
    for s, toks in enumerate(token_lines):
        tags = heads = None
        if tag_lines is not None:
            tags = tag_lines[s]
            if len(tags) != len(toks):
                raise DataError(f"sentence {s + 1}: {len(tags)} tags for {len(toks)} tokens")
        if head_lines is not None:
            try:
                heads = [int(h) for h in head_lines[s]]
            except ValueError:
                raise DataError(f"sentence {s + 1}: non-integer head") from None
            if len(heads) != len(toks):
                raise DataError(f"sentence {s + 1}: {len(heads)} heads for {len(toks)} tokens")
        emb = np.stack([embeddings.lookup(t) for t in toks])
        try:
            sentences.append(Sentence(toks, emb, tags, heads))
        except DataError as exc:
            raise DataError(f"sentence {s + 1}: {exc}") from None
    return Corpus(sentences)


def _remap_heads(heads, keep):
    """Re-attach dependents of removed tokens to the nearest kept ancestor."""
    n = len(heads)
    new_index = {}
    for i in range(1, n + 1):
        if keep[i - 1]:
            new_index[i] = len(new_index) + 1
    out = []
    for i in range(1, n + 1):
        if not keep[i - 1]:
            continue
        h = heads[i - 1]
        steps = 0
        while h != 0 and not keep[h - 1]:
            h = heads[h - 1]
            steps += 1
            if steps > n:
                raise DataError("cycle while re-mapping heads")
        out.append(new_index[h] if h else 0)
    roots = [i for i, h in enumerate(out, 1) if h == 0]
    # a removed root can leave several root dependents; the leftmost keeps the root
    for r in roots[1:]:
        out[r - 1] = roots[0]
    return out


def filter_by_length(corpus, max_len, strip_punct=False, punct_set=DEFAULT_PUNCT):
    """Remove punctuation tokens (optionally), then drop sentences longer than ``max_len``."""
    if max_len < 1:
        raise DataError("max_len must be at least 1")
    out = []
    for s in corpus:
        if strip_punct:
            keep = [t not in punct_set for t in s.tokens]
            if not any(keep):
                continue
            if not all(keep):
                idx = [i for i, k in enumerate(keep) if k]
                heads = _remap_heads(s.gold_heads, keep) if s.gold_heads is not None else None
                tags = tuple(s.gold_tags[i] for i in idx) if s.gold_tags is not None else None
                s = Sentence(tuple(s.tokens[i] for i in idx), s.embeddings[idx], tags, heads)
        if len(s) <= max_len:
            out.append(s)
    if not out:
        raise DataError("empty corpus after filtering")
    return Corpus(out, corpus.tag_inventory)


def token_types(corpus):
    """First-occurrence embedding of every distinct token, in corpus order."""
    seen = {}
    for s in corpus:
        for tok, vec in zip(s.tokens, s.embeddings):
            if tok not in seen:
                seen[tok] = vec
    return list(seen), np.array(list(seen.values()))


def export_latent(corpus, flow, path):
    """Write each token type's latent embedding in the embedding-file format."""
    from .flow import inverse_apply

    if corpus is None or len(corpus) == 0:
        raise DataError("empty corpus")
    tokens, x = token_types(corpus)
    e, _ = inverse_apply(flow, x)
    save_embeddings(path, tokens, e)
    return Path(path)


def write_lines(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(" ".join(str(v) for v in row) + "\n")
