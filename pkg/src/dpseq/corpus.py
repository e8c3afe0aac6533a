"""Parallel-corpus ingestion, vocabulary, encoding, and synthetic tasks.

One ParallelPair is one privacy unit: loading preserves order and never
deduplicates, so record-level guarantees attach to exactly the file rows.
Tokenization is whitespace-only; there is deliberately no subword model.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from dpseq.rng import stream_rng

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    """Malformed corpus file or encoding request."""


@dataclass(frozen=True)
class ParallelPair:
    source: str
    target: str

    def __post_init__(self):
        if not self.source.strip() or not self.target.strip():
            raise CorpusError("source and target must be non-empty after trimming")


@dataclass
class DatasetSplit:
    pairs: list[ParallelPair]
    name: str = "train"

    @property
    def n(self) -> int:
        return len(self.pairs)


@dataclass
class Vocab:
    """token <-> id map with fixed reserved ids 0..3 (PAD, BOS, EOS, UNK)."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocab":
        id_to_token = list(RESERVED) + list(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")
        return cls(token_to_id, id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def tokenize(text: str) -> list[str]:
    return text.split()


def load_parallel(path: str, format: str) -> DatasetSplit:
    """Order-preserving load of a jsonl or tsv parallel corpus."""
    if format not in ("jsonl", "tsv"):
        raise CorpusError(f"unknown format {format!r}; expected jsonl or tsv")
    pairs = []
    bad: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                if format == "jsonl":
                    rec = json.loads(line)
                    if not isinstance(rec, dict) or "source" not in rec or "target" not in rec:
                        raise CorpusError('missing "source"/"target" key')
                    pair = ParallelPair(str(rec["source"]), str(rec["target"]))
                else:
                    cols = line.split("\t")
                    if len(cols) != 2:
                        raise CorpusError(f"expected 2 tab-separated columns, got {len(cols)}")
                    pair = ParallelPair(cols[0], cols[1])
            except (json.JSONDecodeError, CorpusError) as exc:
                if len(bad) < 10:
                    bad.append(f"line {lineno}: {exc}")
                continue
            pairs.append(pair)
    if bad:
        raise CorpusError(f"{path}: malformed lines:\n" + "\n".join(bad))
    if not pairs:
        raise CorpusError(f"{path}: no parallel pairs found")
    return DatasetSplit(pairs)


def build_vocab(split: DatasetSplit, max_size: int) -> Vocab:
    """Most frequent max_size-4 whitespace tokens; ties break lexicographically."""
    if split.n == 0:
        raise CorpusError("cannot build a vocabulary from an empty split")
    if max_size < len(RESERVED):
        raise CorpusError(f"max_size must be at least {len(RESERVED)}")
    counts: Counter[str] = Counter()
    for pair in split.pairs:
        counts.update(tokenize(pair.source))
        counts.update(tokenize(pair.target))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab.from_tokens(kept)


def encode_text(text: str, vocab: Vocab, max_seq_len: int) -> list[int]:
    """BOS + token ids + EOS, truncated so EOS stays the final id."""
    if max_seq_len < 2:
        raise CorpusError("max_seq_len below 2 leaves no room for BOS and EOS")
    ids = [BOS_ID] + [vocab.lookup(tok) for tok in tokenize(text)] + [EOS_ID]
    if len(ids) > max_seq_len:
        ids = ids[: max_seq_len - 1] + [EOS_ID]
    return ids


def encode_pair(pair: ParallelPair, vocab: Vocab, max_seq_len: int) -> tuple[list[int], list[int]]:
    return (
        encode_text(pair.source, vocab, max_seq_len),
        encode_text(pair.target, vocab, max_seq_len),
    )


def decode_ids(ids, vocab: Vocab) -> str:
    """Whitespace-joined tokens with reserved ids stripped."""
    return " ".join(vocab.id_to_token[i] for i in ids if i >= len(RESERVED))


def synth_reversal(n_pairs: int, vocab_tokens: int, len_range: tuple[int, int], seed: int) -> DatasetSplit:
    """Synthetic task: target is the token-reversed source."""
    if n_pairs <= 0:
        raise CorpusError("n_pairs must be positive")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise CorpusError(f"bad length range {len_range}")
    tokens = [f"w{i:02d}" for i in range(vocab_tokens)]
    rng = stream_rng(seed, "synth")
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(lo, hi + 1))
        seq = [tokens[int(rng.integers(0, vocab_tokens))] for _ in range(length)]
        pairs.append(ParallelPair(" ".join(seq), " ".join(reversed(seq))))
    return DatasetSplit(pairs)
