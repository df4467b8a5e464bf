"""Corpus ingestion: line records, a rule-based tokenizer, and vocabulary.

Corpora are JSON-lines files, one record per line with fields
{id, text, label?, context}. The toy path tokenizes by lowercased
word/punctuation splitting over an explicit vocabulary whose first four ids
are reserved special tokens; external backends bring their own tokenizer.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, InvalidInputError
from .oracle.toy import N_SPECIALS, UNK_ID
from .types import TokenSequence

SPECIAL_TOKENS = ("<mask>", "<unk>", "<eos>", "<rare>")
SENTENCE_ENDERS = {".", "!", "?"}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CorpusRecord:
    """One input: stable id, raw text, tokens, optional label, task tag."""

    record_id: str
    text: str
    tokens: TokenSequence
    label: int | None = None
    context: str = "classification"


class WhitespaceTokenizer:
    """Vocabulary-backed tokenizer for the toy path."""

    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[:N_SPECIALS]) != SPECIAL_TOKENS:
            raise ConfigError(f"vocabulary must begin with the special tokens {SPECIAL_TOKENS}")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ConfigError("vocabulary contains duplicate tokens")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "WhitespaceTokenizer":
        """Deterministic vocabulary: specials, then tokens by (-count, token)."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in split_text(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - N_SPECIALS)]
        return cls(list(SPECIAL_TOKENS) + ordered)

    def encode(self, text: str) -> TokenSequence:
        ids = [self.index.get(tok, UNK_ID) for tok in split_text(text)]
        if not ids:
            raise InvalidInputError(f"text tokenized to nothing: {text!r}")
        return TokenSequence.of(ids)

    def decode(self, seq: TokenSequence) -> str:
        return " ".join(self.vocab[t] if t < self.vocab_size else "<unk>" for t in seq.tokens)

    def sentence_boundaries(self, seq: TokenSequence) -> list[int]:
        """Exclusive end indices after sentence-final punctuation."""
        enders = {self.index[e] for e in SENTENCE_ENDERS if e in self.index}
        bounds = [i + 1 for i, tok in enumerate(seq.tokens) if tok in enders and i + 1 < seq.n]
        return bounds

    def to_json(self) -> str:
        return json.dumps({"vocab": self.vocab})

    @classmethod
    def from_json(cls, payload: str) -> "WhitespaceTokenizer":
        return cls(json.loads(payload)["vocab"])

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WhitespaceTokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def ingest_corpus(
    path: str | Path, tokenizer: WhitespaceTokenizer | None = None, max_vocab: int | None = None
) -> tuple[list[CorpusRecord], WhitespaceTokenizer]:
    """Read a JSONL corpus; builds a vocabulary when none is supplied.

    Malformed lines are reported with their line numbers; duplicate ids and
    unreadable files are data errors, an empty corpus is a config error.
    """
    path = Path(path)
    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc

    rows: list[dict] = []
    problems: list[str] = []
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(row, dict) or "id" not in row or "text" not in row:
            problems.append(f"line {lineno}: record must carry 'id' and 'text'")
            continue
        rows.append(row)
    if problems:
        raise DataError("malformed corpus records: " + "; ".join(problems))
    if not rows:
        raise ConfigError(f"corpus file {path} contains no records")

    seen: set[str] = set()
    for row in rows:
        rid = str(row["id"])
        if rid in seen:
            raise DataError(f"duplicate record id {rid!r}")
        seen.add(rid)

    if tokenizer is None:
        tokenizer = WhitespaceTokenizer.build((r["text"] for r in rows), max_size=max_vocab)

    records = [
        CorpusRecord(
            record_id=str(row["id"]),
            text=row["text"],
            tokens=tokenizer.encode(row["text"]),
            label=int(row["label"]) if row.get("label") is not None else None,
            context=str(row.get("context", "classification")),
        )
        for row in rows
    ]
    return records, tokenizer


def write_corpus(path: str | Path, records: Sequence[CorpusRecord]):
    lines = []
    for rec in records:
        row = {"id": rec.record_id, "text": rec.text, "context": rec.context}
        if rec.label is not None:
            row["label"] = rec.label
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
