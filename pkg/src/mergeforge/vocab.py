"""Rare-term curation: corpus frequency counting and noun/adjective filtering.

Tokenization rule (fixed, because it decides which terms survive): a
token is a maximal run of Unicode letters, optionally joined by single
internal hyphens ("beta-blocker" is one token, "x--y" is two), and is
lowercased. A multiword term's corpus frequency is the maximum over its
constituent tokens' frequencies, the strictest reading of "rare".

Part-of-speech tags are consumed from the input file, never computed.
Term files are UTF-8 CSV with header `term_en,pos` or
`term_en,pos,term_ja`; curated output is CSV with header
`term_en,term_ja,pos,corpus_freq`.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

__all__ = [
    "POS_VALUES",
    "KEPT_POS",
    "VocabError",
    "TermEntry",
    "FreqMap",
    "tokenize",
    "count_frequencies",
    "count_corpus_file",
    "curate",
    "attach_translations",
    "read_terms_csv",
    "write_terms_csv",
]

POS_VALUES = ("noun", "adjective", "other")
KEPT_POS = ("noun", "adjective")

# A letter run is any Unicode letter sequence: \w minus digits and underscore.
_TOKEN_RE = re.compile(r"[^\W\d_]+(?:-[^\W\d_]+)*")


class VocabError(ValueError):
    """Malformed term file or corpus (bad header, bad tag, bad UTF-8)."""


@dataclass(frozen=True)
class TermEntry:
    term_en: str
    pos: str
    term_ja: str = ""
    corpus_freq: int = 0

    def __post_init__(self) -> None:
        if not self.term_en:
            raise VocabError("term_en must be non-empty")
        if self.pos not in POS_VALUES:
            raise VocabError(
                f"pos {self.pos!r} for {self.term_en!r} not one of {', '.join(POS_VALUES)}"
            )
        if self.corpus_freq < 0:
            raise VocabError(f"corpus_freq must be non-negative, got {self.corpus_freq}")


@dataclass
class FreqMap:
    counts: dict[str, int] = field(default_factory=dict)
    total_tokens: int = 0

    def term_freq(self, term: str) -> int:
        """Max frequency over the term's constituent tokens; 0 if none occur."""
        return max((self.counts.get(tok, 0) for tok in tokenize(term)), default=0)


def tokenize(text: str) -> list[str]:
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


def count_frequencies(lines: Iterable[str]) -> FreqMap:
    """Exact token counts over a text stream (any iterable of strings)."""
    fm = FreqMap()
    for line in lines:
        for tok in tokenize(line):
            fm.counts[tok] = fm.counts.get(tok, 0) + 1
            fm.total_tokens += 1
    return fm


def count_corpus_file(path: str) -> FreqMap:
    try:
        with open(path, "r", encoding="utf-8", errors="strict") as f:
            return count_frequencies(f)
    except UnicodeDecodeError as e:
        raise VocabError(f"corpus {path!r} is not valid UTF-8 ({e})") from None


def curate(
    terms: Sequence[TermEntry], freq: FreqMap, max_freq: int = 1
) -> list[TermEntry]:
    """Keep rare nouns and adjectives, in input order, with corpus_freq filled in.

    A term survives when its corpus frequency is at most max_freq and its
    tag is noun or adjective. Filtering is idempotent.
    """
    if max_freq < 0:
        raise VocabError(f"max_freq must be non-negative, got {max_freq}")
    out = []
    for term in terms:
        f = freq.term_freq(term.term_en)
        if term.pos in KEPT_POS and f <= max_freq:
            out.append(replace(term, corpus_freq=f))
    return out


def attach_translations(
    terms: Sequence[TermEntry], translations: Mapping[str, str]
) -> tuple[list[TermEntry], list[str]]:
    """Fill term_ja from the map; terms without one are flagged, not dropped."""
    out = []
    diagnostics = []
    for term in terms:
        ja = translations.get(term.term_en)
        if ja:
            out.append(replace(term, term_ja=ja))
        else:
            diagnostics.append(f"no translation for {term.term_en!r}")
            out.append(term)
    return out, diagnostics


_IN_HEADERS = (["term_en", "pos"], ["term_en", "pos", "term_ja"])
_OUT_HEADER = ["term_en", "term_ja", "pos", "corpus_freq"]


def read_terms_csv(path: str) -> list[TermEntry]:
    """Input term list; also accepts previously curated output files."""
    try:
        with open(path, "r", encoding="utf-8", errors="strict", newline="") as f:
            rows = list(csv.reader(f))
    except UnicodeDecodeError as e:
        raise VocabError(f"term file {path!r} is not valid UTF-8 ({e})") from None
    if not rows:
        raise VocabError(f"term file {path!r} is empty (header required)")
    header, body = rows[0], rows[1:]
    if header in _IN_HEADERS:
        fields = header
    elif header == _OUT_HEADER:
        fields = header
    else:
        raise VocabError(
            f"term file {path!r}: header must be term_en,pos[,term_ja], got {','.join(header)}"
        )
    terms = []
    for lineno, row in enumerate(body, start=2):
        if not row:
            continue
        if len(row) != len(fields):
            raise VocabError(
                f"term file {path!r} line {lineno}: {len(row)} columns, expected {len(fields)}"
            )
        rec = dict(zip(fields, row))
        try:
            terms.append(
                TermEntry(
                    term_en=rec["term_en"],
                    pos=rec["pos"],
                    term_ja=rec.get("term_ja", ""),
                    corpus_freq=int(rec.get("corpus_freq", 0)),
                )
            )
        except VocabError as e:
            raise VocabError(f"term file {path!r} line {lineno}: {e}") from None
        except ValueError:
            raise VocabError(
                f"term file {path!r} line {lineno}: corpus_freq must be an integer"
            ) from None
    return terms


def terms_to_csv(terms: Sequence[TermEntry]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_OUT_HEADER)
    for t in terms:
        writer.writerow([t.term_en, t.term_ja, t.pos, t.corpus_freq])
    return buf.getvalue()


def write_terms_csv(terms: Sequence[TermEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(terms_to_csv(terms))
