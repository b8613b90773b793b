"""Definition generation and LLM-as-judge scoring over chat endpoints.

The wire format is the common chat-completions shape: POST
{base_url}/chat/completions with body {"model", "messages", "max_tokens",
"temperature"}, bearer token from the MERGEFORGE_API_KEY environment
variable, answer text at choices[0].message.content. Transport failures
and non-2xx responses are retried three times with 1s/2s/4s backoff.

Prompt templates are frozen verbatim; reproducibility depends on them:

* definition (en): Define the medical term '{term_en}'. Provide a
  concise, accurate definition.
* definition (ja): 医学用語「{term_ja}」の定義を簡潔かつ正確に日本語で説明してください。
* judge: both term forms, the reference labeled "Reference definition
  (English expert):", the candidate definition, and the instruction
  "Respond with 'Score: N' where N is an integer from 0 to 10."

Per-term failures never abort a batch: failed definitions carry an empty
definition and an error note; judge outputs that still do not parse
after three re-asks are returned separately as invalid records.
"""

from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import requests

from .vocab import TermEntry

__all__ = [
    "API_KEY_ENV",
    "DEFINITION_PROMPT_EN",
    "DEFINITION_PROMPT_JA",
    "JUDGE_PROMPT",
    "HarnessError",
    "EndpointError",
    "ScoreParseError",
    "EndpointConfig",
    "DefinitionRecord",
    "ScoreRecord",
    "chat",
    "generate_definitions",
    "judge_definitions",
    "parse_score",
    "write_jsonl",
    "read_definitions_jsonl",
    "read_scores_jsonl",
]

API_KEY_ENV = "MERGEFORGE_API_KEY"

DEFINITION_PROMPT_EN = (
    "Define the medical term '{term_en}'. Provide a concise, accurate definition."
)
DEFINITION_PROMPT_JA = "医学用語「{term_ja}」の定義を簡潔かつ正確に日本語で説明してください。"
JUDGE_PROMPT = (
    "You are grading a candidate definition of a medical term.\n"
    "Term (English): {term_en}\n"
    "Term (Japanese): {term_ja}\n"
    "Reference definition (English expert): {reference}\n"
    "Candidate definition: {candidate}\n"
    "Respond with 'Score: N' where N is an integer from 0 to 10."
)

_BACKOFF_SECONDS = (1.0, 2.0, 4.0)
_JUDGE_ASKS = 4  # one ask plus three re-asks when the reply does not parse


class HarnessError(ValueError):
    """Caller contract violation (missing translations, missing references)."""


class EndpointError(RuntimeError):
    """Endpoint still failing after all retries."""


class ScoreParseError(ValueError):
    """No in-range integer score in the judge's reply."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key: str = ""
    max_tokens: int = 256
    temperature: float = 0.0
    concurrency_limit: int = 4
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise HarnessError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise HarnessError(f"temperature must be >= 0, got {self.temperature}")
        if self.concurrency_limit < 1:
            raise HarnessError(f"concurrency_limit must be >= 1, got {self.concurrency_limit}")

    @classmethod
    def from_env(cls, base_url: str, model_name: str, **kwargs) -> "EndpointConfig":
        """Build a config with the API key taken from the environment."""
        return cls(base_url, model_name, api_key=os.environ.get(API_KEY_ENV, ""), **kwargs)


@dataclass(frozen=True)
class DefinitionRecord:
    term_en: str
    term_ja: str
    model_id: str
    language: str
    definition: str
    is_reference: bool
    error: str = ""


@dataclass(frozen=True)
class ScoreRecord:
    term_en: str
    model_id: str
    judge_id: str
    score: int
    raw_judge_output: str

    def __post_init__(self) -> None:
        if not 0 <= self.score <= 10:
            raise HarnessError(f"score {self.score} outside [0, 10]")


def chat(
    endpoint: EndpointConfig,
    prompt: str,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One chat completion with retries; raises EndpointError when exhausted."""
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    body = {
        "model": endpoint.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": endpoint.max_tokens,
        "temperature": endpoint.temperature,
    }
    headers = {"Content-Type": "application/json"}
    if endpoint.api_key:
        headers["Authorization"] = f"Bearer {endpoint.api_key}"
    last = ""
    for attempt in range(1 + len(_BACKOFF_SECONDS)):
        if attempt:
            sleep(_BACKOFF_SECONDS[attempt - 1])
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=endpoint.timeout)
        except requests.RequestException as e:
            last = f"request failed: {e}"
            continue
        if resp.status_code // 100 != 2:
            last = f"HTTP {resp.status_code}: {resp.text[:200]}"
            continue
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            last = f"malformed response body: {e}"
            continue
        if not isinstance(content, str):
            last = f"message content is {type(content).__name__}, expected string"
            continue
        return content
    raise EndpointError(f"{url}: {last}")


def _ordered(items: Sequence, worker: Callable, limit: int) -> list:
    """Run worker over items, at most `limit` in flight, results in input order."""
    if limit <= 1 or len(items) <= 1:
        return [worker(item) for item in items]
    with ThreadPoolExecutor(max_workers=limit) as pool:
        return list(pool.map(worker, items))


def generate_definitions(
    endpoint: EndpointConfig,
    terms: Sequence[TermEntry],
    language: str,
    is_reference: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> list[DefinitionRecord]:
    """One definition per term, in term order; failures noted per record."""
    if language not in ("en", "ja"):
        raise HarnessError(f"language {language!r} must be 'en' or 'ja'")
    if is_reference and language != "en":
        raise HarnessError("reference definitions are always generated in English")
    if language == "ja":
        missing = [t.term_en for t in terms if not t.term_ja]
        if missing:
            raise HarnessError(f"terms lack Japanese forms: {', '.join(missing[:5])}")

    def one(term: TermEntry) -> DefinitionRecord:
        if language == "en":
            prompt = DEFINITION_PROMPT_EN.format(term_en=term.term_en)
        else:
            prompt = DEFINITION_PROMPT_JA.format(term_ja=term.term_ja)
        try:
            definition = chat(endpoint, prompt, sleep=sleep)
            error = ""
        except EndpointError as e:
            definition, error = "", str(e)
        return DefinitionRecord(
            term_en=term.term_en,
            term_ja=term.term_ja,
            model_id=endpoint.model_name,
            language=language,
            definition=definition,
            is_reference=is_reference,
            error=error,
        )

    return _ordered(terms, one, endpoint.concurrency_limit)


def judge_definitions(
    judge: EndpointConfig,
    candidates: Sequence[DefinitionRecord],
    references: Mapping[str, DefinitionRecord],
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[ScoreRecord], list[dict]]:
    """Score each candidate against its reference.

    Returns (valid score records, invalid records). A candidate lands in
    the invalid list when the judge endpoint fails outright or its reply
    has no parseable score after three re-asks; invalid entries are plain
    dicts with an `error` note and are excluded from statistics.
    """
    missing = [c.term_en for c in candidates if c.term_en not in references]
    if missing:
        raise HarnessError(f"candidates lack references: {', '.join(missing[:5])}")

    def one(cand: DefinitionRecord) -> tuple[ScoreRecord | None, dict | None]:
        prompt = JUDGE_PROMPT.format(
            term_en=cand.term_en,
            term_ja=cand.term_ja,
            reference=references[cand.term_en].definition,
            candidate=cand.definition,
        )
        raw = ""
        error = ""
        for _ in range(_JUDGE_ASKS):
            try:
                raw = chat(judge, prompt, sleep=sleep)
            except EndpointError as e:
                return None, _invalid(cand, judge, raw="", error=str(e))
            try:
                score = parse_score(raw)
            except ScoreParseError as e:
                error = str(e)
                continue
            record = ScoreRecord(
                term_en=cand.term_en,
                model_id=cand.model_id,
                judge_id=judge.model_name,
                score=score,
                raw_judge_output=raw,
            )
            return record, None
        return None, _invalid(cand, judge, raw=raw, error=error)

    valid: list[ScoreRecord] = []
    invalid: list[dict] = []
    for record, bad in _ordered(candidates, one, judge.concurrency_limit):
        if record is not None:
            valid.append(record)
        else:
            invalid.append(bad)
    return valid, invalid


def _invalid(cand: DefinitionRecord, judge: EndpointConfig, raw: str, error: str) -> dict:
    return {
        "term_en": cand.term_en,
        "model_id": cand.model_id,
        "judge_id": judge.model_name,
        "raw_judge_output": raw,
        "error": error,
    }


# Integers embedded in decimals are not scores: no digit or digit-dot
# before, no optional-dot digit after ("9.5" offers no candidates).
_INT_RE = re.compile(r"(?<!\d)(?<!\d\.)\d+(?!\.?\d)")
_SCORE_PREFIX_RE = re.compile(r"score\s*:\s*(\d+)(?!\.?\d)", re.IGNORECASE)


def _is_scale_denominator(text: str, start: int) -> bool:
    prefix = text[:start].rstrip()
    return prefix.endswith("/") or prefix.lower().endswith("out of")


def parse_score(raw: str) -> int:
    """Last integer in [0, 10], preferring 'Score:'-prefixed ones.

    Integers that merely name the scale ("... out of 10", "9/10") are
    not candidates. No candidate at all raises ScoreParseError.
    """
    prefixed = [
        int(m.group(1))
        for m in _SCORE_PREFIX_RE.finditer(raw)
        if 0 <= int(m.group(1)) <= 10
    ]
    if prefixed:
        return prefixed[-1]
    plain = [
        int(m.group(0))
        for m in _INT_RE.finditer(raw)
        if 0 <= int(m.group(0)) <= 10 and not _is_scale_denominator(raw, m.start())
    ]
    if plain:
        return plain[-1]
    raise ScoreParseError(f"no integer score in [0, 10] found in {raw!r}")


# ---------------------------------------------------------------------------
# JSON-lines persistence (fixed key order, one record per line)

_DEFINITION_KEYS = ("term_en", "term_ja", "model_id", "language", "definition", "is_reference", "error")
_SCORE_KEYS = ("term_en", "model_id", "judge_id", "score", "raw_judge_output")


def write_jsonl(records: Sequence[DefinitionRecord | ScoreRecord | dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            if isinstance(rec, DefinitionRecord):
                keys, src = _DEFINITION_KEYS, rec.__dict__
            elif isinstance(rec, ScoreRecord):
                keys, src = _SCORE_KEYS, rec.__dict__
            else:
                keys, src = tuple(rec.keys()), rec
            f.write(json.dumps({k: src[k] for k in keys}, ensure_ascii=False) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise HarnessError(f"{path} line {lineno}: invalid JSON ({e})") from None
            if not isinstance(obj, dict):
                raise HarnessError(f"{path} line {lineno}: expected an object")
            out.append(obj)
    return out


def read_definitions_jsonl(path: str) -> list[DefinitionRecord]:
    records = []
    for lineno, obj in enumerate(_read_jsonl(path), start=1):
        try:
            records.append(DefinitionRecord(**obj))
        except TypeError as e:
            raise HarnessError(f"{path} record {lineno}: {e}") from None
    return records


def read_scores_jsonl(path: str) -> list[ScoreRecord]:
    records = []
    for lineno, obj in enumerate(_read_jsonl(path), start=1):
        try:
            records.append(ScoreRecord(**obj))
        except (TypeError, HarnessError) as e:
            raise HarnessError(f"{path} record {lineno}: {e}") from None
    return records
