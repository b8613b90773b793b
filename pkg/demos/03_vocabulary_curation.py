#!/usr/bin/env python3
"""Filtering a term list down to rare nouns and adjectives.

Counts token frequencies over a small corpus, keeps the terms a general
reader is unlikely to know, and attaches translations.
"""

from mergeforge.vocab import (
    TermEntry,
    attach_translations,
    count_frequencies,
    curate,
    terms_to_csv,
    tokenize,
)

CORPUS = """\
The heart pumps blood through the body. Every heart has four chambers.
A healthy heart rests between beats. The sclera is the white of the eye.
Beta-blockers slow the heart. The doctor examined the patient's eye.
"""

TERMS = [
    TermEntry("sclera", "noun"),
    TermEntry("azygos", "noun"),
    TermEntry("beta-blocker", "noun"),
    TermEntry("heart", "noun"),
    TermEntry("healthy", "adjective"),
    TermEntry("between", "other"),
]

TRANSLATIONS = {"sclera": "強膜", "azygos": "奇静脈", "beta-blocker": "ベータ遮断薬"}


def main() -> None:
    print("tokens of the first line:")
    print(" ", tokenize(CORPUS.splitlines()[0]))

    freq = count_frequencies(CORPUS.splitlines())
    print(f"\ncorpus has {freq.total_tokens} tokens; frequencies of interest:")
    for term in TERMS:
        print(f"  {term.term_en}: {freq.term_freq(term.term_en)}")

    # keep nouns/adjectives a general corpus mentions at most once
    kept = curate(TERMS, freq, max_freq=1)
    print("\nkept after curation:", [t.term_en for t in kept])

    kept, missing = attach_translations(kept, TRANSLATIONS)
    for note in missing:
        print("note:", note)

    print("\ncurated CSV:")
    print(terms_to_csv(kept), end="")


if __name__ == "__main__":
    main()
