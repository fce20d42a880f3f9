#!/usr/bin/env python3
"""Freezes reference GPT-2 encodings for tests/data/tokenizer_reference.json.

Uses the Hugging Face slow GPT2Tokenizer on the vocab/merges files in
tests/data/gpt2, so the C++ tokenizer is checked against an implementation
that shares nothing with it but the asset files."""

import json
import sys

from transformers import GPT2Tokenizer

SAMPLES = [
    "",
    "Hello world",
    "The capital of France is",
    "Hello  world",
    "Hello   world   ",
    "  leading spaces",
    "trailing newline\n",
    "tabs\tand\nnewlines\r\n\r\nmixed",
    "I'm sure they'll say we've done what's right, isn't it? You'd think so.",
    "I'M SHOUTING 'S 'T",
    "Numbers: 12345 3.14159 1,000,000 and 2024-10-19",
    "Punctuation!!! ??? ... --- ((nested)) [brackets] {braces}",
    "running jumping swimming ring rig thing",
    "café naïve résumé façade",
    "Ελληνικά και Русский текст",
    "日本語のテキストと中文",
    "emoji 🙂🚀 and symbols ©®™ ∑∫√",
    "mixed123letters and letters123",
    "   \n\n   ",
    "a",
    " ",
    "\n",
    "supercalifragilisticexpialidocious antidisestablishmentarianism",
    "def foo(x):\n    return x * 2  # comment\n",
    "URL: https://example.com/path?query=1&b=2",
    "e-mail: someone@example.org",
    "Zero​width and non breaking",
    "combining é accents",
    "shenanigans refurbishments parfaitement circumnavigate",
    "The quick brown fox jumps over the lazy dog.",
]


def main(asset_dir, out_path):
    tok = GPT2Tokenizer(f"{asset_dir}/vocab.json", f"{asset_dir}/merges.txt")
    cases = []
    for s in SAMPLES:
        ids = tok.encode(s)
        assert tok.decode(ids) == s, s
        cases.append({"text": s, "ids": ids})
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump({"cases": cases}, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
