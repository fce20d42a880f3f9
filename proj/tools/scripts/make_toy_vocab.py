"""Writes a 64-token byte-level BPE vocab matching the toy model's vocab size.

Tokens: A-Z, space-prefixed A-Z (one merge each), a bare space, and a few
punctuation marks and digits. Only uppercase ASCII text is encodable.

usage: make_toy_vocab.py OUT_DIR
"""
import json
import pathlib
import string
import sys

SPACE = "Ġ"  # byte-level surrogate for ' '


def main(out_dir: str) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    letters = list(string.ascii_uppercase)
    tokens = letters + [SPACE + c for c in letters] + [SPACE] + list(".,!?0123456")
    assert len(tokens) == 64, len(tokens)
    (out / "vocab.json").write_text(json.dumps({t: i for i, t in enumerate(tokens)}, ensure_ascii=False))
    merges = "\n".join(f"{SPACE} {c}" for c in letters)
    (out / "merges.txt").write_text("#version: 0.2\n" + merges + "\n", encoding="utf-8")


if __name__ == "__main__":
    main(sys.argv[1])
