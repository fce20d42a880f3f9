#!/usr/bin/env python3
"""Regenerates src/unicode_tables.inc, the code point classes used by the
GPT-2 pre-tokenizer (\\p{L}, \\p{N}, \\s as understood by the `regex` module)."""

import sys

import regex

CLASSES = {
    "kLetterRanges": regex.compile(r"\p{L}"),
    "kNumberRanges": regex.compile(r"\p{N}"),
    "kSpaceRanges": regex.compile(r"\s"),
}


def ranges_for(pattern):
    out = []
    start = None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            hit = False
        else:
            hit = pattern.match(chr(cp)) is not None
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def main(path):
    lines = [
        "// Generated by tools/scripts/gen_unicode_tables.py; do not edit.",
        f"// regex module {regex.__version__}",
        "",
    ]
    for name, pattern in CLASSES.items():
        rs = ranges_for(pattern)
        lines.append(f"constexpr CodepointRange {name}[] = {{")
        for a, b in rs:
            lines.append(f"    {{0x{a:X}, 0x{b:X}}},")
        lines.append("};")
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/unicode_tables.inc")
