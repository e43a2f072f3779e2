#!/usr/bin/env python3
"""Regenerates the bundled transliteration and emoji tables.

Requires the `unidecode` and `emoji` packages. Output is deterministic for a
given package version; the checked-in tables were produced with
unidecode 1.3 and emoji 2.x.
"""
import pathlib
import re
import sys
import unicodedata

from unidecode import unidecode
import emoji

ROOT = pathlib.Path(__file__).resolve().parent.parent


def devanagari():
    rows, oracle = [], []
    for cp in range(0x0900, 0x0980):
        raw = unidecode(chr(cp))
        oracle.append(f"{cp:04X}\t{raw}")
        # lowercase so the table output is stable under the pipeline's
        # lowercase stage; empty rows keep the table total over the block
        rows.append(f"{cp:04X}\t{raw.lower()}")
    header = ["# codepoint(hex)\treplacement",
              "# an empty replacement drops the codepoint; absent codepoints are also dropped but counted as unmapped"]
    (ROOT / "data" / "devanagari.tsv").write_text("\n".join(header + rows) + "\n", encoding="utf-8")
    (ROOT / "tests" / "fixtures" / "unidecode_devanagari.tsv").write_text(
        "\n".join(oracle) + "\n", encoding="utf-8")


def normalize_name(name):
    name = unicodedata.normalize("NFKD", name)
    name = "".join(c for c in name if not unicodedata.combining(c))
    return re.sub(r"[^a-z0-9]", "", name.lower())


def emojis():
    rows = []
    for seq, data in sorted(emoji.EMOJI_DATA.items()):
        name = normalize_name(data["en"])
        if name:
            rows.append(f"{seq}\t{name}")
    header = ["# emoji sequence\tname (lowercase, separators removed)"]
    (ROOT / "data" / "emoji.tsv").write_text("\n".join(header + rows) + "\n", encoding="utf-8")


if __name__ == "__main__":
    devanagari()
    emojis()
    sys.exit(0)
