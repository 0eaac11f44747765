#!/usr/bin/env python3
"""Sentence embeddings for the embedding-similarity metric (sentence-transformers).

    embed_bridge.py [--weights MODEL] embed TEXT_FILE VECTOR_OUT
"""
import os
import sys

from sentence_transformers import SentenceTransformer

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import bridge_io as bio  # noqa: E402

DEFAULT = "sentence-transformers/all-MiniLM-L6-v2"


def main(argv):
    name = DEFAULT
    if argv and argv[0] == "--weights":
        name, argv = argv[1], argv[2:]
    verb, files = argv[0], argv[1:]
    if verb != "embed":
        print(f"unknown verb {verb}", file=sys.stderr)
        return 2
    v = SentenceTransformer(name).encode([bio.read_text(files[0])])[0]
    bio.write_vector(files[1], v)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
