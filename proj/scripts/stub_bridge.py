#!/usr/bin/env python3
"""Tiny bridge used by the tests: every verb, no model weights.

Encoder: per-patch channel means (CLS = mean of patches) on a 16x16x3 input
with a 4x4 grid, identity projection, bag-of-letters text latent.
Segmenter: probability 1 inside the centred half-size box.
Inpainter: paints the masked region with a prompt-dependent colour.
Embed: 26-dim letter histogram.

Set STUB_BRIDGE_FAIL=<verb> to make that verb exit with status 3.
"""
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import bridge_io as bio  # noqa: E402

H = W = 16
C = 3
G = 4


def letters(text):
    v = np.zeros(26)
    for ch in text.lower():
        if "a" <= ch <= "z":
            v[ord(ch) - 97] += 1
    return v


def forward(x):
    p = H // G
    patches = x.reshape(G, p, G, p, C).mean(axis=(1, 3)).reshape(G * G, C).T
    return np.concatenate([patches.mean(axis=1, keepdims=True), patches], axis=1)


def main(argv):
    if argv and argv[0] == "--weights":
        argv = argv[2:]
    verb, files = argv[0], argv[1:]
    if os.environ.get("STUB_BRIDGE_FAIL") == verb:
        print(f"stub bridge: {verb} failed on purpose", file=sys.stderr)
        return 3
    if verb == "info":
        json.dump({"input": [H, W, C], "grid": [G, G], "feature_dim": C, "latent_dim": C}, open(files[0], "w"))
    elif verb == "forward":
        bio.write_features(files[1], forward(bio.read_sidecar(files[0])), G, G)
    elif verb == "backward":
        grad, _, _ = bio.read_features(files[1], True)
        p = H // G
        cls = grad[:, :1] / (G * G)
        per_patch = (grad[:, 1:] + cls) / (p * p)  # C x patches
        g = per_patch.T.reshape(G, 1, G, 1, C)
        bio.write_sidecar(files[2], np.broadcast_to(g, (G, p, G, p, C)).reshape(H, W, C))
    elif verb == "text":
        v = letters(bio.read_text(files[0]))[:C] + 1.0
        bio.write_vector(files[1], v / np.linalg.norm(v))
    elif verb == "projection":
        bio.write_features(files[0], np.eye(C), 1, C)
    elif verb == "segment":
        x = bio.read_sidecar(files[0])
        h, w = x.shape[:2]
        prob = np.zeros((h, w))
        prob[h // 4: h - h // 4, w // 4: w - w // 4] = 1.0
        bio.write_sidecar(files[2], prob)
    elif verb == "inpaint":
        x = bio.read_sidecar(files[0])
        m = bio.read_sidecar(files[1])[:, :, :1]
        v = letters(bio.read_text(files[2]))
        color = (np.array([v[0::3].sum(), v[1::3].sum(), v[2::3].sum()]) % 5) / 4.0
        bio.write_sidecar(files[3], m * x + (1 - m) * color[: x.shape[2]])
    elif verb == "embed":
        bio.write_vector(files[1], letters(bio.read_text(files[0])))
    else:
        print(f"unknown verb {verb}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
