#!/usr/bin/env python3
"""Text-prompted segmentation with CLIPSeg (Lueddecke and Ecker 2022).

    clipseg_bridge.py [--weights MODEL] segment IMAGE OBJECT_FILE PROB_OUT

Writes per-pixel sigmoid probabilities at the input resolution.
"""
import os
import sys

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from transformers import CLIPSegForImageSegmentation, CLIPSegProcessor

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import bridge_io as bio  # noqa: E402

DEFAULT = "CIDAS/clipseg-rd64-refined"


def main(argv):
    name = DEFAULT
    if argv and argv[0] == "--weights":
        name, argv = argv[1], argv[2:]
    verb, files = argv[0], argv[1:]
    if verb != "segment":
        print(f"unknown verb {verb}", file=sys.stderr)
        return 2
    x = bio.read_sidecar(files[0])
    h, w = x.shape[:2]
    image = Image.fromarray(np.clip(np.rint(x * 255), 0, 255).astype(np.uint8))
    processor = CLIPSegProcessor.from_pretrained(name)
    model = CLIPSegForImageSegmentation.from_pretrained(name).eval()
    inputs = processor(text=[bio.read_text(files[1])], images=[image], return_tensors="pt")
    with torch.no_grad():
        logits = model(**inputs).logits
    logits = logits.reshape(1, 1, *logits.shape[-2:])
    prob = torch.sigmoid(F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False))[0, 0]
    bio.write_sidecar(files[2], prob.numpy())
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
