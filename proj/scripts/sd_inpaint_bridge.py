#!/usr/bin/env python3
"""Prompt-conditioned inpainting with Stable Diffusion (needs `pip install diffusers`).

    sd_inpaint_bridge.py [--weights MODEL] inpaint IMAGE MASK PROMPT_FILE IMAGE_OUT

MASK is 1 on the background and 0 on the region to repaint. The output is
composited back onto the input so the background is kept up to resampling.
Set SD_STEPS and SD_SEED to change the sampler settings (defaults 30, 0).
"""
import os
import sys

import numpy as np
import torch
from PIL import Image

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import bridge_io as bio  # noqa: E402

DEFAULT = "stabilityai/stable-diffusion-2-inpainting"


def to_pil(a):
    return Image.fromarray(np.clip(np.rint(a * 255), 0, 255).astype(np.uint8))


def main(argv):
    name = DEFAULT
    if argv and argv[0] == "--weights":
        name, argv = argv[1], argv[2:]
    verb, files = argv[0], argv[1:]
    if verb != "inpaint":
        print(f"unknown verb {verb}", file=sys.stderr)
        return 2
    from diffusers import StableDiffusionInpaintPipeline

    x = bio.read_sidecar(files[0])
    m = bio.read_sidecar(files[1])[:, :, 0]
    h, w = m.shape
    pipe = StableDiffusionInpaintPipeline.from_pretrained(name, torch_dtype=torch.float32)
    generator = torch.Generator().manual_seed(int(os.environ.get("SD_SEED", "0")))
    out = pipe(
        prompt=bio.read_text(files[2]),
        image=to_pil(x).resize((512, 512)),
        mask_image=to_pil(1.0 - m).resize((512, 512)),
        num_inference_steps=int(os.environ.get("SD_STEPS", "30")),
        generator=generator,
    ).images[0]
    filled = np.asarray(out.resize((w, h), Image.BICUBIC), dtype=np.float64) / 255.0
    keep = m[:, :, None]
    bio.write_sidecar(files[3], keep * x + (1.0 - keep) * filled[:, :, : x.shape[2]])
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
