#!/usr/bin/env python3
"""CLIP vision/text encoder bridge (Hugging Face transformers).

    clip_bridge.py [--weights MODEL] <verb> <files...>

MODEL is a hub id or local directory, default openai/clip-vit-base-patch32.
Features are the last hidden states after the post layer norm, CLS first.
The model is loaded on every call; keep smoke runs short.
"""
import json
import os
import sys

import numpy as np
import torch
from transformers import CLIPModel, CLIPTokenizer

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import bridge_io as bio  # noqa: E402

DEFAULT = "openai/clip-vit-base-patch32"
MEAN = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
STD = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)


def load(name):
    model = CLIPModel.from_pretrained(name).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def geometry(model):
    vc = model.config.vision_config
    side = vc.image_size
    grid = side // vc.patch_size
    return side, grid, vc.hidden_size, model.config.projection_dim


def features(model, x_hwc):
    pixels = (x_hwc.permute(2, 0, 1).unsqueeze(0) - MEAN) / STD
    hidden = model.vision_model(pixel_values=pixels).last_hidden_state[0]
    hidden = model.vision_model.post_layernorm(hidden)
    return hidden.T  # D x (1 + grid*grid)


def main(argv):
    name = DEFAULT
    if argv and argv[0] == "--weights":
        name, argv = argv[1], argv[2:]
    verb, files = argv[0], argv[1:]
    model = load(name)
    side, grid, dim, latent = geometry(model)

    if verb == "info":
        with open(files[0], "w") as f:
            json.dump({"input": [side, side, 3], "grid": [grid, grid], "feature_dim": dim, "latent_dim": latent}, f)
    elif verb == "forward":
        x = torch.from_numpy(bio.read_sidecar(files[0])).float()
        with torch.no_grad():
            f = features(model, x)
        bio.write_features(files[1], f.numpy(), grid, grid)
    elif verb == "backward":
        x = torch.from_numpy(bio.read_sidecar(files[0])).float().requires_grad_(True)
        g, _, _ = bio.read_features(files[1], True)
        (features(model, x) * torch.from_numpy(g).float()).sum().backward()
        bio.write_sidecar(files[2], x.grad.numpy())
    elif verb == "text":
        tok = CLIPTokenizer.from_pretrained(name)
        inputs = tok([bio.read_text(files[0])], padding=True, return_tensors="pt")
        with torch.no_grad():
            z = model.get_text_features(**inputs)[0]
        bio.write_vector(files[1], z.numpy())
    elif verb == "projection":
        w = model.visual_projection.weight.detach().numpy()  # latent x D
        bio.write_features(files[0], w, 1, w.shape[1])
    else:
        print(f"unknown verb {verb}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
