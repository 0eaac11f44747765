"""Regenerates data/sample: five small synthetic scenes and their manifest."""
import json
import pathlib

import numpy as np
from PIL import Image

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "sample"

SCENES = [
    # image_id, background, object colour, object, prompt
    ("balloon", (40, 90, 200), (220, 30, 30), "red balloon", "a flower bouquet"),
    ("apple", (230, 230, 230), (60, 170, 50), "green apple", "an orange"),
    ("car", (120, 120, 120), (240, 220, 20), "yellow car", "a blue bus"),
    ("cup", (150, 90, 40), (250, 250, 250), "white cup", "a black bottle"),
    ("kite", (120, 200, 240), (150, 30, 160), "purple kite", "a green bird"),
]


def scene(bg, fg, seed, size=64):
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = bg
    yy, xx = np.mgrid[0:size, 0:size]
    r = size * 0.22
    blob = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= r * r
    img[blob] = fg
    img += rng.normal(0, 6, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, bg, fg, obj, prompt) in enumerate(SCENES):
        Image.fromarray(scene(bg, fg, i)).save(OUT / f"{name}.png")
        noun = obj.split()[-1]
        entries.append({
            "image_id": name,
            "image": f"{name}.png",
            "target_object": obj,
            "target_prompt": prompt,
            "queries": [
                {"query_id": f"{name}-q1", "text": f"What is in the middle of the picture?", "polarity": "positive"},
                {"query_id": f"{name}-q2", "text": f"What color is the {noun}?", "polarity": "positive"},
                {"query_id": f"{name}-q3", "text": f"Is there a {noun} in the image?", "polarity": "negative"},
            ],
        })
    manifest = {"schema_version": 1, "entries": entries}
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
