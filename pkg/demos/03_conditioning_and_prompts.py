"""Point maps, prompt templates, and text embeddings.

Shows marker extraction from labels (one marker per instance at its centroid
pixel), the two prompt template variants, and the default hashed-bag-of-words
embedder, including the similarity structure it induces across prompts.

Run:  python3 demos/03_conditioning_and_prompts.py
"""

import numpy as np

from histodiff import (
    HashTextEmbedder,
    ToyDataConfig,
    build_point_map,
    embed_text,
    generate_patch,
    make_prompt,
)

# --- markers from labels ------------------------------------------------
cfg = ToyDataConfig(seed=21)
patch = generate_patch(cfg, np.random.default_rng(21))
pm = build_point_map(patch.sample.instance, patch.sample.semantic)
print(f"{pm.marker_count} markers for "
      f"{len(np.unique(patch.sample.instance)) - 1} instances")
for r, c in np.argwhere(pm.grid):
    print(f"  marker class {pm.grid[r, c]} at ({r:2d},{c:2d}), "
          f"distance there = {patch.sample.distance[r, c]:.2f}")

# --- prompt templates ----------------------------------------------------
print()
print(make_prompt("colon", ["epithelial", "lymphocyte", "plasma"]))
print(make_prompt("endometrium", ["stroma", "epithelium"], stain="IHC"))

# --- embeddings -----------------------------------------------------------
emb = HashTextEmbedder(dim=512)
prompts = {
    "colon/epi+lym": make_prompt("colon", ["epithelial", "lymphocyte"]),
    "colon/epi": make_prompt("colon", ["epithelial"]),
    "breast/epi+lym": make_prompt("breast", ["epithelial", "lymphocyte"]),
    "lung/stromal": make_prompt("lung", ["stromal"]),
}
vecs = {k: embed_text(emb, p) for k, p in prompts.items()}
names = list(vecs)
print("\ncosine similarities between prompt embeddings:")
header = " " * 16 + "".join(f"{n:>16}" for n in names)
print(header)
for a in names:
    row = "".join(f"{float(vecs[a] @ vecs[b]):16.3f}" for b in names)
    print(f"{a:>16}{row}")
