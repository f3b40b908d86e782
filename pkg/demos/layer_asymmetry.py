"""Why the rain layer is the compact one.

Builds texture, streak and veiling patch stacks, reports their mean entropy
and 95%-energy rank, picks the asymmetry sign for a rainy toy image and shows
which patches non-local matching would group together.

    python demos/layer_asymmetry.py
"""

import numpy as np

from anlcl.analysis import patch_entropy, singular_spectrum
from anlcl.data import RainParams, extract_patches, make_clean_image, synth_rain
from anlcl.fixtures import streak_patches, texture_patches, veiling_patches
from anlcl.losses import eta_from_entropy
from anlcl.sampler import nonlocal_topk


def describe(name, stack):
    h = np.mean([patch_entropy(p) for p in stack.patches])
    rank = singular_spectrum(stack).rank_at(0.95)
    print(f"{name:8s} mean entropy {h:5.2f} bits   rank@95% {rank:3d} of {len(stack)}")


def main():
    for name, make in (("texture", texture_patches), ("streak", streak_patches), ("veiling", veiling_patches)):
        describe(name, make(96, rng_seed=0))

    clean = make_clean_image(128, 3)
    rainy, rain = synth_rain(clean, RainParams(), rng_seed=3)
    clean_grid, rain_grid = extract_patches(clean, 16, 16), extract_patches(rain, 16, 16)
    print("eta for this image:", eta_from_entropy(clean_grid, rain_grid))

    grid = extract_patches(rainy, 16, 8)
    query = grid.refs[len(grid) // 2]
    near = nonlocal_topk(query, grid, 5)
    far = nonlocal_topk(query, grid, 5, farthest=True)
    print("query", (query.top, query.left))
    print("closest ", [(r.top, r.left, round(d, 2)) for r, d in zip(near.matches, near.distances)])
    print("farthest", [(r.top, r.left, round(d, 2)) for r, d in zip(far.matches, far.distances)])


if __name__ == "__main__":
    main()
