"""Constructed patch stacks with a known clean/rain asymmetry.

Texture and edge patches come from procedural scenes; streak patches are
crops of a synthetic rain layer and veiling patches are near-constant. They
back the entropy and spectrum checks and the randomized eta fixtures.
"""

from __future__ import annotations

import numpy as np

from .data import PatchRef, PatchStack, RainParams, make_clean_image, synth_rain


def _stack(blocks, image_id) -> PatchStack:
    blocks = np.stack(blocks)
    size = blocks.shape[1]
    return PatchStack(blocks, [PatchRef(image_id, 0, i * size, size) for i in range(len(blocks))])


def texture_patches(n: int, size: int = 16, rng_seed: int = 0, channels: int = 1) -> PatchStack:
    """Crops of textured scenes, half of them straddling a hard edge."""
    rng = np.random.default_rng(rng_seed)
    blocks = []
    for k in range(n):
        scene = make_clean_image(4 * size, int(rng.integers(2**31)), channels)
        top, left = rng.integers(0, 3 * size, 2)
        block = scene[top:top + size, left:left + size].copy()
        # fine oriented texture: a few random plane waves
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        for _ in range(4):
            theta, freq, phase = rng.uniform(0, np.pi), rng.uniform(0.15, 0.45), rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(theta) * yy + np.sin(theta) * xx) + phase)
            block += rng.uniform(0.03, 0.08) * wave[..., None]
        block = np.clip(block, 0, 1)
        if k % 2:
            # hard step edge at a random orientation
            yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
            angle = rng.uniform(0, np.pi)
            mask = (np.cos(angle) * yy + np.sin(angle) * xx) > 0
            block[mask] = np.clip(block[mask] + rng.uniform(0.25, 0.4), 0, 1)
        blocks.append(block)
    return _stack(blocks, "texture")


def streak_patches(n: int, size: int = 16, rng_seed: int = 0, channels: int = 1,
                   params: RainParams | None = None) -> PatchStack:
    """Crops of a rain layer rendered on black, kept only where a streak is present.

    The default streaks are long and nearly vertical, so each crop is close to
    a function of the column alone; that directional structure is what makes
    rain patches compact.
    """
    rng = np.random.default_rng(rng_seed)
    params = params or RainParams(streak_count=6, length_px=(2.5 * size, 3.0 * size),
                                  width_px=(1.0, 1.5), angle_deg=(-3.0, 3.0), intensity=(0.3, 0.5))
    blocks = []
    while len(blocks) < n:
        _, rain = synth_rain(np.zeros((2 * size, 2 * size, channels)), params, int(rng.integers(2**31)))
        top, left = rng.integers(0, size + 1, 2)
        block = rain[top:top + size, left:left + size]
        if block.max() > 0:
            blocks.append(block)
    return _stack(blocks, "streak")


def veiling_patches(n: int, size: int = 16, rng_seed: int = 0, channels: int = 1) -> PatchStack:
    """Constant haze-like patches with one brightness level per patch."""
    rng = np.random.default_rng(rng_seed)
    levels = rng.uniform(0.05, 0.3, n)
    return _stack([np.full((size, size, channels), v) for v in levels], "veiling")
