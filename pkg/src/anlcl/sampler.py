"""Block-matching search and contrastive sample selection.

All searches are exact and run over the stride grid of a single image. Ties in
distance are broken by ascending candidate index so repeated calls agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PatchRef, PatchStack, as_image, extract_patches
from .errors import DimensionError, ParameterError

MODES = ("nonlocal", "reverse_nonlocal", "random", "neighbour")


@dataclass
class SamplerConfig:
    """Patch geometry and sample counts.

    ``num_pos`` sizes the clean-layer cluster, ``num_neg`` the rain-layer
    cluster, ``num_loc`` the negatives per location anchor, and
    ``loc_anchors`` the number of location anchors drawn per image.
    """

    patch_size: int = 16
    stride: int = 8
    num_pos: int = 8
    num_neg: int = 256
    num_loc: int = 256
    loc_anchors: int = 8
    mode: str = "nonlocal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown sampling mode {self.mode!r}; expected one of {MODES}")
        for name in ("patch_size", "stride", "num_pos", "num_neg", "num_loc", "loc_anchors"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")


@dataclass
class NonLocalSet:
    query: PatchRef | None
    matches: list[PatchRef] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)


def patch_distance(p, q) -> float:
    """Sum of squared differences between two equally shaped blocks."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"patch shapes differ: {p.shape} vs {q.shape}")
    d = p - q
    return float(np.sum(d * d))


def distances_to(query_block, candidates: PatchStack) -> np.ndarray:
    """Distances from one block to every candidate, in candidate order."""
    q = np.asarray(query_block, dtype=np.float64).reshape(-1)
    flat = candidates.flat().astype(np.float64)
    if flat.shape[1] != q.size:
        raise DimensionError("query block does not match candidate patch shape")
    diff = flat - q
    return np.einsum("ij,ij->i", diff, diff)


def rank(dist: np.ndarray, k: int, farthest: bool) -> np.ndarray:
    """Indices of the ``k`` smallest (or largest) entries, ties by index."""
    order = np.lexsort((np.arange(len(dist)), -dist if farthest else dist))
    return order[:k]


def nonlocal_topk(query, candidates: PatchStack, k: int, farthest: bool = False,
                  source: np.ndarray | None = None) -> NonLocalSet:
    """Exact top-``k`` block matching.

    ``query`` is either a raw block or a :class:`PatchRef`; a ref is resolved
    against ``source`` if given, otherwise against the candidate whose ref is
    equal to it.
    """
    if k < 1 or k > len(candidates):
        raise ParameterError(f"k={k} outside 1..{len(candidates)} candidates")
    ref = query if isinstance(query, PatchRef) else None
    if ref is not None:
        if source is not None:
            block = ref.read(as_image(source))
        else:
            try:
                block = candidates.patches[candidates.refs.index(ref)]
            except ValueError:
                raise ParameterError("query ref is not among the candidates; pass source") from None
    else:
        block = query
    dist = distances_to(block, candidates)
    idx = rank(dist, k, farthest)
    return NonLocalSet(ref, [candidates.refs[i] for i in idx], [float(dist[i]) for i in idx],
                       [int(i) for i in idx])


def neighbour_indices(refs: list[PatchRef], anchor: int, dist: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Spatial neighbours of ``anchor``: ring by ring, most similar first."""
    a = refs[anchor]
    ring = np.array([max(abs(r.top - a.top), abs(r.left - a.left)) // stride for r in refs])
    order = np.lexsort((np.arange(len(refs)), dist, ring))
    return order[:k]


def _check_count(k: int, n: int, what: str) -> None:
    if k > n:
        raise ParameterError(f"{what}: need {k} patches but the grid only has {n}")


@dataclass
class LayerSample:
    anchor_B: PatchRef
    pos_B: PatchStack
    anchor_R: PatchRef
    pos_R: PatchStack
    neg_R: PatchStack
    neg_B: PatchStack
    # positions in the grid returned by extract_patches, for indexing embeddings
    idx: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.anchor_B, self.pos_B, self.anchor_R, self.pos_R, self.neg_R, self.neg_B))


def _cluster(grid: PatchStack, anchor: int, k: int, mode: str, stride: int, rng) -> np.ndarray:
    dist = distances_to(grid.patches[anchor], grid)
    if mode in ("nonlocal", "reverse_nonlocal"):
        return rank(dist, k, farthest=False)
    if mode == "neighbour":
        return neighbour_indices(grid.refs, anchor, dist, k, stride)
    others = np.delete(np.arange(len(grid)), anchor)
    return np.concatenate([[anchor], rng.choice(others, size=k - 1, replace=False)]).astype(int)


def sample_layer_patches(B_hat, R_hat, cfg: SamplerConfig, rng_seed: int) -> LayerSample:
    """Draw the clean-layer and rain-layer clusters for the layer contrastive loss.

    The clean cluster holds ``num_pos`` patches of ``B_hat`` around a random
    anchor (the anchor itself first), the rain cluster ``num_neg`` patches of
    ``R_hat``. Each cluster doubles as the negatives of the other side, except
    in ``reverse_nonlocal`` mode, where the negatives are the patches of the
    other layer farthest from the opposing anchor, and in ``random`` mode,
    where they are drawn uniformly.
    """
    B_hat, R_hat = as_image(B_hat), as_image(R_hat)
    if B_hat.shape != R_hat.shape:
        raise DimensionError(f"layer shapes differ: {B_hat.shape} vs {R_hat.shape}")
    rng = np.random.default_rng(rng_seed)
    gb = extract_patches(B_hat, cfg.patch_size, cfg.stride, image_id="B")
    gr = extract_patches(R_hat, cfg.patch_size, cfg.stride, image_id="R")
    n = len(gb)
    _check_count(cfg.num_pos, n, "num_pos")
    _check_count(cfg.num_neg, n, "num_neg")
    ab = int(rng.integers(n))
    ar = int(rng.integers(n))
    pos_b = _cluster(gb, ab, cfg.num_pos, cfg.mode, cfg.stride, rng)
    pos_r = _cluster(gr, ar, cfg.num_neg, cfg.mode, cfg.stride, rng)
    if cfg.mode == "reverse_nonlocal":
        neg_r = rank(distances_to(gb.patches[ab], gr), cfg.num_neg, farthest=True)
        neg_b = rank(distances_to(gr.patches[ar], gb), cfg.num_pos, farthest=True)
    elif cfg.mode == "random":
        neg_r = rng.choice(n, size=cfg.num_neg, replace=False)
        neg_b = rng.choice(n, size=cfg.num_pos, replace=False)
    else:
        neg_r, neg_b = pos_r, pos_b
    idx = {"anchor_B": ab, "pos_B": pos_b, "anchor_R": ar, "pos_R": pos_r, "neg_R": neg_r, "neg_B": neg_b}
    return LayerSample(gb.refs[ab], gb.take(pos_b), gr.refs[ar], gr.take(pos_r),
                       gr.take(neg_r), gb.take(neg_b), idx)


@dataclass
class LocationPair:
    pos_O: PatchRef
    pos_B: PatchRef
    negatives: PatchStack
    idx: int = -1
    neg_idx: np.ndarray | None = None

    def __iter__(self):
        return iter((self.pos_O, self.pos_B, self.negatives))


def sample_location_pairs(O, B_hat, cfg: SamplerConfig, rng_seed: int) -> list[LocationPair]:
    """Co-located anchors in ``O`` and ``B_hat`` with negatives from ``O``.

    Negatives are the ``num_loc`` grid patches of ``O`` farthest from the
    anchor, or uniformly drawn other locations in ``random`` mode.
    """
    O, B_hat = as_image(O), as_image(B_hat)
    if O.shape != B_hat.shape:
        raise DimensionError(f"image shapes differ: {O.shape} vs {B_hat.shape}")
    rng = np.random.default_rng(rng_seed)
    go = extract_patches(O, cfg.patch_size, cfg.stride, image_id="O")
    n = len(go)
    _check_count(cfg.loc_anchors, n, "loc_anchors")
    _check_count(cfg.num_loc, n - 1 if cfg.mode == "random" else n, "num_loc")
    anchors = rng.choice(n, size=cfg.loc_anchors, replace=False)
    pairs = []
    for a in anchors:
        a = int(a)
        if cfg.mode == "random":
            neg = rng.choice(np.delete(np.arange(n), a), size=cfg.num_loc, replace=False)
        else:
            neg = rank(distances_to(go.patches[a], go), cfg.num_loc, farthest=True)
        ref = go.refs[a]
        pairs.append(LocationPair(ref, PatchRef("B", ref.top, ref.left, ref.size), go.take(neg), a, neg))
    return pairs
