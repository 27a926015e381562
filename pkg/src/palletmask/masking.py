"""Action-mask producers, full action-space assembly, and mask IoU."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from palletmask.core import NUM_ORIENTATIONS, OrientedBox, PalletConfig, orient
from palletmask.env import EnvState, NoiseConfig, geometric_bitmap

log = logging.getLogger(__name__)

# (support fraction strictly above, minimum supported corners)
HEURISTIC_RULES = ((0.60, 4), (0.80, 3), (0.95, 0))


def support_maps(heights: np.ndarray, oriented: OrientedBox) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rest height, support fraction and supported-corner count for every in-bounds FLB cell."""
    L, W = heights.shape
    l, w = oriented.length, oriented.width
    if l > L or w > W:
        empty = np.zeros((max(0, L - l + 1), max(0, W - w + 1)))
        return empty.astype(heights.dtype), empty, empty.astype(int)
    win = sliding_window_view(heights, (l, w))
    rest = win.max(axis=(2, 3))
    eq = win == rest[..., None, None]
    frac = eq.mean(axis=(2, 3))
    corners = (
        eq[..., 0, 0].astype(int) + eq[..., 0, -1] + eq[..., -1, 0] + eq[..., -1, -1]
    )
    return rest, frac, corners


def heuristic_mask(heights: np.ndarray, oriented: OrientedBox, pallet: PalletConfig) -> np.ndarray:
    """Support-ratio heuristic: >60% and 4 corners, or >80% and 3 corners, or >95%."""
    out = np.zeros(pallet.shape, dtype=bool)
    rest, frac, corners = support_maps(heights, oriented)
    if rest.size == 0:
        return out
    ok = np.zeros(rest.shape, dtype=bool)
    for threshold, min_corners in HEURISTIC_RULES:
        ok |= (frac > threshold) & (corners >= min_corners)
    ok &= rest + oriented.height <= pallet.max_height_cells
    out[: rest.shape[0], : rest.shape[1]] = ok
    return out


def learned_mask_infer(model, heights: np.ndarray, oriented: OrientedBox, threshold: Optional[float] = None) -> np.ndarray:
    from palletmask.learn import predict_proba

    pallet = model.pallet
    if heights.shape != pallet.shape:
        raise ValueError(f"heightmap shape {heights.shape} does not match model pallet {pallet.shape}")
    t = model.threshold if threshold is None else threshold
    probs = predict_proba(model, heights[None], np.array([oriented.dims]))[0]
    return (probs >= t) & geometric_bitmap(heights, oriented, pallet)


def mask_iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    union = np.logical_or(predicted, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, truth).sum() / union)


def pooled_iou(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> float:
    """Dataset-level IoU: total intersection over total union across all bitmaps."""
    inter = union = 0
    for p, t in zip(predicted, truth):
        p, t = np.asarray(p, bool), np.asarray(t, bool)
        inter += np.logical_and(p, t).sum()
        union += np.logical_or(p, t).sum()
    return 1.0 if union == 0 else float(inter / union)


# ---------------------------------------------------------------------------
# producers


class MaskProducer:
    """Per-(state, oriented box) bitmap source. ``bitmaps`` takes a batch of requests."""

    name = "geometric"
    # An exact producer's empty mask proves every placement would be judged unstable,
    # so the episode ends instead of falling back to geometric validity.
    exact = False

    def bitmaps(self, requests: Sequence[tuple[EnvState, OrientedBox, float]]) -> list[np.ndarray]:
        return [geometric_bitmap(s.heights, o, s.pallet) for s, o, _ in requests]


class GeometricProducer(MaskProducer):
    name = "none"


class HeuristicProducer(MaskProducer):
    name = "heuristic"

    def bitmaps(self, requests):
        return [heuristic_mask(s.heights, o, s.pallet) for s, o, _ in requests]


class OracleProducer(MaskProducer):
    name = "oracle"
    exact = True

    def __init__(self, noise: NoiseConfig):
        self.noise = noise

    def bitmaps(self, requests):
        from palletmask.stability import label_mask

        return [label_mask(s, o, self.noise, seed=None, weight=w) for s, o, w in requests]


class LearnedProducer(MaskProducer):
    name = "learned"

    def __init__(self, model, threshold: Optional[float] = None):
        self.model = model
        self.threshold = model.threshold if threshold is None else threshold

    def bitmaps(self, requests):
        from palletmask.learn import predict_proba

        if not requests:
            return []
        heights = np.stack([s.heights for s, _, _ in requests])
        boxes = np.array([o.dims for _, o, _ in requests])
        probs = predict_proba(self.model, heights, boxes)
        return [p >= self.threshold for p in probs]


def make_producer(mode: str, noise: Optional[NoiseConfig] = None, model=None) -> MaskProducer:
    if mode == "none":
        return GeometricProducer()
    if mode == "heuristic":
        return HeuristicProducer()
    if mode == "oracle":
        return OracleProducer(noise or NoiseConfig())
    if mode == "learned":
        if model is None:
            raise ValueError("learned mask mode needs a trained mask model")
        return LearnedProducer(model)
    raise ValueError(f"unknown mask mode {mode!r}")


def assemble_full_masks(states: Sequence[EnvState], producer: MaskProducer) -> list[np.ndarray]:
    """(N, 6, L, W) mask per state in action-index layout, batched across states.

    Every bitmap is intersected with geometric validity; empty slots stay all-false.
    Orientations with identical dims reuse one producer call.
    """
    requests: list[tuple[EnvState, OrientedBox, float]] = []
    slots: list[list[tuple[int, int, int]]] = []  # (slot, orientation, request index)
    for state in states:
        key_to_req: dict = {}
        entries = []
        for slot, box in enumerate(state.buffer):
            if box is None:
                continue
            for code in range(NUM_ORIENTATIONS):
                o = orient(box, code)
                key = (o.dims, box.weight)
                if key not in key_to_req:
                    key_to_req[key] = len(requests)
                    requests.append((state, o, box.weight))
                entries.append((slot, code, key_to_req[key]))
        slots.append(entries)
    bits = producer.bitmaps(requests)
    geo = [geometric_bitmap(s.heights, o, s.pallet) for s, o, _ in requests]
    out = []
    for state, entries in zip(states, slots):
        full = np.zeros((state.capacity, NUM_ORIENTATIONS) + state.pallet.shape, dtype=bool)
        for slot, code, r in entries:
            full[slot, code] = bits[r] & geo[r]
        out.append(full)
    return out


def assemble_full_mask(state: EnvState, producer: MaskProducer) -> np.ndarray:
    return assemble_full_masks([state], producer)[0]


def with_fallback(mask: np.ndarray, state: EnvState) -> tuple[np.ndarray, bool]:
    """Replace an all-false mask by the geometric one when valid actions exist."""
    if mask.any():
        return mask, False
    geo = assemble_full_mask(state, GeometricProducer())
    if geo.any():
        log.debug("empty action mask at step %d; falling back to geometric validity", state.step_count)
        return geo, True
    return mask, False
