"""Palletization MDP: box stream, placement transitions, dense reward, termination."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from palletmask.core import (
    NUM_ORIENTATIONS,
    Action,
    BoxDims,
    OrientedBox,
    PalletConfig,
    footprint,
    orient,
)

DEFAULT_CATALOG = (
    BoxDims(10, 8, 6),
    BoxDims(9, 6, 4),
    BoxDims(6, 6, 6),
    BoxDims(6, 4, 4),
    BoxDims(4, 4, 4),
)


class InvalidPlacementError(ValueError):
    """step() was called with an action that fails geometric validity."""


@dataclass(frozen=True)
class ScenarioConfig:
    box_catalog: tuple[BoxDims, ...] = DEFAULT_CATALOG
    episode_box_count: int = 80
    buffer_capacity: int = 5
    weight_range: tuple[float, float] = (0.5, 5.0)
    pallet: PalletConfig = field(default_factory=PalletConfig)
    rng_seed: int = 0
    fixed_multiset: bool = False

    def __post_init__(self):
        object.__setattr__(self, "box_catalog", tuple(self.box_catalog))
        object.__setattr__(self, "weight_range", tuple(float(v) for v in self.weight_range))
        if not self.box_catalog:
            raise ValueError("box_catalog must be non-empty")
        if self.episode_box_count < 1:
            raise ValueError("episode_box_count must be >= 1")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        lo, hi = self.weight_range
        if not (0 < lo <= hi):
            raise ValueError(f"weight_range must satisfy 0 < min <= max, got {self.weight_range}")


@dataclass(frozen=True)
class NoiseConfig:
    translational_std: float = 0.05
    rotational_std_deg: float = 5.0
    samples_per_check: int = 20
    stable_fraction_threshold: float = 0.95
    nominal_only: bool = False

    def __post_init__(self):
        if self.translational_std < 0 or self.rotational_std_deg < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.samples_per_check < 1:
            raise ValueError("samples_per_check must be >= 1")
        if not 0 < self.stable_fraction_threshold <= 1:
            raise ValueError("stable_fraction_threshold must be in (0, 1]")


@dataclass(frozen=True)
class PlacedBox:
    """A box resting on the pallet at its nominal grid pose."""

    length: int
    width: int
    height: int
    x: int
    y: int
    z: int
    weight: float

    @property
    def volume(self) -> int:
        return self.length * self.width * self.height

    @property
    def top(self) -> int:
        return self.z + self.height


class TerminationReason(str, enum.Enum):
    STREAM_EXHAUSTED = "stream_exhausted"
    HEIGHT_EXCEEDED = "height_exceeded"
    UNSTABLE = "unstable"
    NO_VALID_ACTION = "no_valid_action"


@dataclass(frozen=True, eq=False)
class EnvState:
    heights: np.ndarray
    buffer: tuple[Optional[BoxDims], ...]
    stream: tuple[BoxDims, ...]
    placed: tuple[PlacedBox, ...]
    pallet: PalletConfig
    episode_seed: int = 0
    step_count: int = 0

    @property
    def capacity(self) -> int:
        return len(self.buffer)

    def buffer_features(self) -> np.ndarray:
        """(N, 4) array: l, w, h scaled by pallet height plus a presence flag."""
        out = np.zeros((self.capacity, 4))
        scale = 1.0 / self.pallet.max_height_cells
        for i, box in enumerate(self.buffer):
            if box is not None:
                out[i] = (box.length * scale, box.width * scale, box.height * scale, 1.0)
        return out


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    termination_reason: Optional[TerminationReason] = None
    stable_fraction: float = 1.0


def draw_stream(scenario: ScenarioConfig, seed) -> list[BoxDims]:
    rng = np.random.default_rng(seed)
    catalog = scenario.box_catalog
    count = scenario.episode_box_count
    if scenario.fixed_multiset:
        per, extra = divmod(count, len(catalog))
        kinds = np.concatenate(
            [np.full(per + (1 if i < extra else 0), i) for i in range(len(catalog))]
        ).astype(int)
    else:
        kinds = rng.integers(len(catalog), size=count)
    kinds = rng.permutation(kinds)
    lo, hi = scenario.weight_range
    weights = rng.uniform(lo, hi, size=count)
    return [
        BoxDims(catalog[k].length, catalog[k].width, catalog[k].height, float(w))
        for k, w in zip(kinds, weights)
    ]


def reset(scenario: ScenarioConfig, seed: Optional[int] = None) -> EnvState:
    """Fresh episode. The stream is a deterministic function of ``seed`` (default: scenario seed)."""
    if seed is None:
        seed = scenario.rng_seed
    stream = draw_stream(scenario, seed)
    n = scenario.buffer_capacity
    buffer = tuple(stream[:n]) + (None,) * max(0, n - len(stream))
    return EnvState(
        heights=np.zeros(scenario.pallet.shape, dtype=np.int64),
        buffer=buffer,
        stream=tuple(stream[n:]),
        placed=(),
        pallet=scenario.pallet,
        episode_seed=int(seed),
    )


def window_max(heights: np.ndarray, length: int, width: int) -> np.ndarray:
    """Max height under every in-bounds footprint; shape (L-l+1, W-w+1), empty if it does not fit."""
    L, W = heights.shape
    if length > L or width > W:
        return np.zeros((max(0, L - length + 1), max(0, W - width + 1)), dtype=heights.dtype)
    return sliding_window_view(heights, (length, width)).max(axis=(2, 3))


def geometric_bitmap(heights: np.ndarray, oriented: OrientedBox, pallet: PalletConfig) -> np.ndarray:
    """In-bounds and under the height cap, for every FLB cell."""
    out = np.zeros(pallet.shape, dtype=bool)
    rest = window_max(heights, oriented.length, oriented.width)
    if rest.size:
        out[: rest.shape[0], : rest.shape[1]] = rest + oriented.height <= pallet.max_height_cells
    return out


def resting_height(heights: np.ndarray, oriented: OrientedBox, x: int, y: int) -> int:
    L, W = heights.shape
    fp = footprint(oriented, x, y, PalletConfig(L, W, 1))
    if not fp.in_bounds:
        raise IndexError(f"footprint {oriented.length}x{oriented.width} at ({x}, {y}) leaves the {L}x{W} grid")
    return int(heights[fp.slices].max())


def is_valid_placement(state: EnvState, action: Action) -> tuple[bool, str]:
    if not 0 <= action.slot < state.capacity:
        return False, "slot out of range"
    box = state.buffer[action.slot]
    if box is None:
        return False, "empty buffer slot"
    if not 0 <= action.orientation < NUM_ORIENTATIONS:
        return False, "orientation out of range"
    oriented = orient(box, action.orientation)
    if not footprint(oriented, action.x, action.y, state.pallet).in_bounds:
        return False, "footprint out of bounds"
    if resting_height(state.heights, oriented, action.x, action.y) + oriented.height > state.pallet.max_height_cells:
        return False, "height cap exceeded"
    return True, "ok"


def _termination_check(state: EnvState) -> Optional[TerminationReason]:
    boxes = [b for b in state.buffer if b is not None]
    if not boxes:
        return TerminationReason.STREAM_EXHAUSTED
    fits_laterally = False
    seen = set()
    for box in boxes:
        for code in range(NUM_ORIENTATIONS):
            o = orient(box, code)
            if o.dims in seen:
                continue
            seen.add(o.dims)
            rest = window_max(state.heights, o.length, o.width)
            if rest.size:
                fits_laterally = True
                if (rest + o.height <= state.pallet.max_height_cells).any():
                    return None
    return TerminationReason.HEIGHT_EXCEEDED if fits_laterally else TerminationReason.NO_VALID_ACTION


def is_terminal(state: EnvState) -> Optional[TerminationReason]:
    """Reason the state admits no further action, or None."""
    return _termination_check(state)


def step_seed(state: EnvState) -> int:
    """Seed of the stability draws for the placement made from ``state``."""
    return int(np.random.SeedSequence([state.episode_seed, state.step_count, 0x5A]).generate_state(1)[0])


def place(state: EnvState, action: Action) -> EnvState:
    """Apply a (valid) placement at its nominal pose, refilling the buffer."""
    box = state.buffer[action.slot]
    oriented = orient(box, action.orientation)
    fp = footprint(oriented, action.x, action.y, state.pallet)
    z = int(state.heights[fp.slices].max())
    heights = state.heights.copy()
    heights[fp.slices] = z + oriented.height
    buffer = list(state.buffer)
    stream = state.stream
    if stream:
        buffer[action.slot], stream = stream[0], stream[1:]
    else:
        buffer[action.slot] = None
    placed = state.placed + (
        PlacedBox(oriented.length, oriented.width, oriented.height, action.x, action.y, z, box.weight),
    )
    return replace(
        state,
        heights=heights,
        buffer=tuple(buffer),
        stream=stream,
        placed=placed,
        step_count=state.step_count + 1,
    )


def step(state: EnvState, action: Action, noise: NoiseConfig) -> StepResult:
    from palletmask.stability import check_placement

    ok, why = is_valid_placement(state, action)
    if not ok:
        raise InvalidPlacementError(f"{action}: {why}")
    verdict = check_placement(state, action, noise, seed=None)
    if not verdict.stable:
        fallen = replace(state, step_count=state.step_count + 1)
        return StepResult(fallen, 0.0, True, TerminationReason.UNSTABLE, verdict.stable_fraction)
    box = state.buffer[action.slot]
    nxt = place(state, action)
    reward = box.volume / state.pallet.volume
    reason = _termination_check(nxt)
    return StepResult(nxt, reward, reason is not None, reason, verdict.stable_fraction)


def space_utilization(state: EnvState) -> float:
    return sum(b.volume for b in state.placed) / state.pallet.volume
