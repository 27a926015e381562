"""Domain types, action-space indexing and footprint geometry."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

# code -> axis permutation applied to (length, width, height)
ORIENTATION_PERMUTATIONS: tuple[tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))
NUM_ORIENTATIONS = len(ORIENTATION_PERMUTATIONS)


class ActionRangeError(ValueError):
    """An action field or flat index lies outside the action space."""


def _require_positive_int(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class PalletConfig:
    length_cells: int = 25
    width_cells: int = 25
    max_height_cells: int = 25
    cell_size: float = 1.0

    def __post_init__(self):
        _require_positive_int("length_cells", self.length_cells)
        _require_positive_int("width_cells", self.width_cells)
        _require_positive_int("max_height_cells", self.max_height_cells)
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.length_cells, self.width_cells)

    @property
    def volume(self) -> int:
        """V_max in cell^3."""
        return self.length_cells * self.width_cells * self.max_height_cells


@dataclass(frozen=True)
class BoxDims:
    length: int
    width: int
    height: int
    weight: float = 1.0

    def __post_init__(self):
        _require_positive_int("length", self.length)
        _require_positive_int("width", self.width)
        _require_positive_int("height", self.height)
        if not self.weight > 0:
            raise ValueError(f"weight must be > 0, got {self.weight!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.length, self.width, self.height)

    @property
    def volume(self) -> int:
        return self.length * self.width * self.height


@dataclass(frozen=True)
class OrientedBox:
    """Box dimensions after applying one of the six axis permutations."""

    length: int
    width: int
    height: int
    orientation: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.length, self.width, self.height)

    @property
    def volume(self) -> int:
        return self.length * self.width * self.height


def orient(dims: BoxDims, code: int) -> OrientedBox:
    if not 0 <= code < NUM_ORIENTATIONS:
        raise ActionRangeError(f"orientation code {code} not in [0, {NUM_ORIENTATIONS})")
    src = dims.dims
    perm = ORIENTATION_PERMUTATIONS[code]
    return OrientedBox(src[perm[0]], src[perm[1]], src[perm[2]], code)


def orientations(dims: BoxDims) -> list[OrientedBox]:
    """All six orientations in code order. Duplicates (cubes, square faces) are kept."""
    return [orient(dims, code) for code in range(NUM_ORIENTATIONS)]


@dataclass(frozen=True)
class Action:
    slot: int
    orientation: int
    x: int
    y: int


def action_space_size(n: int, config: PalletConfig) -> int:
    return n * NUM_ORIENTATIONS * config.length_cells * config.width_cells


def encode_action(action: Action, n: int, config: PalletConfig) -> int:
    """Flatten slot-major, then orientation, then x, then y."""
    L, W = config.shape
    for name, value, hi in (
        ("slot", action.slot, n),
        ("orientation", action.orientation, NUM_ORIENTATIONS),
        ("x", action.x, L),
        ("y", action.y, W),
    ):
        if not 0 <= value < hi:
            raise ActionRangeError(f"{name}={value} not in [0, {hi})")
    return ((action.slot * NUM_ORIENTATIONS + action.orientation) * L + action.x) * W + action.y


def decode_action(index: int, n: int, config: PalletConfig) -> Action:
    L, W = config.shape
    size = action_space_size(n, config)
    if not 0 <= index < size:
        raise ActionRangeError(f"action index {index} not in [0, {size})")
    rest, y = divmod(int(index), W)
    rest, x = divmod(rest, L)
    slot, o = divmod(rest, NUM_ORIENTATIONS)
    return Action(slot, o, x, y)


@dataclass(frozen=True)
class Footprint:
    """Half-open cell rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    in_bounds: bool

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.x0, self.x1), slice(self.y0, self.y1))


def footprint(oriented: OrientedBox, x: int, y: int, config: PalletConfig) -> Footprint:
    L, W = config.shape
    x1, y1 = x + oriented.length, y + oriented.width
    inside = x >= 0 and y >= 0 and x1 <= L and y1 <= W
    return Footprint(x, y, x1, y1, inside)
