"""Quasi-static stability oracle with Monte-Carlo placement noise.

A placement is stable for one noise draw when the new box, and every box that
carries part of its weight, keeps the combined centre of mass of itself plus
its load inside the convex hull of its contact region. Contacts are computed
from the continuous footprints at matching rest heights; the new box keeps its
nominal rest height and only its xy pose and yaw are perturbed.

Two evaluation routes exist. ``quasi_static_stable`` walks an explicit
:class:`StackModel` and is the reference. ``label_mask`` and the default
``check_placement`` share a vectorised engine (:class:`_StackCache`) that
evaluates many (cell, draw) rows at once.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import shapely

from palletmask.core import Action, OrientedBox, PalletConfig, footprint, orient
from palletmask.env import EnvState, NoiseConfig, is_valid_placement, step_seed, window_max

HULL_EPS = 1e-9
AREA_EPS = 1e-9


class PlacementPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class SupportStats:
    support_fraction: float
    corners_supported: tuple[bool, bool, bool, bool]
    rest_height: int

    @property
    def corner_count(self) -> int:
        return sum(self.corners_supported)


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    stable_fraction: float
    draws: int


@dataclass(frozen=True)
class StackBox:
    """Box with a continuous pose: centre (cx, cy), bottom z, yaw about z in degrees."""

    length: float
    width: float
    height: float
    cx: float
    cy: float
    z: float
    yaw_deg: float = 0.0
    weight: float = 1.0

    @property
    def top(self) -> float:
        return self.z + self.height

    def corners(self) -> np.ndarray:
        return _rect_corners(
            np.array([self.cx]), np.array([self.cy]), self.length, self.width, np.array([self.yaw_deg])
        )[0]

    def polygon(self) -> shapely.Polygon:
        return shapely.Polygon(self.corners())


@dataclass(frozen=True)
class StackModel:
    boxes: tuple[StackBox, ...]
    pallet: PalletConfig


def support_stats(heights: np.ndarray, oriented: OrientedBox, x: int, y: int) -> SupportStats:
    L, W = heights.shape
    fp = footprint(oriented, x, y, PalletConfig(L, W, 1))
    if not fp.in_bounds:
        raise IndexError(f"footprint at ({x}, {y}) leaves the {L}x{W} grid")
    patch = heights[fp.slices]
    rest = int(patch.max())
    supported = patch == rest
    corners = (
        bool(supported[0, 0]),
        bool(supported[0, -1]),
        bool(supported[-1, 0]),
        bool(supported[-1, -1]),
    )
    return SupportStats(float(supported.mean()), corners, rest)


# ---------------------------------------------------------------------------
# geometry shared by both routes


def _rect_corners(cx, cy, length, width, yaw_deg) -> np.ndarray:
    """Counter-clockwise corners, shape (B, 4, 2)."""
    t = np.radians(yaw_deg)
    c, s = np.cos(t), np.sin(t)
    hx = 0.5 * np.array([-length, length, length, -length], dtype=float)
    hy = 0.5 * np.array([-width, -width, width, width], dtype=float)
    px = cx[:, None] + c[:, None] * hx - s[:, None] * hy
    py = cy[:, None] + s[:, None] * hx + c[:, None] * hy
    return np.stack([px, py], axis=-1)


def com_within_hull(points: np.ndarray, valid: np.ndarray, q: np.ndarray, eps: float = HULL_EPS) -> np.ndarray:
    """Whether each q[b] lies within ``eps`` of the convex hull of points[b][valid[b]].

    q is outside the hull iff the directions from q to the points fit in an open
    half-plane, i.e. the largest circular angular gap exceeds pi. Points within
    eps of the silhouette chord count as inside, which makes the hull boundary
    inclusive.
    """
    points = np.asarray(points, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    q = np.asarray(q, dtype=float)
    B, P = valid.shape
    if P == 0:
        return np.zeros(B, dtype=bool)
    d = points - q[:, None, :]
    dist = np.hypot(d[..., 0], d[..., 1])
    near = (valid & (dist <= eps)).any(axis=1)
    ang = np.where(valid, np.arctan2(d[..., 1], d[..., 0]), np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    s = np.take_along_axis(ang, order, axis=1)
    count = valid.sum(axis=1)
    rows = np.arange(B)
    last = np.maximum(count - 1, 0)
    with np.errstate(invalid="ignore"):  # padded entries are inf; masked out below
        gaps = s[:, 1:] - s[:, :-1]
        wrap = s[rows, 0] + 2 * np.pi - s[rows, last]
    idx = np.arange(P - 1)[None, :]
    gaps = np.where(idx < (count - 1)[:, None], gaps, -1.0)
    wrap = np.where(count > 0, wrap, -1.0)
    all_gaps = np.concatenate([gaps, wrap[:, None]], axis=1)
    k = np.argmax(all_gaps, axis=1)
    maxgap = all_gaps[rows, k]
    is_wrap = k == P - 1
    ia = np.where(is_wrap, order[rows, last], order[rows, np.minimum(k, P - 1)])
    ib = np.where(is_wrap, order[rows, 0], order[rows, np.minimum(k + 1, P - 1)])
    pa = points[rows, ia]
    pb = points[rows, ib]
    chord = _segment_distance(q, pa, pb)
    outside = (maxgap > np.pi) & (chord > eps)
    return (count > 0) & (near | ~outside)


def _segment_distance(q, a, b) -> np.ndarray:
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    t = np.where(denom > 0, ((q - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.hypot(*(q - closest).T)


# ---------------------------------------------------------------------------
# reference route


def stack_from_state(state: EnvState) -> StackModel:
    boxes = tuple(
        StackBox(b.length, b.width, b.height, b.x + b.length / 2, b.y + b.width / 2, b.z, 0.0, b.weight)
        for b in state.placed
    )
    return StackModel(boxes, state.pallet)


def _contacts(stack: StackModel, polys: Sequence[shapely.Polygon], i: int):
    box = stack.boxes[i]
    if box.z <= HULL_EPS:
        return []
    out = []
    for j in range(i):
        other = stack.boxes[j]
        if abs(other.top - box.z) > HULL_EPS:
            continue
        inter = polys[i].intersection(polys[j])
        area = inter.area
        if area > AREA_EPS:
            c = inter.centroid
            out.append((j, area, np.array([c.x, c.y]), shapely.get_coordinates(inter)))
    return out


def supporters_closure(stack: StackModel, start: int) -> set[int]:
    """``start`` plus every box that transitively carries it."""
    polys = [b.polygon() for b in stack.boxes]
    seen = {start}
    todo = [start]
    while todo:
        i = todo.pop()
        for j, *_ in _contacts(stack, polys, i):
            if j not in seen:
                seen.add(j)
                todo.append(j)
    return seen


def quasi_static_stable(stack: StackModel, check: Optional[Iterable[int]] = None) -> bool:
    """Top-down load propagation over the stack, in reverse placement order.

    Each box's own weight plus the loads resting on it must have its combined
    centre of mass inside the hull of its contact region (its own footprint on
    the pallet floor). The total is passed to supporters in proportion to
    contact area, applied at each contact centroid. Only boxes in ``check``
    (default: all) are tested.
    """
    n = len(stack.boxes)
    if n == 0:
        return True
    check = set(range(n)) if check is None else set(check)
    polys = [b.polygon() for b in stack.boxes]
    mass = np.array([b.weight for b in stack.boxes], dtype=float)
    moment = np.array([[b.weight * b.cx, b.weight * b.cy] for b in stack.boxes], dtype=float)
    for i in range(n - 1, -1, -1):
        box = stack.boxes[i]
        com = moment[i] / mass[i]
        if box.z <= HULL_EPS:
            contacts = []
            pts = box.corners()
        else:
            contacts = _contacts(stack, polys, i)
            if not contacts:
                if i in check:
                    return False
                continue
            pts = np.concatenate([c[3] for c in contacts])
        if i in check:
            inside = com_within_hull(pts[None], np.ones((1, len(pts)), bool), com[None])[0]
            if not inside:
                return False
        total_area = sum(c[1] for c in contacts)
        for j, area, centroid, _ in contacts:
            f = mass[i] * area / total_area
            mass[j] += f
            moment[j] += f * centroid
    return True


def noise_draws(noise: NoiseConfig, key) -> np.ndarray:
    """(K, 3) draws of (dx, dy, dyaw_deg) keyed by ``key`` (an int or tuple of ints)."""
    if noise.nominal_only:
        return np.zeros((1, 3))
    z = np.random.default_rng(list(np.atleast_1d(key).astype(np.uint64))).standard_normal(
        (noise.samples_per_check, 3)
    )
    return z * np.array([noise.translational_std, noise.translational_std, noise.rotational_std_deg])


def _placement_key(seed, state: EnvState, x: int, y: int):
    base = step_seed(state) if seed is None else seed
    return (*np.atleast_1d(base).tolist(), x, y)


def _verdict(ok: np.ndarray, noise: NoiseConfig) -> StabilityVerdict:
    frac = float(np.mean(ok))
    threshold = 1.0 if noise.nominal_only else noise.stable_fraction_threshold
    return StabilityVerdict(frac >= threshold - 1e-12, frac, len(ok))


def check_placement(
    state: EnvState, action: Action, noise: NoiseConfig, seed=None, method: str = "vectorized"
) -> StabilityVerdict:
    """Monte-Carlo stability verdict for one placement.

    Draws are keyed by ``(seed, x, y)``; ``seed=None`` uses the state's own step
    seed, which is what the environment applies, so the oracle mask and the
    environment agree exactly.
    """
    ok, why = is_valid_placement(state, action)
    if not ok:
        raise PlacementPreconditionError(f"{action}: {why}")
    box = state.buffer[action.slot]
    oriented = orient(box, action.orientation)
    draws = noise_draws(noise, _placement_key(seed, state, action.x, action.y))
    z = int(state.heights[footprint(oriented, action.x, action.y, state.pallet).slices].max())
    if method == "vectorized":
        cache = _stack_cache(state)
        cells = np.array([[action.x, action.y]] * len(draws))
        rest = np.full(len(draws), z)
        ok = cache.evaluate(oriented, box.weight, cells, rest, draws)
    elif method == "reference":
        base = stack_from_state(state)
        ok = np.array([_reference_draw(base, oriented, box.weight, action.x, action.y, z, d) for d in draws])
    else:
        raise ValueError(f"unknown method {method!r}")
    return _verdict(ok, noise)


def _reference_draw(base: StackModel, oriented: OrientedBox, weight: float, x: int, y: int, z: int, draw) -> bool:
    dx, dy, dyaw = draw
    new = StackBox(
        oriented.length, oriented.width, oriented.height,
        x + oriented.length / 2 + dx, y + oriented.width / 2 + dy, z, dyaw, weight,
    )
    stack = StackModel(base.boxes + (new,), base.pallet)
    idx = len(stack.boxes) - 1
    return quasi_static_stable(stack, check=supporters_closure(stack, idx))


def label_mask(
    state: EnvState, oriented: OrientedBox, noise: NoiseConfig, seed=None, weight: float = 1.0
) -> np.ndarray:
    """Oracle bitmap g_t over every FLB cell for one oriented box."""
    pallet = state.pallet
    out = np.zeros(pallet.shape, dtype=bool)
    rest = window_max(state.heights, oriented.length, oriented.width)
    if rest.size == 0:
        return out
    fits = rest + oriented.height <= pallet.max_height_cells
    # floor placements carry no load and rest on their whole footprint
    out[: rest.shape[0], : rest.shape[1]] = fits & (rest == 0)
    xs, ys = np.nonzero(fits & (rest > 0))
    if len(xs) == 0:
        return out
    draws = [noise_draws(noise, _placement_key(seed, state, int(x), int(y))) for x, y in zip(xs, ys)]
    k = len(draws[0])
    cells = np.repeat(np.stack([xs, ys], axis=1), k, axis=0)
    rests = np.repeat(rest[xs, ys], k)
    ok = _stack_cache(state).evaluate(oriented, weight, cells, rests, np.concatenate(draws))
    frac = ok.reshape(len(xs), k).mean(axis=1)
    threshold = 1.0 if noise.nominal_only else noise.stable_fraction_threshold
    out[xs, ys] = frac >= threshold - 1e-12
    return out


# ---------------------------------------------------------------------------
# vectorised route


@functools.lru_cache(maxsize=16)
def _stack_cache(state: EnvState) -> "_StackCache":
    return _StackCache(state)


class _StackCache:
    """Per-state precomputation: contacts among placed boxes and their baseline loads."""

    def __init__(self, state: EnvState):
        placed = state.placed
        n = len(placed)
        self.n = n
        self.x0 = np.array([b.x for b in placed], dtype=float)
        self.y0 = np.array([b.y for b in placed], dtype=float)
        self.x1 = self.x0 + np.array([b.length for b in placed], dtype=float)
        self.y1 = self.y0 + np.array([b.width for b in placed], dtype=float)
        self.top = np.array([b.top for b in placed], dtype=int)
        self.rects = shapely.box(self.x0, self.y0, self.x1, self.y1) if n else np.array([])
        self.supports: list[list[tuple[int, float, np.ndarray]]] = []
        self.hull_points: list[np.ndarray] = []
        for i, b in enumerate(placed):
            contacts = []
            if b.z == 0:
                pts = np.array([[self.x0[i], self.y0[i]], [self.x1[i], self.y0[i]],
                                [self.x1[i], self.y1[i]], [self.x0[i], self.y1[i]]])
            else:
                chunks = []
                for j in range(i):
                    if self.top[j] != b.z:
                        continue
                    ox0, oy0 = max(self.x0[i], self.x0[j]), max(self.y0[i], self.y0[j])
                    ox1, oy1 = min(self.x1[i], self.x1[j]), min(self.y1[i], self.y1[j])
                    area = (ox1 - ox0) * (oy1 - oy0)
                    if ox1 > ox0 and oy1 > oy0 and area > AREA_EPS:
                        contacts.append((j, area, np.array([(ox0 + ox1) / 2, (oy0 + oy1) / 2])))
                        chunks.append([[ox0, oy0], [ox1, oy0], [ox1, oy1], [ox0, oy1]])
                pts = np.array(chunks, dtype=float).reshape(-1, 2)
            total = sum(c[1] for c in contacts)
            self.supports.append([(j, a / total, c) for j, a, c in contacts])
            self.hull_points.append(pts)
        # baseline loads of the existing stack
        self.mass = np.array([b.weight for b in placed], dtype=float)
        self.moment = np.array(
            [[b.weight * (b.x + b.length / 2), b.weight * (b.y + b.width / 2)] for b in placed], dtype=float
        ).reshape(n, 2)
        for i in range(n - 1, -1, -1):
            for j, f, c in self.supports[i]:
                self.mass[j] += self.mass[i] * f
                self.moment[j] += self.mass[i] * f * c

    def evaluate(
        self, oriented: OrientedBox, weight: float, cells: np.ndarray, rest: np.ndarray, draws: np.ndarray
    ) -> np.ndarray:
        """Per-row stability of placing ``oriented`` at cells[r] on height rest[r] under draws[r]."""
        B = len(cells)
        ok = np.ones(B, dtype=bool)
        raised = np.nonzero(rest > 0)[0]
        if len(raised) == 0:
            return ok
        cx = cells[raised, 0] + oriented.length / 2 + draws[raised, 0]
        cy = cells[raised, 1] + oriented.width / 2 + draws[raised, 1]
        corners = _rect_corners(cx, cy, oriented.length, oriented.width, draws[raised, 2])
        polys = shapely.polygons(corners)
        lo = corners.min(axis=1)
        hi = corners.max(axis=1)
        R = len(raised)
        r_rest = rest[raised]

        area = np.zeros((R, self.n))
        cent = np.zeros((R, self.n, 2))
        pt_rows, pt_xy = [], []
        for j in range(self.n):
            sel = np.nonzero(
                (r_rest == self.top[j])
                & (lo[:, 0] < self.x1[j]) & (hi[:, 0] > self.x0[j])
                & (lo[:, 1] < self.y1[j]) & (hi[:, 1] > self.y0[j])
            )[0]
            if len(sel) == 0:
                continue
            inter = shapely.intersection(polys[sel], self.rects[j])
            a = shapely.area(inter)
            keep = a > AREA_EPS
            if not keep.any():
                continue
            sel, inter, a = sel[keep], inter[keep], a[keep]
            area[sel, j] = a
            cent[sel, j] = shapely.get_coordinates(shapely.centroid(inter))
            xy, idx = shapely.get_coordinates(inter, return_index=True)
            pt_rows.append(sel[idx])
            pt_xy.append(xy)

        total = area.sum(axis=1)
        supported = total > 0
        if pt_rows:
            rows = np.concatenate(pt_rows)
            xy = np.concatenate(pt_xy)
            order = np.argsort(rows, kind="stable")
            rows, xy = rows[order], xy[order]
            counts = np.bincount(rows, minlength=R)
            P = int(counts.max())
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            pos = np.arange(len(rows)) - starts[rows]
            pts = np.zeros((R, P, 2))
            valid = np.zeros((R, P), dtype=bool)
            pts[rows, pos] = xy
            valid[rows, pos] = True
            row_ok = com_within_hull(pts, valid, np.stack([cx, cy], axis=1))
        else:
            row_ok = np.zeros(R, dtype=bool)
        row_ok &= supported

        # new box's weight flows down through its supporters
        frac = np.divide(area, total[:, None], out=np.zeros_like(area), where=supported[:, None])
        extra_m = weight * frac
        extra_mom = extra_m[..., None] * cent
        for j in range(self.n - 1, -1, -1):
            em = extra_m[:, j]
            act = np.nonzero((em > 0) & row_ok)[0]
            if len(act) == 0:
                continue
            m = self.mass[j] + em[act]
            com = (self.moment[j] + extra_mom[act, j]) / m[:, None]
            hp = self.hull_points[j]
            inside = com_within_hull(
                np.broadcast_to(hp, (len(act),) + hp.shape), np.ones((len(act), len(hp)), bool), com
            )
            row_ok[act[~inside]] = False
            for k, f, c in self.supports[j]:
                extra_m[act, k] += em[act] * f
                extra_mom[act, k] += (em[act] * f)[:, None] * c
        ok[raised] = row_ok
        return ok
