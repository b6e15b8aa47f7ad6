"""Deterministic 2.5-D tabletop world.

Objects are rigid prisms (boxes, cylinders, L-shaped blocks) resting on a
square table or on top of each other.  There are no dynamics: objects sit
where they are placed until a successful suction removes them.  All footprint
math is exact for axis-aligned poses (yaw restricted to quarter turns), which
keeps overlap and containment checks free of tolerance juggling.

Scenes are immutable; every mutation-like operation returns a new Scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

BOX = "box"
CYLINDER = "cylinder"
L_BLOCK = "l_block"
SHAPES = (BOX, CYLINDER, L_BLOCK)

ENV_FULLY_STACKED = "env1_fully_stacked"
ENV_HALF_STACKED = "env2_half_stacked"
ENV_HALF_STACKED_NOVEL = "env3_half_stacked_novel"
ENV_KINDS = (ENV_FULLY_STACKED, ENV_HALF_STACKED, ENV_HALF_STACKED_NOVEL)

DEFAULT_WORKSPACE_SIDE = 0.448

_QUARTER = math.pi / 2.0


class OutOfBoundsError(ValueError):
    """A queried world point lies outside the workspace."""


class PlacementError(RuntimeError):
    """Rejection sampling could not place an object ("cannot place")."""


@dataclass(frozen=True)
class SuctionGeometry:
    """Gripper geometry used by the contact and collision rules (meters)."""

    cup_radius: float = 0.010
    body_radius: float = 0.025
    contact_tolerance: float = 0.005
    descent_clearance: float = 0.005


DEFAULT_GEOMETRY = SuctionGeometry()


@dataclass(frozen=True)
class SceneObject:
    """One rigid object.

    ``footprint`` is shape-specific: (half_x, half_y) for a box, (radius,)
    for a cylinder, (half_side,) for an L-block.  The L-block occupies its
    bounding square minus the (+x, +y) quadrant in the local frame.
    ``base_z`` is the height of the object's bottom face (0 = on the table).
    """

    id: int
    shape: str
    footprint: tuple[float, ...]
    height: float
    x: float
    y: float
    yaw: float = 0.0
    base_z: float = 0.0

    @property
    def top(self) -> float:
        return self.base_z + self.height

    def bbox_half_extents(self) -> tuple[float, float]:
        if self.shape == BOX:
            hx, hy = self.footprint
            if _quarter_turns(self.yaw) % 2 == 1:
                hx, hy = hy, hx
            return hx, hy
        if self.shape == CYLINDER:
            r = self.footprint[0]
            return r, r
        h = self.footprint[0]
        return h, h


def _quarter_turns(yaw: float) -> int:
    """Number of exact quarter turns in ``yaw``; raises if yaw is not one."""
    k = round(yaw / _QUARTER)
    if abs(yaw - k * _QUARTER) > 1e-12:
        raise ValueError("only quarter-turn yaws are supported for exact footprint math")
    return k % 4


def _to_local(obj: SceneObject, x, y):
    """Rotate world offsets into the object frame (exact for quarter turns)."""
    dx = x - obj.x
    dy = y - obj.y
    k = _quarter_turns(obj.yaw)
    if k == 0:
        return dx, dy
    if k == 1:
        return dy, -dx
    if k == 2:
        return -dx, -dy
    return -dy, dx


def contains(obj: SceneObject, x, y):
    """Whether world point(s) (x, y) fall on the object footprint (inclusive).

    Accepts scalars or broadcastable numpy arrays; the same code path is used
    by point queries and by heightmap rasterization so the two agree exactly.
    """
    lx, ly = _to_local(obj, x, y)
    if obj.shape == BOX:
        hx, hy = obj.footprint
        return (np.abs(lx) <= hx) & (np.abs(ly) <= hy)
    if obj.shape == CYLINDER:
        r = obj.footprint[0]
        return lx * lx + ly * ly <= r * r
    h = obj.footprint[0]
    in_square = (np.abs(lx) <= h) & (np.abs(ly) <= h)
    in_missing_quadrant = (lx > 0) & (ly > 0)
    return in_square & ~in_missing_quadrant


def _footprint_primitives(obj: SceneObject):
    """Decompose a footprint into world-frame primitives.

    Returns a list of ("rect", x0, x1, y0, y1) and ("disc", cx, cy, r)
    entries.  Exact because yaw is restricted to quarter turns.
    """
    k = _quarter_turns(obj.yaw)
    if obj.shape == CYLINDER:
        return [("disc", obj.x, obj.y, obj.footprint[0])]
    if obj.shape == BOX:
        hx, hy = obj.footprint
        if k % 2 == 1:
            hx, hy = hy, hx
        return [("rect", obj.x - hx, obj.x + hx, obj.y - hy, obj.y + hy)]
    h = obj.footprint[0]
    # Local decomposition: bottom slab [-h,h]x[-h,0] plus left slab [-h,0]x[0,h].
    rects_local = [(-h, h, -h, 0.0), (-h, 0.0, 0.0, h)]
    out = []
    for x0, x1, y0, y1 in rects_local:
        corners = [(x0, y0), (x1, y1)]
        pts = []
        for lx, ly in corners:
            if k == 0:
                wx, wy = lx, ly
            elif k == 1:
                wx, wy = -ly, lx
            elif k == 2:
                wx, wy = -lx, -ly
            else:
                wx, wy = ly, -lx
            pts.append((obj.x + wx, obj.y + wy))
        xs = sorted(p[0] for p in pts)
        ys = sorted(p[1] for p in pts)
        out.append(("rect", xs[0], xs[1], ys[0], ys[1]))
    return out


def _point_rect_distance(px: float, py: float, x0: float, x1: float, y0: float, y1: float) -> float:
    dx = max(0.0, x0 - px, px - x1)
    dy = max(0.0, y0 - py, py - y1)
    return math.hypot(dx, dy)


def _primitive_gap(a, b) -> float:
    """Separation between two footprint primitives (0 when they touch/overlap)."""
    if a[0] == "rect" and b[0] == "rect":
        _, ax0, ax1, ay0, ay1 = a
        _, bx0, bx1, by0, by1 = b
        gx = max(0.0, bx0 - ax1, ax0 - bx1)
        gy = max(0.0, by0 - ay1, ay0 - by1)
        return math.hypot(gx, gy)
    if a[0] == "disc" and b[0] == "disc":
        _, ax, ay, ar = a
        _, bx, by, br = b
        return max(0.0, math.hypot(bx - ax, by - ay) - ar - br)
    if a[0] == "disc":
        a, b = b, a
    _, x0, x1, y0, y1 = a
    _, cx, cy, r = b
    return max(0.0, _point_rect_distance(cx, cy, x0, x1, y0, y1) - r)


def footprint_gap(a: SceneObject, b: SceneObject) -> float:
    """Minimum distance between two footprints; 0 means touching or overlapping."""
    return min(
        _primitive_gap(pa, pb)
        for pa in _footprint_primitives(a)
        for pb in _footprint_primitives(b)
    )


def point_footprint_distance(obj: SceneObject, x: float, y: float) -> float:
    """Distance from a world point to the object footprint (0 when inside)."""
    best = math.inf
    for prim in _footprint_primitives(obj):
        if prim[0] == "rect":
            _, x0, x1, y0, y1 = prim
            d = _point_rect_distance(x, y, x0, x1, y0, y1)
        else:
            _, cx, cy, r = prim
            d = max(0.0, math.hypot(cx - x, cy - y) - r)
        best = min(best, d)
    return best


def top_face_centroid(obj: SceneObject) -> tuple[float, float]:
    """World (x, y) of the centroid of the object's top face."""
    if obj.shape in (BOX, CYLINDER):
        return obj.x, obj.y
    h = obj.footprint[0]
    lx, ly = -h / 6.0, -h / 6.0
    k = _quarter_turns(obj.yaw)
    if k == 0:
        wx, wy = lx, ly
    elif k == 1:
        wx, wy = -ly, lx
    elif k == 2:
        wx, wy = -lx, -ly
    else:
        wx, wy = ly, -lx
    return obj.x + wx, obj.y + wy


def disc_on_face(obj: SceneObject, x: float, y: float, radius: float) -> bool:
    """Whether the full disc of ``radius`` at (x, y) lies on the top face."""
    lx, ly = _to_local(obj, x, y)
    if obj.shape == BOX:
        hx, hy = obj.footprint
        return abs(lx) <= hx - radius and abs(ly) <= hy - radius
    if obj.shape == CYLINDER:
        r = obj.footprint[0]
        return math.hypot(lx, ly) <= r - radius
    h = obj.footprint[0]
    if not (abs(lx) <= h - radius and abs(ly) <= h - radius):
        return False
    # Must also clear the missing (+x, +y) quadrant.
    dq = math.hypot(max(0.0, lx), max(0.0, ly))
    return dq >= radius


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    workspace_side: float = DEFAULT_WORKSPACE_SIDE
    rng_seed: int = 0

    def __len__(self) -> int:
        return len(self.objects)

    def max_top(self) -> float:
        return max((o.top for o in self.objects), default=0.0)


@dataclass(frozen=True)
class SuctionOutcome:
    success: bool
    collision: bool
    contacted_object: int | None
    suction_point_world: tuple[float, float, float]
    center_distance: float | None


def _check_in_workspace(scene: Scene, x: float, y: float) -> None:
    side = scene.workspace_side
    if not (0.0 <= x <= side and 0.0 <= y <= side):
        raise OutOfBoundsError(f"point ({x:.4f}, {y:.4f}) out of bounds for {side:.3f} m workspace")


def top_height_at(scene: Scene, x: float, y: float) -> float:
    """Height of the tallest surface covering (x, y); 0 for bare table."""
    _check_in_workspace(scene, x, y)
    best = 0.0
    for obj in scene.objects:
        if contains(obj, x, y):
            best = max(best, obj.top)
    return best


def execute_suction(
    scene: Scene,
    x: float,
    y: float,
    z: float,
    fidelity: str = "sim",
    geometry: SuctionGeometry = DEFAULT_GEOMETRY,
) -> tuple[SuctionOutcome, Scene]:
    """Attempt a vertical suction at world (x, y), cup face stopping at height z.

    Order of evaluation: descent collision first, then contact, then the
    fidelity-specific seal rule.  ``sim`` succeeds on any cup/top-face overlap
    (edge suction passes); ``real`` requires the full cup disc on the face.
    On success the contacted object is removed from the returned scene;
    otherwise the scene is returned unchanged.
    """
    _check_in_workspace(scene, x, y)
    if z < 0:
        raise ValueError("suction height must be non-negative")
    if fidelity not in ("sim", "real"):
        raise ValueError(f"unknown fidelity {fidelity!r}")

    point = (x, y, z)

    # Anything taller than the descent corridor within the gripper body radius
    # stops the motion before contact.
    limit = z + geometry.descent_clearance
    for obj in scene.objects:
        if obj.top > limit and point_footprint_distance(obj, x, y) < geometry.body_radius:
            return SuctionOutcome(False, True, None, point, None), scene

    # Contact: topmost object whose top face holds (x, y) at cup height.
    contacted = None
    for obj in scene.objects:
        if abs(obj.top - z) <= geometry.contact_tolerance and bool(contains(obj, x, y)):
            if contacted is None or obj.top > contacted.top:
                contacted = obj
    if contacted is None:
        return SuctionOutcome(False, False, None, point, None), scene

    cx, cy = top_face_centroid(contacted)
    psi = math.hypot(x - cx, y - cy)

    if fidelity == "sim":
        # The cup center rests on the face, so some overlap always exists.
        sealed = True
    else:
        sealed = disc_on_face(contacted, x, y, geometry.cup_radius)

    if not sealed:
        return SuctionOutcome(False, False, contacted.id, point, psi), scene

    remaining = tuple(o for o in scene.objects if o.id != contacted.id)
    return (
        SuctionOutcome(True, False, contacted.id, point, psi),
        replace(scene, objects=remaining),
    )


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------


def _place(
    rng: np.random.Generator,
    existing: list[SceneObject],
    proto: SceneObject,
    workspace_side: float,
    min_gap: float,
    max_attempts: int = 4000,
) -> SceneObject:
    """Rejection-sample a pose for ``proto`` clear of ``existing`` footprints."""
    bx, by = proto.bbox_half_extents()
    wall = 0.002
    lo_x, hi_x = bx + wall, workspace_side - bx - wall
    lo_y, hi_y = by + wall, workspace_side - by - wall
    if lo_x >= hi_x or lo_y >= hi_y:
        raise PlacementError("cannot place: object larger than workspace")
    for _ in range(max_attempts):
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        candidate = replace(proto, x=x, y=y)
        if all(footprint_gap(candidate, o) >= min_gap for o in existing):
            return candidate
    raise PlacementError("cannot place: workspace too crowded after rejection sampling")


def spawn_scattered(
    n: int,
    size: float,
    seed: int,
    workspace_side: float = DEFAULT_WORKSPACE_SIDE,
    min_gap: float = 0.004,
) -> Scene:
    """Scatter ``n`` cubes of edge ``size`` uniformly over the table."""
    if n < 0:
        raise ValueError("object count must be non-negative")
    if not (0 < size <= workspace_side / 2):
        raise ValueError("object size must be positive and at most half the workspace side")
    rng = np.random.default_rng(seed)
    half = size / 2.0
    objects: list[SceneObject] = []
    for i in range(n):
        proto = SceneObject(i, BOX, (half, half), size, 0.0, 0.0)
        objects.append(_place(rng, objects, proto, workspace_side, min_gap))
    return Scene(tuple(objects), workspace_side, seed)


def _stacked_groups(
    rng: np.random.Generator,
    n_pairs: int,
    size: float,
    offset: float,
    workspace_side: float,
    group_gap: float,
    start_id: int = 0,
) -> list[SceneObject]:
    """Pairs of cubes, the upper shifted by ``offset`` along a random axis."""
    half = size / 2.0
    objects: list[SceneObject] = []
    placed_groups: list[SceneObject] = []  # lower cubes, padded for group spacing
    for i in range(n_pairs):
        # Pad the bbox by the overhang so the shifted upper cube stays inside
        # bounds and group separation is measured between whole pairs.
        proto = SceneObject(-1, BOX, (half + offset, half + offset), size, 0.0, 0.0)
        anchor = _place(rng, placed_groups, proto, workspace_side, group_gap)
        placed_groups.append(anchor)
        lower = SceneObject(start_id + 2 * i, BOX, (half, half), size, anchor.x, anchor.y)
        direction = rng.integers(0, 4)
        dx, dy = [(offset, 0.0), (-offset, 0.0), (0.0, offset), (0.0, -offset)][direction]
        upper = SceneObject(
            start_id + 2 * i + 1,
            BOX,
            (half, half),
            size,
            anchor.x + dx,
            anchor.y + dy,
            base_z=size,
        )
        objects.extend([lower, upper])
    return objects


def spawn_environment(
    kind: str,
    seed: int,
    workspace_side: float = DEFAULT_WORKSPACE_SIDE,
    size: float = 0.05,
    overlap_fraction: float = 0.5,
    n_groups: int = 4,
    group_gap: float = 0.06,
) -> Scene:
    """Build one of the three structured evaluation layouts.

    env1: towers of two aligned cubes.  env2: half-stacked pairs whose upper
    cube overlaps the lower by ``overlap_fraction``.  env3: half-stacked pairs
    plus cylinders and L-blocks of differing heights.
    """
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment kind {kind!r}; valid: {', '.join(ENV_KINDS)}")
    master = np.random.default_rng(seed)
    last_error: PlacementError | None = None
    for _ in range(20):  # retry the whole layout on a packing dead-end
        rng = np.random.default_rng(master.integers(0, 2**63 - 1))
        try:
            objects = _build_environment(kind, rng, workspace_side, size, overlap_fraction, n_groups, group_gap)
        except PlacementError as exc:
            last_error = exc
            continue
        return Scene(tuple(objects), workspace_side, seed)
    raise last_error


def _build_environment(
    kind: str,
    rng: np.random.Generator,
    workspace_side: float,
    size: float,
    overlap_fraction: float,
    n_groups: int,
    group_gap: float,
) -> list[SceneObject]:
    half = size / 2.0
    if kind == ENV_FULLY_STACKED:
        objects: list[SceneObject] = []
        anchors: list[SceneObject] = []
        for i in range(n_groups):
            proto = SceneObject(-1, BOX, (half, half), size, 0.0, 0.0)
            anchor = _place(rng, anchors, proto, workspace_side, group_gap)
            anchors.append(anchor)
            objects.append(SceneObject(2 * i, BOX, (half, half), size, anchor.x, anchor.y))
            objects.append(
                SceneObject(2 * i + 1, BOX, (half, half), size, anchor.x, anchor.y, base_z=size)
            )
        return objects

    offset = (1.0 - overlap_fraction) * size
    if kind == ENV_HALF_STACKED:
        return _stacked_groups(rng, n_groups, size, offset, workspace_side, group_gap)

    # env3: fewer pairs, plus novel shapes of differing heights.
    n_pairs = max(1, n_groups - 1)
    objects = _stacked_groups(rng, n_pairs, size, offset, workspace_side, group_gap)
    next_id = 2 * n_pairs
    blockers = list(objects)
    for _ in range(2):
        radius = rng.uniform(0.022, 0.032)
        height = rng.uniform(0.03, 0.08)
        proto = SceneObject(next_id, CYLINDER, (radius,), height, 0.0, 0.0)
        placed = _place(rng, blockers, proto, workspace_side, group_gap)
        objects.append(placed)
        blockers.append(placed)
        next_id += 1
    for _ in range(2):
        half_side = rng.uniform(0.030, 0.038)
        height = rng.uniform(0.03, 0.06)
        yaw = float(rng.integers(0, 4)) * _QUARTER
        proto = SceneObject(next_id, L_BLOCK, (half_side,), height, 0.0, 0.0, yaw=yaw)
        placed = _place(rng, blockers, proto, workspace_side, group_gap)
        objects.append(placed)
        blockers.append(placed)
        next_id += 1
    return objects


def reposition(
    scene: Scene,
    n: int,
    seed: int,
    kind: str | None = None,
    size: float = 0.05,
) -> Scene:
    """Respawn a fresh set of objects (called when the workspace runs empty)."""
    if kind is None:
        return spawn_scattered(n, size, seed, workspace_side=scene.workspace_side)
    return spawn_environment(kind, seed, workspace_side=scene.workspace_side, size=size)


def validate_scene(scene: Scene, tol: float = 1e-9) -> None:
    """Check structural invariants; raises AssertionError on violation."""
    side = scene.workspace_side
    for obj in scene.objects:
        assert all(f > 0 for f in obj.footprint), "footprint extents must be positive"
        assert obj.height > 0, "height must be positive"
        assert obj.base_z >= 0, "base_z must be non-negative"
        assert 0.0 <= obj.x <= side and 0.0 <= obj.y <= side, "pose outside workspace"
        if obj.base_z > 0:
            supported = any(
                abs(o.top - obj.base_z) <= tol and footprint_gap(o, obj) == 0.0
                for o in scene.objects
                if o.id != obj.id
            )
            assert supported, f"object {obj.id} floats at base_z={obj.base_z}"
    objs = scene.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if abs(objs[i].base_z - objs[j].base_z) <= tol:
                assert footprint_gap(objs[i], objs[j]) > 0.0, (
                    f"objects {objs[i].id} and {objs[j].id} interpenetrate"
                )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scene_to_json(scene: Scene) -> str:
    doc = {
        "workspace_side": scene.workspace_side,
        "rng_seed": scene.rng_seed,
        "objects": [
            {
                "id": o.id,
                "shape": o.shape,
                "footprint": list(o.footprint),
                "height": o.height,
                "x": o.x,
                "y": o.y,
                "yaw": o.yaw,
                "base_z": o.base_z,
            }
            for o in scene.objects
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def scene_from_json(text: str) -> Scene:
    doc = json.loads(text)
    objects = tuple(
        SceneObject(
            id=int(entry["id"]),
            shape=str(entry["shape"]),
            footprint=tuple(float(v) for v in entry["footprint"]),
            height=float(entry["height"]),
            x=float(entry["x"]),
            y=float(entry["y"]),
            yaw=float(entry.get("yaw", 0.0)),
            base_z=float(entry.get("base_z", 0.0)),
        )
        for entry in doc["objects"]
    )
    for obj in objects:
        if obj.shape not in SHAPES:
            raise ValueError(f"unknown shape {obj.shape!r}")
    return Scene(objects, float(doc["workspace_side"]), int(doc.get("rng_seed", 0)))
