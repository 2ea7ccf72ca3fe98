"""Layouts, scenes and object occupancies of the toy top-down world."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

SHAPES = ("rect", "ellipse", "triangle")

# One hue family per class; instances jitter around it.
CLASS_HUES = (0.0, 0.08, 0.16, 0.33, 0.5, 0.62, 0.75, 0.88)


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    label: int
    x: float
    y: float
    theta: float
    size: float
    height: float
    color: tuple[float, float, float]

    @property
    def shape(self) -> str:
        return SHAPES[self.label % len(SHAPES)]

    @property
    def occupancy(self) -> tuple[int, float, float]:
        """Instance identity together with its physical location."""
        return (self.id, round(self.x, 6), round(self.y, 6))

    def moved_to(self, x: float, y: float) -> ObjectInstance:
        return ObjectInstance(self.id, self.label, x, y, self.theta, self.size, self.height, self.color)

    def footprint(self) -> np.ndarray:
        """Convex footprint polygon in world coordinates, [N, 2]."""
        if self.shape == "rect":
            local = np.array([[-1, -0.7], [1, -0.7], [1, 0.7], [-1, 0.7]], dtype=np.float64)
        elif self.shape == "triangle":
            a = np.array([math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3])
            local = np.stack([np.cos(a), np.sin(a)], axis=1)
        else:
            a = np.linspace(0.0, 2 * math.pi, 24, endpoint=False)
            local = np.stack([np.cos(a), 0.75 * np.sin(a)], axis=1)
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return (local * (self.size / 2)) @ rot.T + np.array([self.x, self.y])

    def to_json(self) -> dict:
        d = asdict(self)
        d["color"] = list(self.color)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ObjectInstance:
        return cls(**{**d, "color": tuple(d["color"])})


@dataclass(frozen=True)
class Wall:
    """Static layout block; taller than any object, so it can occlude them."""

    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    def footprint(self) -> np.ndarray:
        return np.array([[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]])


@dataclass(frozen=True)
class Illumination:
    brightness: float = 1.0
    light_dir: tuple[float, float] = (0.0, 0.0)


@dataclass
class Layout:
    id: int
    size: float
    walls: list[Wall]
    slots: list[tuple[float, float]]
    texture_seed: int
    wall_color: tuple[float, float, float] = (0.55, 0.55, 0.6)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "size": self.size,
            "walls": [asdict(w) for w in self.walls],
            "slots": [list(s) for s in self.slots],
            "texture_seed": self.texture_seed,
            "wall_color": list(self.wall_color),
        }

    @classmethod
    def from_json(cls, d: dict) -> Layout:
        return cls(
            id=d["id"],
            size=d["size"],
            walls=[Wall(**w) for w in d["walls"]],
            slots=[tuple(s) for s in d["slots"]],
            texture_seed=d["texture_seed"],
            wall_color=tuple(d["wall_color"]),
        )


@dataclass
class Scene:
    layout_id: int
    objects: list[ObjectInstance]
    illumination: Illumination = field(default_factory=Illumination)

    def __post_init__(self) -> None:
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique within a scene")

    def to_json(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "objects": [o.to_json() for o in self.objects],
            "illumination": {"brightness": self.illumination.brightness, "light_dir": list(self.illumination.light_dir)},
        }

    @classmethod
    def from_json(cls, d: dict) -> Scene:
        il = d["illumination"]
        return cls(
            layout_id=d["layout_id"],
            objects=[ObjectInstance.from_json(o) for o in d["objects"]],
            illumination=Illumination(il["brightness"], tuple(il["light_dir"])),
        )


@dataclass
class ChangeSet:
    appeared: list[ObjectInstance]
    disappeared: list[ObjectInstance]

    @property
    def changed(self) -> list[ObjectInstance]:
        return self.appeared + self.disappeared

    def __len__(self) -> int:
        return len(self.appeared) + len(self.disappeared)


def symmetric_difference(ref: Scene, query: Scene) -> ChangeSet:
    """Occupancy-level difference; a relocated instance counts once each way."""
    if ref.layout_id != query.layout_id:
        raise ValueError(f"layout mismatch: {ref.layout_id} vs {query.layout_id}")
    ref_occ = {o.occupancy for o in ref.objects}
    query_occ = {o.occupancy for o in query.objects}
    return ChangeSet(
        appeared=[o for o in query.objects if o.occupancy not in ref_occ],
        disappeared=[o for o in ref.objects if o.occupancy not in query_occ],
    )


def make_pairs(n: int) -> list[tuple[int, int]]:
    """Directed scene pairs along the fixed cycle 0->1, ..., (n-1)->0."""
    if n < 2:
        raise ValueError("need at least two scenes per layout")
    return [(i, (i + 1) % n) for i in range(n)]


def feasible_counts(counts: list[int]) -> bool:
    """Whether per-transition change counts around a cycle are realizable.

    Every occupancy toggles an even number of times around the cycle; using
    exactly two toggles each, the counts are the degree sequence of a loopless
    multigraph on the transitions.
    """
    total = sum(counts)
    return total % 2 == 0 and 2 * max(counts, default=0) <= total


def repair_counts(counts: list[int], bounds: list[tuple[int, int]]) -> list[int] | None:
    """Nudge counts inside their bin bounds until feasible; None if stuck."""
    c = list(counts)
    for _ in range(4 * sum(hi for _, hi in bounds) + 8):
        if feasible_counts(c):
            return c
        top = max(range(len(c)), key=lambda i: c[i])
        if 2 * c[top] > sum(c):
            grow = [i for i in range(len(c)) if i != top and c[i] < bounds[i][1]]
            if grow:
                c[min(grow, key=lambda i: c[i])] += 1
            elif c[top] > bounds[top][0]:
                c[top] -= 1
            else:
                return None
            continue
        # odd total: move one element by one, preferring a step that keeps balance
        for i in sorted(range(len(c)), key=lambda i: c[i]):
            if c[i] < bounds[i][1]:
                c[i] += 1
                break
            if c[i] > bounds[i][0] and 2 * max(c[j] for j in range(len(c)) if j != i) <= sum(c) - 1:
                c[i] -= 1
                break
        else:
            return None
    return c if feasible_counts(c) else None


def toggle_edges(counts: list[int]) -> list[tuple[int, int]]:
    """Decompose feasible counts into transition pairs (i, j), i < j."""
    rem = list(counts)
    edges = []
    while sum(rem):
        order = sorted(range(len(rem)), key=lambda i: (-rem[i], i))
        a, b = order[0], order[1]
        if rem[b] == 0:
            raise ValueError(f"infeasible change counts {counts}")
        rem[a] -= 1
        rem[b] -= 1
        edges.append((min(a, b), max(a, b)))
    return edges


def present_in(edge: tuple[int, int], scene: int) -> bool:
    """An occupancy toggled at transitions i and j lives in scenes i+1..j."""
    i, j = edge
    return i < scene <= j


def random_color(rng: np.random.Generator, label: int) -> tuple[float, float, float]:
    import colorsys

    hue = (CLASS_HUES[label % len(CLASS_HUES)] + rng.uniform(-0.03, 0.03)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 0.95), rng.uniform(0.7, 0.95))
    return (round(r, 4), round(g, 4), round(b, 4))


def make_layout(layout_id: int, rng: np.random.Generator, size: float = 2.4, slot_pitch: float = 0.34,
                n_walls: tuple[int, int] = (1, 3), wall_height: float = 0.45) -> Layout:
    walls = []
    for _ in range(int(rng.integers(n_walls[0], n_walls[1] + 1))):
        horizontal = rng.random() < 0.5
        length = rng.uniform(0.4, 0.9)
        thick = rng.uniform(0.06, 0.1)
        cx, cy = rng.uniform(0.3, size - 0.3, size=2)
        w, h = (length, thick) if horizontal else (thick, length)
        walls.append(Wall(round(cx - w / 2, 4), round(cy - h / 2, 4), round(cx + w / 2, 4), round(cy + h / 2, 4), wall_height))
    slots = []
    n = int(size // slot_pitch)
    offset = (size - (n - 1) * slot_pitch) / 2
    for gy in range(n):
        for gx in range(n):
            x = offset + gx * slot_pitch + rng.uniform(-0.03, 0.03)
            y = offset + gy * slot_pitch + rng.uniform(-0.03, 0.03)
            clear = all(
                x < wl.x0 - slot_pitch / 2 or x > wl.x1 + slot_pitch / 2
                or y < wl.y0 - slot_pitch / 2 or y > wl.y1 + slot_pitch / 2
                for wl in walls
            )
            if clear:
                slots.append((round(x, 4), round(y, 4)))
    wall_color = tuple(round(v, 4) for v in rng.uniform(0.45, 0.65, size=3))
    return Layout(layout_id, size, walls, slots, int(rng.integers(2**31)), wall_color)


def make_scenes(layout: Layout, counts: list[int], n_static: int, rng: np.random.Generator,
                relocate_prob: float = 0.3, size_range: tuple[float, float] = (0.16, 0.28),
                n_labels: int = 8) -> list[Scene]:
    """Build one scene per cycle position so pair i -> i+1 has counts[i] changes."""
    n = len(counts)
    edges = toggle_edges(counts)
    # relocations consume two identical edges: same instance at two slots
    groups: list[list[tuple[int, int]]] = []
    pending = sorted(edges)
    while pending:
        e = pending.pop(0)
        if e in pending and rng.random() < relocate_prob:
            pending.remove(e)
            groups.append([e, e])
        else:
            groups.append([e])
    needed = n_static + len(edges)
    if needed > len(layout.slots):
        raise ValueError(f"layout {layout.id}: {needed} occupancies requested but only {len(layout.slots)} slots")
    slot_order = rng.permutation(len(layout.slots))
    cursor = 0
    per_scene: list[list[ObjectInstance]] = [[] for _ in range(n)]
    next_id = 0

    def new_instance(slot: int) -> ObjectInstance:
        nonlocal next_id
        label = int(rng.integers(n_labels))
        x, y = layout.slots[slot]
        obj = ObjectInstance(
            id=next_id, label=label, x=x, y=y,
            theta=round(float(rng.uniform(0, math.pi)), 4),
            size=round(float(rng.uniform(*size_range)), 4),
            height=round(float(rng.uniform(0.05, 0.15)), 4),
            color=random_color(rng, label),
        )
        next_id += 1
        return obj

    for _ in range(n_static):
        obj = new_instance(int(slot_order[cursor]))
        cursor += 1
        for s in range(n):
            per_scene[s].append(obj)
    for group in groups:
        obj = new_instance(int(slot_order[cursor]))
        cursor += 1
        if len(group) == 2:
            x2, y2 = layout.slots[int(slot_order[cursor])]
            cursor += 1
            moved = obj.moved_to(x2, y2)
            for s in range(n):
                per_scene[s].append(obj if present_in(group[0], s) else moved)
        else:
            for s in range(n):
                if present_in(group[0], s):
                    per_scene[s].append(obj)
    return [Scene(layout.id, sorted(objs, key=lambda o: o.id)) for objs in per_scene]
