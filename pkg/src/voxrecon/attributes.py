"""Structured caption attributes for synthetic stimuli."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

SHAPES = ("circle", "square", "triangle", "bar")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "black")
PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.15, 0.25, 0.90),
    (0.95, 0.90, 0.15),
    (0.85, 0.20, 0.85),
    (0.15, 0.85, 0.85),
    (0.97, 0.97, 0.97),
    (0.05, 0.05, 0.05),
)
GRID = 4
SCALES = ("small", "large")
BACKGROUNDS = ("plain", "stripes", "checker", "ramp")

# field name -> number of values, in flat-index order (last field varies fastest)
FIELDS = (
    ("shape_id", len(SHAPES)),
    ("color_id", len(COLORS)),
    ("row", GRID),
    ("col", GRID),
    ("scale", len(SCALES)),
    ("background_id", len(BACKGROUNDS)),
)
GRID_SIZE = math.prod(n for _, n in FIELDS)


class UnknownAttributeError(ValueError):
    """Unknown or out-of-range attribute id."""


@dataclass(frozen=True)
class AttributeVector:
    shape_id: int
    color_id: int
    row: int
    col: int
    scale: int
    background_id: int

    def __post_init__(self):
        for name, n in FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < n:
                raise UnknownAttributeError(f"{name}={v!r} outside [0, {n})")

    @property
    def index(self) -> int:
        idx = 0
        for name, n in FIELDS:
            idx = idx * n + getattr(self, name)
        return idx

    @classmethod
    def from_index(cls, index: int) -> "AttributeVector":
        if not 0 <= index < GRID_SIZE:
            raise UnknownAttributeError(f"attribute index {index} outside [0, {GRID_SIZE})")
        vals = {}
        for name, n in reversed(FIELDS):
            index, vals[name] = divmod(index, n)
        return cls(**vals)

    def to_dict(self) -> dict:
        return asdict(self)

    def caption(self) -> str:
        return (f"a {SCALES[self.scale]} {COLORS[self.color_id]} {SHAPES[self.shape_id]} "
                f"at row {self.row} col {self.col} on a {BACKGROUNDS[self.background_id]} background")
