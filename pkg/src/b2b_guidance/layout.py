"""Layout documents, box rasterization and sliding boxes.

A layout names the prompt tokens, the bounding box of every object token and
the parent object of every attribute token. Boxes live on the unit square of
the attention grid and are rasterized by the cell-centre rule: cell (r, c) is
inside a box iff its centre ((c + 0.5) / w, (r + 0.5) / h) lies in the
half-open box [x0, x1) x [y0, y1).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from b2b_guidance.errors import ContractViolation, LayoutParseError, LayoutValidationError
from b2b_guidance.logging_config import get_logger

logger = get_logger()

SLIDING_OFFSET_RANGE = (0.10, 0.20)


def _box_violations(x0: float, y0: float, x1: float, y1: float, where: str = "box") -> List[str]:
    violations = []
    for name, value in (("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)):
        if not math.isfinite(value) or value < 0.0 or value > 1.0:
            violations.append(f"{where}.{name}={value} is outside [0, 1]")
    if not x0 < x1:
        violations.append(f"{where} has x0={x0} >= x1={x1} (zero-area box)")
    if not y0 < y1:
        violations.append(f"{where} has y0={y0} >= y1={y1} (zero-area box)")
    return violations


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized grid coordinates, x along columns."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        violations = _box_violations(self.x0, self.y0, self.x1, self.y1)
        if violations:
            raise LayoutValidationError(violations)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> Tuple[float, float]:
        """Centre as (x, y)."""
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


class GridMask:
    """Immutable boolean h x w grid."""

    __slots__ = ("_cells",)

    def __init__(self, cells: np.ndarray):
        array = np.array(cells, dtype=bool, copy=True)
        if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
            raise ContractViolation(f"grid mask must be a non-empty 2-D array, got shape {array.shape}")
        array.setflags(write=False)
        self._cells = array

    @classmethod
    def empty(cls, h: int, w: int) -> "GridMask":
        return cls(np.zeros((h, w), dtype=bool))

    @property
    def cells(self) -> np.ndarray:
        return self._cells

    @property
    def height(self) -> int:
        return self._cells.shape[0]

    @property
    def width(self) -> int:
        return self._cells.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._cells.shape

    @property
    def count(self) -> int:
        return int(self._cells.sum())

    def complement(self) -> "GridMask":
        return GridMask(~self._cells)

    def as_float(self) -> np.ndarray:
        return self._cells.astype(np.float64)

    def shifted(self, dx: int, dy: int) -> "GridMask":
        """Translate by whole cells; cells pushed past the border are dropped."""
        h, w = self.shape
        out = np.zeros((h, w), dtype=bool)
        src_r = slice(max(0, -dy), min(h, h - dy))
        dst_r = slice(max(0, dy), min(h, h + dy))
        src_c = slice(max(0, -dx), min(w, w - dx))
        dst_c = slice(max(0, dx), min(w, w + dx))
        if src_r.start < src_r.stop and src_c.start < src_c.stop:
            out[dst_r, dst_c] = self._cells[src_r, src_c]
        return GridMask(out)

    def extent(self) -> Optional[Tuple[int, int, int, int]]:
        """Bounding (row_min, row_max, col_min, col_max) of set cells, inclusive."""
        rows = np.flatnonzero(self._cells.any(axis=1))
        cols = np.flatnonzero(self._cells.any(axis=0))
        if rows.size == 0:
            return None
        return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._cells, other._cells))

    __hash__ = None

    def __repr__(self) -> str:
        return f"GridMask(shape={self.shape}, count={self.count})"


@dataclass(frozen=True)
class LayoutObject:
    token_index: int
    box: BoundingBox


@dataclass(frozen=True)
class LayoutAttribute:
    token_index: int
    parent_object: int


@dataclass(frozen=True)
class LayoutSpec:
    """Prompt tokens with object boxes and attribute-to-object links."""

    prompt_tokens: Tuple[str, ...]
    objects: Tuple[LayoutObject, ...] = ()
    attributes: Tuple[LayoutAttribute, ...] = ()
    prompt: str = ""

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        violations = _layout_violations(
            self.n_tokens,
            [o.token_index for o in self.objects],
            [(a.token_index, a.parent_object) for a in self.attributes],
        )
        if violations:
            raise LayoutValidationError(violations)

    @property
    def n_tokens(self) -> int:
        return len(self.prompt_tokens)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def token(self, index: int) -> str:
        return self.prompt_tokens[index]

    def to_document(self) -> dict:
        return {
            "prompt": self.prompt,
            "tokens": list(self.prompt_tokens),
            "objects": [
                {"token_index": o.token_index, "box": [o.box.x0, o.box.y0, o.box.x1, o.box.y1]}
                for o in self.objects
            ],
            "attributes": [
                {"token_index": a.token_index, "parent_object": a.parent_object}
                for a in self.attributes
            ],
        }


def _layout_violations(
    n_tokens: int,
    object_tokens: Sequence[int],
    attributes: Sequence[Tuple[int, int]],
) -> List[str]:
    """Index violations of a layout given as (token_index, parent_object) attribute pairs."""
    violations = []
    seen = {}
    entries = [("objects", i, index) for i, index in enumerate(object_tokens)]
    entries += [("attributes", j, index) for j, (index, _) in enumerate(attributes)]
    for group, position, index in entries:
        where = f"{group}.{position}.token_index"
        if index < 0 or index >= n_tokens:
            violations.append(f"{where}={index} is out of range for {n_tokens} tokens")
        if index in seen:
            violations.append(f"{where}={index} duplicates {seen[index]}")
        else:
            seen[index] = where
    n_objects = len(object_tokens)
    if n_objects + len(attributes) > n_tokens:
        violations.append(f"{n_objects} objects + {len(attributes)} attributes exceed {n_tokens} tokens")
    for j, (_, parent) in enumerate(attributes):
        if parent < 0 or parent >= n_objects:
            violations.append(
                f"attributes.{j}.parent_object={parent} is not a valid object index ({n_objects} objects)"
            )
    return violations


class _ObjectDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    token_index: int
    box: Tuple[float, float, float, float]


class _AttributeDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    token_index: int
    parent_object: int


class LayoutDocument(BaseModel):
    """Wire schema of a layout document."""

    model_config = ConfigDict(extra="forbid")

    prompt: str = ""
    tokens: List[str]
    objects: List[_ObjectDocument] = Field(default_factory=list)
    attributes: List[_AttributeDocument] = Field(default_factory=list)


def parse_layout(text: Union[str, bytes]) -> LayoutSpec:
    """Parse and validate a JSON layout document.

    Raises:
        LayoutParseError: malformed JSON or a field of the wrong shape/type.
        LayoutValidationError: well-formed but violating invariants; every
            violation is listed.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            logger.error("Layout document rejected", field="document", error=str(e))
            raise LayoutParseError("document", f"not valid UTF-8 ({e.reason} at byte {e.start})") from e
    if text.startswith("\ufeff"):
        raise LayoutParseError("document", "byte-order mark is not allowed")
    try:
        document = LayoutDocument.model_validate_json(text)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "document"
        logger.error("Layout document rejected", field=field, error=first["msg"])
        raise LayoutParseError(field, first["msg"]) from e

    # boxes and indices are checked together so one error lists every problem
    violations = []
    for i, entry in enumerate(document.objects):
        violations.extend(_box_violations(*entry.box, where=f"objects.{i}.box"))
    violations.extend(_layout_violations(
        len(document.tokens),
        [o.token_index for o in document.objects],
        [(a.token_index, a.parent_object) for a in document.attributes],
    ))
    if violations:
        logger.error("Layout document invalid", violations=len(violations))
        raise LayoutValidationError(violations)

    return LayoutSpec(
        prompt_tokens=tuple(document.tokens),
        objects=tuple(LayoutObject(o.token_index, BoundingBox(*o.box)) for o in document.objects),
        attributes=tuple(LayoutAttribute(a.token_index, a.parent_object) for a in document.attributes),
        prompt=document.prompt,
    )


def dump_layout(layout: LayoutSpec) -> str:
    return json.dumps(layout.to_document(), indent=2)


def rasterize_mask(box: BoundingBox, h: int, w: int) -> GridMask:
    """Rasterize a box with the cell-centre rule.

    A box too small to contain any cell centre snaps to the single cell that
    contains the box centre, so the mask is never empty.
    """
    if h < 1 or w < 1:
        raise ContractViolation(f"grid must be at least 1x1, got {h}x{w}")
    centers_x = (np.arange(w) + 0.5) / w
    centers_y = (np.arange(h) + 0.5) / h
    inside_x = (centers_x >= box.x0) & (centers_x < box.x1)
    inside_y = (centers_y >= box.y0) & (centers_y < box.y1)
    cells = np.outer(inside_y, inside_x)
    if not cells.any():
        cx, cy = box.center
        col = min(max(int(math.floor(cx * w)), 0), w - 1)
        row = min(max(int(math.floor(cy * h)), 0), h - 1)
        cells[row, col] = True
    return GridMask(cells)


@dataclass(frozen=True)
class SlidingBoxes:
    """Sliding masks of one object with the cell offsets (dx, dy) that produced them."""

    masks: Tuple[GridMask, ...]
    offsets: Tuple[Tuple[int, int], ...]
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, k: int) -> GridMask:
        return self.masks[k]


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _clamp_shift(want: int, low: int, high: int) -> int:
    return min(max(want, low), high)


def sample_sliding_boxes(
    box: BoundingBox,
    n: int,
    h: int,
    w: int,
    rng: np.random.Generator,
    offset_range: Sequence[float] = SLIDING_OFFSET_RANGE,
) -> SlidingBoxes:
    """Sample ``n`` translates of the rasterized main box.

    Offset magnitudes per axis are uniform in ``offset_range`` times
    min(h, w), rounded half-up with a floor of one cell, with an independent
    random sign per axis. Offsets are clamped so the translate stays on the
    grid; when clamping zeroes both axes the signs are flipped. A box that
    cannot move at all yields the unshifted mask and ``degenerate=True``.
    """
    if n < 1:
        raise ContractViolation(f"number of sliding boxes must be >= 1, got {n}")
    main = rasterize_mask(box, h, w)
    row_min, row_max, col_min, col_max = main.extent()
    # shifts that keep the whole mask on the grid
    x_low, x_high = -col_min, w - 1 - col_max
    y_low, y_high = -row_min, h - 1 - row_max
    lo, hi = offset_range[0] * min(h, w), offset_range[1] * min(h, w)

    masks, offsets = [], []
    degenerate = False
    for _ in range(n):
        mag_x = max(1, _round_half_up(rng.uniform(lo, hi)))
        mag_y = max(1, _round_half_up(rng.uniform(lo, hi)))
        sign_x = 1 if rng.random() < 0.5 else -1
        sign_y = 1 if rng.random() < 0.5 else -1
        dx = _clamp_shift(sign_x * mag_x, x_low, x_high)
        dy = _clamp_shift(sign_y * mag_y, y_low, y_high)
        if dx == 0 and dy == 0:
            # pinned against both borders; try the opposite direction
            dx = _clamp_shift(-sign_x * mag_x, x_low, x_high)
            dy = _clamp_shift(-sign_y * mag_y, y_low, y_high)
        if dx == 0 and dy == 0:
            degenerate = True
        masks.append(main.shifted(dx, dy))
        offsets.append((dx, dy))

    if degenerate:
        logger.warning("Sliding box cannot move on this grid", grid=[h, w], box=[box.x0, box.y0, box.x1, box.y1])
    return SlidingBoxes(masks=tuple(masks), offsets=tuple(offsets), degenerate=degenerate)
