"""Attention-level run metrics and the files a run leaves behind.

Heatmaps are binary PGM (P5, 8-bit), min-max rescaled per token. The
header carries a ``# range <min> <max>`` comment so a heatmap can be
mapped back to attention values.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from b2b_guidance.attention import AttentionStack
from b2b_guidance.errors import ContractViolation
from b2b_guidance.guidance import TRACE_COLUMNS, GuidanceTrace
from b2b_guidance.layout import BoundingBox, LayoutSpec, rasterize_mask
from b2b_guidance.rewards import kl_divergence, normalize_masked

METRICS_SCHEMA = 1

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ObjectMetrics:
    token: str
    token_index: int
    inbox_mass_fraction: float
    centroid_offset: float


@dataclass(frozen=True)
class AttributeMetrics:
    token: str
    token_index: int
    parent_object: int
    kl: float


@dataclass(frozen=True)
class RunMetrics:
    scenario: str
    guided: bool
    objects: Tuple[ObjectMetrics, ...]
    attributes: Tuple[AttributeMetrics, ...]

    def __post_init__(self):
        for o in self.objects:
            if not 0.0 <= o.inbox_mass_fraction <= 1.0 + 1e-12:
                raise ContractViolation(f"in-box mass fraction {o.inbox_mass_fraction} outside [0, 1]")
            if o.centroid_offset < 0:
                raise ContractViolation(f"negative centroid offset {o.centroid_offset}")
        for a in self.attributes:
            if a.kl < 0:
                raise ContractViolation(f"negative KL {a.kl}")

    @property
    def mean_inbox_mass_fraction(self) -> float:
        return float(np.mean([o.inbox_mass_fraction for o in self.objects])) if self.objects else float("nan")

    @property
    def mean_centroid_offset(self) -> float:
        return float(np.mean([o.centroid_offset for o in self.objects])) if self.objects else float("nan")

    @property
    def mean_attribute_kl(self) -> float:
        return float(np.mean([a.kl for a in self.attributes])) if self.attributes else float("nan")

    def to_dict(self) -> dict:
        return {
            "schema": METRICS_SCHEMA,
            "scenario": self.scenario,
            "guided": self.guided,
            "objects": [asdict(o) for o in self.objects],
            "attributes": [asdict(a) for a in self.attributes],
        }


def inbox_mass_fraction(map_: np.ndarray, box: BoundingBox) -> float:
    map_ = np.asarray(map_, dtype=np.float64)
    mask = rasterize_mask(box, *map_.shape)
    total = map_.sum()
    if total <= 0:
        raise ContractViolation("attention map has no mass")
    return float(min(map_[mask.cells].sum() / total, 1.0))


def centroid_offset(map_: np.ndarray, box: BoundingBox) -> float:
    """Distance in cells between the attention centroid and the box centre."""
    map_ = np.asarray(map_, dtype=np.float64)
    h, w = map_.shape
    total = map_.sum()
    if total <= 0:
        raise ContractViolation("attention map has no mass")
    rows, cols = np.indices((h, w))
    row = float((rows * map_).sum() / total)
    col = float((cols * map_).sum() / total)
    cx, cy = box.center
    # cell r has its centre at (r + 0.5) / h in box coordinates
    return float(np.hypot(row - (cy * h - 0.5), col - (cx * w - 0.5)))


def compute_run_metrics(attention: AttentionStack, layout: LayoutSpec, scenario: str, guided: bool) -> RunMetrics:
    h, w = attention.grid
    objects = tuple(
        ObjectMetrics(
            token=layout.token(obj.token_index),
            token_index=obj.token_index,
            inbox_mass_fraction=inbox_mass_fraction(attention[obj.token_index], obj.box),
            centroid_offset=centroid_offset(attention[obj.token_index], obj.box),
        )
        for obj in layout.objects
    )
    attributes = []
    for attribute in layout.attributes:
        parent = layout.objects[attribute.parent_object]
        inbox = rasterize_mask(parent.box, h, w)
        p = normalize_masked(attention[attribute.token_index], inbox)
        q = normalize_masked(attention[parent.token_index], inbox)
        attributes.append(
            AttributeMetrics(
                token=layout.token(attribute.token_index),
                token_index=attribute.token_index,
                parent_object=attribute.parent_object,
                kl=max(kl_divergence(p, q), 0.0),
            )
        )
    return RunMetrics(scenario=scenario, guided=guided, objects=objects, attributes=tuple(attributes))


def heatmap_filename(token_index: int, token: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_-]", "_", token) or "token"
    return f"attn_{token_index:02d}_{safe}.pgm"


def write_pgm(path: PathLike, map_: np.ndarray) -> Path:
    map_ = np.asarray(map_, dtype=np.float64)
    if map_.ndim != 2:
        raise ContractViolation(f"heatmap must be 2-D, got shape {map_.shape}")
    low, high = float(map_.min()), float(map_.max())
    if high > low:
        pixels = np.rint((map_ - low) / (high - low) * 255.0)
    else:
        pixels = np.zeros_like(map_)
    h, w = map_.shape
    header = f"P5\n# range {low:.17g} {high:.17g}\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.write_bytes(header + pixels.astype(np.uint8).tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a heatmap written by write_pgm, restoring the original value range."""
    data = Path(path).read_bytes()
    fields: List[bytes] = []
    value_range: Optional[Tuple[float, float]] = None
    position = 0
    while len(fields) < 4:
        end = data.index(b"\n", position)
        line = data[position:end]
        position = end + 1
        if line.startswith(b"#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == b"range":
                value_range = (float(parts[1]), float(parts[2]))
            continue
        fields.extend(line.split())
    if fields[0] != b"P5":
        raise ContractViolation(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(data[position:position + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ContractViolation(f"PGM holds {pixels.size} pixels, header says {w}x{h}")
    scaled = pixels.reshape(h, w).astype(np.float64) / maxval
    if value_range is None:
        return scaled
    low, high = value_range
    return low + scaled * (high - low)


def write_heatmaps(
    directory: PathLike,
    attention: AttentionStack,
    layout: LayoutSpec,
    on_write: Optional[Callable[[Path], None]] = None,
) -> List[Path]:
    """One PGM per prompt token.

    ``on_write`` sees every path before it is written, so a caller can clean
    up after a failure part-way through the loop.
    """
    directory = Path(directory)
    written = []
    for index, token in enumerate(layout.prompt_tokens):
        path = directory / heatmap_filename(index, token)
        if on_write is not None:
            on_write(path)
        written.append(write_pgm(path, attention[index]))
    return written


def write_trace_csv(path: PathLike, trace: GuidanceTrace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in trace.rows():
            writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row.items()})
    return path


def read_trace_csv(path: PathLike) -> List[dict]:
    with Path(path).open(newline="") as handle:
        rows = list(csv.DictReader(handle))
    return [
        {key: int(value) if key in ("timestep", "backtracks") else float(value) for key, value in row.items()}
        for row in rows
    ]


def write_metrics_json(path: PathLike, metrics: RunMetrics) -> Path:
    path = Path(path)
    path.write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n")
    return path
