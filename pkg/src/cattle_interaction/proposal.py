"""Detections in, gated interaction proposals and network input slices out."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ._records import FormatError, read_records, write_records
from .geometry import (
    DEFAULT_IOU_BOUNDS,
    DEFAULT_MAP_RESOLUTION,
    BoundingBox,
    GeometricMap,
    InvalidBoxError,
    interaction_region,
    iou,
    rasterize_pair_map,
)

DEFAULT_MIN_CONFIDENCE = 0.7
DEFAULT_INPUT_SIZE = 100
DEFAULT_STRIDE = 5


class OutOfFrameError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    frame_id: int
    detection_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")
        if self.frame_id < 0:
            raise ValueError(f"negative frame_id: {self.frame_id}")


@dataclass(frozen=True)
class InteractionProposal:
    a: Detection
    b: Detection
    region: BoundingBox
    iou: float

    @property
    def frame_id(self) -> int:
        return self.a.frame_id

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.frame_id, self.a.detection_id, self.b.detection_id)


@dataclass(frozen=True, eq=False)
class SliceTriple:
    """Crops C1, C2 and I as float32 arrays (3, S, S) in [0, 1], plus the pair map."""

    c1: np.ndarray
    c2: np.ndarray
    i: np.ndarray
    geometric: GeometricMap

    def __eq__(self, other):
        if not isinstance(other, SliceTriple):
            return NotImplemented
        return (np.array_equal(self.c1, other.c1) and np.array_equal(self.c2, other.c2)
                and np.array_equal(self.i, other.i) and self.geometric == other.geometric)


def filter_detections(dets: Iterable[Detection],
                      min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> list[Detection]:
    """Keep detections scoring strictly above ``min_confidence``, in input order."""
    return [d for d in dets if d.confidence > min_confidence]


def generate_proposals(dets: Sequence[Detection],
                       bounds: tuple[float, float] = DEFAULT_IOU_BOUNDS) -> list[InteractionProposal]:
    lo, hi = bounds
    ordered = sorted(dets, key=lambda d: d.detection_id)
    ids = [d.detection_id for d in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("detection ids must be unique within a frame")
    proposals = []
    for a, b in itertools.combinations(ordered, 2):
        ratio = iou(a.box, b.box)
        if ratio <= 0.0:
            continue
        if lo < ratio < hi:
            proposals.append(InteractionProposal(a, b, interaction_region(a.box, b.box), ratio))
    return proposals


def _to_float_image(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {frame.shape}")
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return np.clip(frame.astype(np.float32), 0.0, 1.0)


def crop_resize(frame: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    """Clamp ``box`` to the frame, crop the covered pixels and resize bilinearly to (3, size, size)."""
    img = _to_float_image(frame)
    h, w = img.shape[:2]
    x1, y1 = max(0, math.floor(box.x1)), max(0, math.floor(box.y1))
    x2, y2 = min(w, math.ceil(box.x2)), min(h, math.ceil(box.y2))
    if x1 >= x2 or y1 >= y2:
        raise OutOfFrameError(f"box {box.as_tuple()} lies outside the {w}x{h} frame")
    crop = torch.from_numpy(np.ascontiguousarray(img[y1:y2, x1:x2].transpose(2, 0, 1)))
    out = F.interpolate(crop[None], size=(size, size), mode="bilinear", align_corners=False)
    return out[0].clamp_(0.0, 1.0).numpy()


def extract_slices(frame_image: np.ndarray, p: InteractionProposal,
                   input_size: int = DEFAULT_INPUT_SIZE,
                   map_resolution: int = DEFAULT_MAP_RESOLUTION) -> SliceTriple:
    return SliceTriple(
        c1=crop_resize(frame_image, p.a.box, input_size),
        c2=crop_resize(frame_image, p.b.box, input_size),
        i=crop_resize(frame_image, p.region, input_size),
        geometric=rasterize_pair_map(p.a.box, p.b.box, map_resolution, pair=p.key),
    )


def throttle_frames(frames: Iterable, stride: int = DEFAULT_STRIDE) -> Iterator:
    """Yield every ``stride``-th item, starting with the first."""
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    return (f for idx, f in enumerate(frames) if idx % stride == 0)


# -- file formats -----------------------------------------------------------

def frame_filename(frame_id: int) -> str:
    return f"frame_{frame_id:06d}.png"


def load_frame(frames_dir, frame_id: int) -> np.ndarray:
    path = Path(frames_dir) / frame_filename(frame_id)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_frame(frames_dir, frame_id: int, image: np.ndarray) -> Path:
    path = Path(frames_dir) / frame_filename(frame_id)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def detection_to_record(d: Detection) -> dict:
    x1, y1, x2, y2 = d.box.as_tuple()
    return {"id": d.detection_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2,
            "confidence": d.confidence}


def write_detections(path, frames: dict[int, list[Detection]]) -> None:
    write_records(path, ({"frame_id": fid, "detections": [detection_to_record(d) for d in dets]}
                         for fid, dets in sorted(frames.items())))


def read_detections(path) -> dict[int, list[Detection]]:
    """Parse a detections file into ``{frame_id: [Detection, ...]}``."""
    out: dict[int, list[Detection]] = {}
    for lineno, rec in read_records(path):
        try:
            fid = int(rec["frame_id"])
            dets = [Detection(BoundingBox(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"])),
                              float(d["confidence"]), fid, int(d["id"]))
                    for d in rec["detections"]]
        except (KeyError, TypeError, ValueError, InvalidBoxError) as exc:
            raise FormatError(f"{path}:{lineno}: bad detection record ({exc})") from None
        if fid in out:
            raise FormatError(f"{path}:{lineno}: duplicate frame_id {fid}")
        out[fid] = dets
    return out
