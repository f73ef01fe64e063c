"""Deterministic synthetic herd scenes with detections and labels.

Each individual action is rendered as a coloured shape motif (with
``color_mode="random"`` only the shape carries the action); each interaction
class places its two agents with a fixed relative pose whose IoU falls inside
the proposal gate. Solitary agents never touch anything else, so the only gated
pairs in a frame are the labelled interactions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from ._records import FORMAT_VERSION, FormatError, read_records, write_records
from .geometry import DEFAULT_IOU_BOUNDS, BoundingBox, InvalidBoxError, iou, passes_interaction_threshold
from .proposal import Detection, frame_filename, load_frame, read_detections, save_frame, write_detections
from .semantic_prior import ClassCatalog

# Dominant-channel palette; index i is used for action i.
ACTION_COLORS = (
    (40, 200, 40),
    (40, 60, 220),
    (220, 40, 40),
    (230, 210, 30),
    (200, 40, 200),
    (30, 200, 200),
)
ACTION_SHAPES = ("stripes", "rectangle", "ellipse", "triangle", "diamond", "cross")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class InteractionTemplate:
    """Relative pose of agent b w.r.t. agent a plus weighted action pairs (a_label, b_label, weight)."""

    interaction: str
    offset: tuple[float, float]
    action_pairs: tuple[tuple[str, str, float], ...]


DEFAULT_TEMPLATES = (
    InteractionTemplate("mounting", (0.1, -0.5), (("standing", "riding", 1.0),)),
    InteractionTemplate("fighting", (0.5, 0.0), (("standing", "standing", 0.8), ("grazing", "standing", 0.2))),
    InteractionTemplate("smelling", (0.35, 0.35), (("grazing", "lying", 0.5), ("lying", "standing", 0.5))),
)


@dataclass(frozen=True)
class SceneConfig:
    frame_size: tuple[int, int] = (160, 160)
    n_pairs: int = 2
    n_singles: int = 1
    n_distractors: int = 1
    agent_width: tuple[int, int] = (34, 44)
    agent_height: tuple[int, int] = (26, 34)
    jitter: float = 0.05
    catalog: ClassCatalog = field(default_factory=ClassCatalog)
    templates: tuple[InteractionTemplate, ...] = DEFAULT_TEMPLATES
    iou_bounds: tuple[float, float] = DEFAULT_IOU_BOUNDS
    max_retries: int = 200
    color_mode: str = "action"
    seed: int = 0

    def __post_init__(self):
        if self.color_mode not in ("action", "random"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")
        if len(self.catalog.individual_actions) > len(ACTION_COLORS):
            raise ValueError(f"at most {len(ACTION_COLORS)} individual actions can be rendered")
        names = {t.interaction for t in self.templates}
        if set(self.catalog.interactions) - names:
            raise ValueError("every interaction class needs a placement template")
        for t in self.templates:
            self.catalog.interaction_index(t.interaction)
            for a, b, _ in t.action_pairs:
                self.catalog.action_index(a)
                self.catalog.action_index(b)

    def template(self, interaction: str) -> InteractionTemplate:
        return next(t for t in self.templates if t.interaction == interaction)


@dataclass(frozen=True)
class Agent:
    agent_id: int
    box: BoundingBox
    action: str


@dataclass(frozen=True)
class LabeledPair:
    a: int
    b: int
    interaction: str


@dataclass(eq=False)
class AnnotatedFrame:
    frame_id: int
    image: np.ndarray
    agents: list[Agent]
    detections: list[Detection]
    interactions: list[LabeledPair]

    def agent(self, agent_id: int) -> Agent:
        return next(a for a in self.agents if a.agent_id == agent_id)

    def annotations(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "agents": [_agent_record(a) for a in self.agents],
            "detections": [(d.detection_id, d.box.as_tuple(), d.confidence) for d in self.detections],
            "interactions": [(p.a, p.b, p.interaction) for p in self.interactions],
        }


def _agent_record(a: Agent) -> dict:
    x1, y1, x2, y2 = a.box.as_tuple()
    return {"id": a.agent_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2, "action": a.action}


def _draw_agent(draw: ImageDraw.ImageDraw, box: BoundingBox, action_idx: int, color_idx: int) -> None:
    color = ACTION_COLORS[color_idx]
    dark = tuple(c // 3 for c in color)
    x1, y1, x2, y2 = box.x1, box.y1, box.x2 - 1, box.y2 - 1
    shape = ACTION_SHAPES[action_idx]
    if shape == "stripes":
        draw.rectangle((x1, y1, x2, y2), fill=dark)
        for y in range(int(y1), int(y2) + 1, 4):
            draw.line((x1, y, x2, y), fill=color, width=2)
    elif shape == "rectangle":
        draw.rectangle((x1, y1, x2, y2), fill=color, outline=dark, width=2)
    elif shape == "ellipse":
        draw.ellipse((x1, y1, x2, y2), fill=color, outline=dark, width=2)
    elif shape == "triangle":
        draw.polygon(((x1, y2), ((x1 + x2) / 2, y1), (x2, y2)), fill=color, outline=dark)
    elif shape == "diamond":
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        draw.polygon(((cx, y1), (x2, cy), (cx, y2), (x1, cy)), fill=color, outline=dark)
    else:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        draw.rectangle((x1, cy - 3, x2, cy + 3), fill=color)
        draw.rectangle((cx - 3, y1, cx + 3, y2), fill=color)


def _separated(box: BoundingBox, others: Sequence[BoundingBox], margin: float = 2.0) -> bool:
    for o in others:
        if (box.x1 < o.x2 + margin and o.x1 < box.x2 + margin
                and box.y1 < o.y2 + margin and o.y1 < box.y2 + margin):
            return False
    return True


def _in_frame(box: BoundingBox, w: int, h: int) -> bool:
    return box.x1 >= 0 and box.y1 >= 0 and box.x2 <= w and box.y2 <= h


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, frame_id: int = 0) -> AnnotatedFrame:
    """Render one frame; raises PlacementError if agents cannot be placed."""
    w, h = cfg.frame_size
    catalog = cfg.catalog

    def random_size():
        return int(rng.integers(cfg.agent_width[0], cfg.agent_width[1] + 1)), \
            int(rng.integers(cfg.agent_height[0], cfg.agent_height[1] + 1))

    def random_box(bw, bh):
        x = int(rng.integers(0, w - bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        return BoundingBox(x, y, x + bw, y + bh)

    placed: list[BoundingBox] = []
    agents: list[Agent] = []
    pairs: list[LabeledPair] = []

    for _ in range(cfg.n_pairs):
        interaction = catalog.interactions[int(rng.integers(catalog.n_interactions))]
        tmpl = cfg.template(interaction)
        weights = np.array([p[2] for p in tmpl.action_pairs], dtype=float)
        act_a, act_b, _ = tmpl.action_pairs[int(rng.choice(len(weights), p=weights / weights.sum()))]
        for _attempt in range(cfg.max_retries):
            wa, ha = random_size()
            wb, hb = random_size()
            a = random_box(wa, ha)
            dx = (tmpl.offset[0] + rng.uniform(-cfg.jitter, cfg.jitter)) * wa
            dy = (tmpl.offset[1] + rng.uniform(-cfg.jitter, cfg.jitter)) * ha
            bx, by = int(round(a.x1 + dx)), int(round(a.y1 + dy))
            b = BoundingBox(bx, by, bx + wb, by + hb)
            if not (_in_frame(b, w, h) and passes_interaction_threshold(a, b, cfg.iou_bounds)):
                continue
            if _separated(a, placed) and _separated(b, placed):
                break
        else:
            raise PlacementError(f"could not place a {interaction!r} pair after {cfg.max_retries} tries")
        ia, ib = len(agents), len(agents) + 1
        agents += [Agent(ia, a, act_a), Agent(ib, b, act_b)]
        placed += [a, b]
        pairs.append(LabeledPair(ia, ib, interaction))

    for _ in range(cfg.n_singles):
        for _attempt in range(cfg.max_retries):
            box = random_box(*random_size())
            if _separated(box, placed):
                break
        else:
            raise PlacementError(f"could not place a solitary agent after {cfg.max_retries} tries")
        action = catalog.individual_actions[int(rng.integers(catalog.n_actions))]
        agents.append(Agent(len(agents), box, action))
        placed.append(box)

    base = rng.integers(-12, 13, size=(h, w, 1)) + 110
    canvas = np.clip(np.repeat(base, 3, axis=2), 0, 255).astype(np.uint8)
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)
    for agent in agents:
        idx = catalog.action_index(agent.action)
        color_idx = idx if cfg.color_mode == "action" else int(rng.integers(len(ACTION_COLORS)))
        _draw_agent(draw, agent.box, idx, color_idx)

    detections = [Detection(a.box, round(float(rng.uniform(0.75, 0.99)), 4), frame_id, a.agent_id)
                  for a in agents]
    for k in range(cfg.n_distractors):
        box = random_box(*random_size())
        detections.append(Detection(box, round(float(rng.uniform(0.05, 0.6)), 4), frame_id, len(agents) + k))

    return AnnotatedFrame(frame_id, np.asarray(img), agents, detections, pairs)


def generate_frames(cfg: SceneConfig, n_frames: int, first_id: int = 0) -> list[AnnotatedFrame]:
    """Frame ``k`` is drawn from its own stream seeded by (cfg.seed, frame id)."""
    return [generate_scene(cfg, np.random.default_rng([cfg.seed, fid]), fid)
            for fid in range(first_id, first_id + n_frames)]


# -- dataset directories ----------------------------------------------------

def write_dataset(frames: Sequence[AnnotatedFrame], directory, catalog: ClassCatalog) -> Path:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for f in frames:
        save_frame(directory / "frames", f.frame_id, f.image)
    write_detections(directory / "detections.jsonl", {f.frame_id: f.detections for f in frames})
    write_records(directory / "actions.jsonl",
                  ({"frame_id": f.frame_id, "agents": [_agent_record(a) for a in f.agents]} for f in frames))
    write_records(directory / "interactions.jsonl",
                  ({"frame_id": f.frame_id,
                    "interactions": [{"a": p.a, "b": p.b, "interaction": p.interaction} for p in f.interactions]}
                   for f in frames))
    manifest = {"format_version": FORMAT_VERSION, "catalog": catalog.to_dict(),
                "frame_ids": [f.frame_id for f in frames]}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def read_dataset(directory, iou_bounds: tuple[float, float] = DEFAULT_IOU_BOUNDS
                 ) -> tuple[list[AnnotatedFrame], ClassCatalog]:
    """Load a dataset directory and check every annotation invariant."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    catalog = ClassCatalog.from_dict(manifest["catalog"])
    detections = read_detections(directory / "detections.jsonl")

    agents: dict[int, list[Agent]] = {}
    path = directory / "actions.jsonl"
    for lineno, rec in read_records(path):
        try:
            fid = int(rec["frame_id"])
            agents[fid] = [Agent(int(r["id"]), BoundingBox(float(r["x1"]), float(r["y1"]), float(r["x2"]),
                                                           float(r["y2"])), str(r["action"]))
                           for r in rec["agents"]]
        except (KeyError, TypeError, ValueError, InvalidBoxError) as exc:
            raise FormatError(f"{path}:{lineno}: bad agent record ({exc})") from None
        for a in agents[fid]:
            if a.action not in catalog.individual_actions:
                raise FormatError(f"{path}:{lineno}: unknown action {a.action!r}")

    pairs: dict[int, list[LabeledPair]] = {}
    path = directory / "interactions.jsonl"
    for lineno, rec in read_records(path):
        try:
            fid = int(rec["frame_id"])
            pairs[fid] = [LabeledPair(int(r["a"]), int(r["b"]), str(r["interaction"]))
                          for r in rec["interactions"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad interaction record ({exc})") from None
        ids = {a.agent_id: a for a in agents.get(fid, [])}
        for p in pairs[fid]:
            if p.a not in ids or p.b not in ids:
                raise FormatError(f"{path}:{lineno}: interaction references unknown agent")
            if p.interaction not in catalog.interactions:
                raise FormatError(f"{path}:{lineno}: unknown interaction {p.interaction!r}")
            if not passes_interaction_threshold(ids[p.a].box, ids[p.b].box, iou_bounds):
                raise FormatError(f"{path}:{lineno}: pair ({p.a}, {p.b}) violates the IoU gate")

    frames = []
    for fid in manifest["frame_ids"]:
        if fid not in agents or fid not in pairs or fid not in detections:
            raise FormatError(f"{directory}: frame {fid} missing from annotation files")
        image = load_frame(directory / "frames", fid)
        frames.append(AnnotatedFrame(fid, image, agents[fid], detections[fid], pairs[fid]))
    return frames, catalog


def split_frames(frames: Sequence[AnnotatedFrame], test_fraction: float, seed: int = 0
                 ) -> tuple[list[AnnotatedFrame], list[AnnotatedFrame]]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(frames))
    n_test = int(round(test_fraction * len(frames)))
    test_idx = set(order[:n_test].tolist())
    train = [f for k, f in enumerate(frames) if k not in test_idx]
    test = [f for k, f in enumerate(frames) if k in test_idx]
    return train, test


def write_split(frames: Sequence[AnnotatedFrame], directory, catalog: ClassCatalog,
                test_fraction: float = 0.25, seed: int = 0) -> tuple[Path, Path]:
    train, test = split_frames(frames, test_fraction, seed)
    directory = Path(directory)
    return write_dataset(train, directory / "train", catalog), write_dataset(test, directory / "test", catalog)


def hash_directory(directory) -> str:
    """SHA-256 over relative paths and contents of every file, in sorted order."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(directory)).encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()
