"""Frame-level inference: detections in, scored interaction records out."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ._records import write_records
from .geometry import DEFAULT_IOU_BOUNDS
from .network import TripleStreamNet
from .proposal import (
    DEFAULT_MIN_CONFIDENCE,
    DEFAULT_STRIDE,
    Detection,
    extract_slices,
    filter_detections,
    generate_proposals,
    load_frame,
    read_detections,
    throttle_frames,
)
from .semantic_prior import SemanticPriorTable
from .train_eval import (
    EvalReport,
    build_interaction_samples,
    evaluate_map,
    evaluate_samples,
    match_pairs,
    prior_tensor,
)


@dataclass
class InferenceSummary:
    frame_ids: list[int]
    n_pairs: int
    seconds: float
    records: list[dict] = field(default_factory=list)

    @property
    def fps(self) -> float:
        return len(self.frame_ids) / self.seconds if self.seconds > 0 else float("inf")


@torch.no_grad()
def infer_frame(net: TripleStreamNet, prior: SemanticPriorTable, image: np.ndarray,
                detections: Sequence[Detection], min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                iou_bounds: tuple[float, float] = DEFAULT_IOU_BOUNDS, prior_t: torch.Tensor | None = None
                ) -> list[dict]:
    """Score every gated pair of confident detections in one frame."""
    net.eval()
    proposals = generate_proposals(filter_detections(detections, min_confidence), iou_bounds)
    if not proposals:
        return []
    size, res = net.cfg.encoder.input_size, net.cfg.map_resolution
    slices = [extract_slices(image, p, size, res) for p in proposals]
    stack = lambda name: torch.from_numpy(np.stack([getattr(s, name) for s in slices]))
    maps = torch.from_numpy(np.stack([s.geometric.data for s in slices])).float()
    prior_t = prior_tensor(prior) if prior_t is None else prior_t
    scores, pred = net(stack("c1"), stack("c2"), stack("i"), maps, prior_t)
    acts, ints = prior.catalog.individual_actions, prior.catalog.interactions
    out = []
    for k, p in enumerate(proposals):
        s = scores.s_fused[k].tolist()
        out.append({"a": p.a.detection_id, "b": p.b.detection_id, "scores": s,
                    "interaction": ints[int(np.argmax(s))],
                    "a1": acts[int(pred.a1[k])], "a2": acts[int(pred.a2[k])]})
    return out


def run_inference(net: TripleStreamNet, prior: SemanticPriorTable, frames_dir, detections_path,
                  out_path=None, stride: int = DEFAULT_STRIDE,
                  min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> InferenceSummary:
    """Process every ``stride``-th frame of the clip (ordered by frame id).

    Frames are those with a detections record; images are read from ``frames_dir``.
    """
    detections = read_detections(detections_path)
    frame_ids = list(throttle_frames(sorted(detections), stride))
    prior_t = prior_tensor(prior)
    records, n_pairs = [], 0
    start = time.perf_counter()
    for fid in frame_ids:
        image = load_frame(frames_dir, fid)
        found = infer_frame(net, prior, image, detections[fid], min_confidence, prior_t=prior_t)
        n_pairs += len(found)
        records.append({"frame_id": fid, "interactions": found})
    seconds = time.perf_counter() - start
    if out_path is not None:
        write_records(out_path, records, catalog=prior.catalog.to_dict())
    return InferenceSummary(frame_ids, n_pairs, seconds, records)


def evaluate_frames(net: TripleStreamNet, prior: SemanticPriorTable, frames,
                    min_confidence: float = DEFAULT_MIN_CONFIDENCE, iou_threshold: float = 0.5) -> EvalReport:
    """End-to-end report on annotated frames.

    mAP comes from detector-driven proposals matched to the labelled pairs; the
    accuracies are measured on the ground-truth pairs themselves.
    """
    n = prior.catalog.n_interactions
    predicted, truth = [], []
    prior_t = prior_tensor(prior)
    for f in frames:
        boxes = {d.detection_id: d.box for d in f.detections}
        for r in infer_frame(net, prior, f.image, f.detections, min_confidence, prior_t=prior_t):
            predicted.append((f.frame_id, boxes[r["a"]], boxes[r["b"]], r["scores"]))
        for p in f.interactions:
            truth.append((f.frame_id, f.agent(p.a).box, f.agent(p.b).box,
                          prior.catalog.interaction_index(p.interaction)))
    preds, gt_counts = match_pairs(predicted, truth, n, iou_threshold)
    report = evaluate_map(preds, gt_counts, prior.catalog.interactions)
    if truth:
        samples = build_interaction_samples(frames, prior.catalog, net.cfg.encoder.input_size,
                                            net.cfg.map_resolution)
        pair_level = evaluate_samples(net, samples, prior)
        report.interaction_accuracy = pair_level.interaction_accuracy
        report.individual_accuracy = pair_level.individual_accuracy
        report.confusion = pair_level.confusion
    return report

