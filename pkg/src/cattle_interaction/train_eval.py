"""Supervised training under the three transfer modes, and evaluation."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import interaction_region, iou, rasterize_pair_map
from .losses import EPS, individual_loss, interaction_loss, total_loss
from .network import (
    FUSION_MODES,
    REPRESENTATION_VARIANTS,
    STREAMS,
    Encoder,
    NetworkConfig,
    TripleStreamNet,
    fused_upper_bound,
)
from .pretrain import _SourceSampler
from .proposal import SliceTriple, crop_resize
from .semantic_prior import ClassCatalog, SemanticPriorTable, fit_prior

log = logging.getLogger(__name__)

TRANSFER_MODES = ("linear", "finetune", "random")


class FrozenWeightsError(AssertionError):
    pass


class FlatHeatmapWarning(UserWarning):
    pass


class UndefinedAPWarning(UserWarning):
    pass


# -- samples ----------------------------------------------------------------

@dataclass
class InteractionSamples:
    """Stacked network inputs and labels for labelled interaction pairs."""

    c1: torch.Tensor
    c2: torch.Tensor
    i: torch.Tensor
    maps: torch.Tensor
    actions: torch.Tensor
    targets: torch.Tensor
    labels: torch.Tensor
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.c1.shape[0]

    def subset(self, idx) -> "InteractionSamples":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return InteractionSamples(self.c1[idx], self.c2[idx], self.i[idx], self.maps[idx],
                                  self.actions[idx], self.targets[idx], self.labels[idx],
                                  [self.keys[k] for k in idx.tolist()] if self.keys else [])

    def action_label_triples(self, catalog: ClassCatalog) -> list[tuple[str, str, str]]:
        acts, ints = catalog.individual_actions, catalog.interactions
        return [(acts[a], acts[b], ints[k])
                for (a, b), k in zip(self.actions.tolist(), self.labels.tolist())]


def build_interaction_samples(frames, catalog: ClassCatalog, input_size: int = 32,
                              map_resolution: int = 32) -> InteractionSamples:
    """One sample per labelled pair, cropped at the ground-truth boxes."""
    c1, c2, ii, maps, actions, labels, keys = [], [], [], [], [], [], []
    for f in frames:
        for p in f.interactions:
            a, b = f.agent(p.a), f.agent(p.b)
            if a.agent_id > b.agent_id:
                a, b = b, a
            region = interaction_region(a.box, b.box)
            c1.append(crop_resize(f.image, a.box, input_size))
            c2.append(crop_resize(f.image, b.box, input_size))
            ii.append(crop_resize(f.image, region, input_size))
            maps.append(rasterize_pair_map(a.box, b.box, map_resolution).data)
            actions.append((catalog.action_index(a.action), catalog.action_index(b.action)))
            labels.append(catalog.interaction_index(p.interaction))
            keys.append((f.frame_id, a.agent_id, b.agent_id))
    if not labels:
        raise ValueError("no labelled interaction pairs in the given frames")
    labels_t = torch.tensor(labels, dtype=torch.long)
    return InteractionSamples(
        c1=torch.from_numpy(np.stack(c1)), c2=torch.from_numpy(np.stack(c2)), i=torch.from_numpy(np.stack(ii)),
        maps=torch.from_numpy(np.stack(maps)).float(),
        actions=torch.tensor(actions, dtype=torch.long),
        targets=F.one_hot(labels_t, catalog.n_interactions).float(),
        labels=labels_t, keys=keys)


def collect_individual_slices(frames, input_size: int = 32) -> torch.Tensor:
    """Crops of every agent, unlabeled, for contrastive pretraining."""
    return torch.from_numpy(np.stack([crop_resize(f.image, a.box, input_size)
                                      for f in frames for a in f.agents]))


def prior_tensor(prior: SemanticPriorTable) -> torch.Tensor:
    return torch.from_numpy(prior.probabilities()).float()


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "random"
    steps: int = 500
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-6
    teacher_forcing: bool = True
    interaction_loss: str = "bce"
    seed: int = 0
    stop_below: float | None = None
    clamp_attention: bool = False   # gates fixed at 1, i.e. the network without attention
    eval_every: int = 10

    def __post_init__(self):
        if self.mode not in TRANSFER_MODES:
            raise ValueError(f"unknown transfer mode {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive integers")


@dataclass
class EvalReport:
    per_class_ap: dict[str, float] = field(default_factory=dict)
    mAP: float = float("nan")
    interaction_accuracy: float = float("nan")
    individual_accuracy: float = float("nan")
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self, include_curves: bool = False) -> dict:
        d = {"per_class_ap": self.per_class_ap, "mAP": self.mAP,
             "interaction_accuracy": self.interaction_accuracy,
             "individual_accuracy": self.individual_accuracy, "confusion": self.confusion}
        if include_curves:
            d["loss_curves"] = self.loss_curves
        return d

    def write(self, path) -> None:
        """Structured JSON report plus one ``<name>.tsv`` per loss curve alongside it."""
        path = Path(path)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True) + "\n")
        for name, curve in self.loss_curves.items():
            lines = ["step\tloss"] + [f"{k}\t{v!r}" for k, v in enumerate(curve)]
            path.with_name(f"{path.stem}.{name}.tsv").write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass
class TrainResult:
    net: TripleStreamNet
    losses: list[float]
    report: EvalReport


def _init_network(net_cfg: NetworkConfig, cfg: TrainConfig, init) -> TripleStreamNet:
    torch.manual_seed(cfg.seed)
    net = TripleStreamNet(net_cfg)
    if cfg.mode == "random":
        return net
    if init is None:
        raise ValueError(f"mode {cfg.mode!r} requires a pretrained encoder checkpoint")
    state = init.state_dict() if isinstance(init, Encoder) else init
    net.encoder_individual.load_state_dict(state)
    net.encoder_interaction.load_state_dict(state)
    return net


def _set_train_mode(net: TripleStreamNet, mode: str) -> None:
    net.train()
    if mode == "linear":
        net.encoder_individual.eval()
        net.encoder_interaction.eval()


def _encoder_snapshot(net: TripleStreamNet) -> dict[str, torch.Tensor]:
    return {f"{n}.{k}": v.detach().clone()
            for n in ("encoder_individual", "encoder_interaction")
            for k, v in getattr(net, n).state_dict().items()}


def compute_losses(net: TripleStreamNet, batch: InteractionSamples, prior: torch.Tensor,
                   teacher_forcing: bool = True, loss_kind: str = "bce"):
    scores, pred = net(batch.c1, batch.c2, batch.i, batch.maps, prior,
                       batch.actions if teacher_forcing else None)
    l_ind = individual_loss(pred.dist_a, pred.dist_b, batch.actions[:, 0], batch.actions[:, 1])
    upper = fused_upper_bound(net.cfg.fusion, net.cfg.streams)
    l_int = interaction_loss(scores.s_fused, batch.targets, upper, loss_kind)
    return total_loss(l_ind, l_int)


@torch.no_grad()
def validation_loss(net: TripleStreamNet, samples: InteractionSamples, prior_t: torch.Tensor,
                    cfg: TrainConfig) -> float:
    net.eval()
    return compute_losses(net, samples, prior_t, cfg.teacher_forcing, cfg.interaction_loss).l_entire.item()


def train_supervised(samples: InteractionSamples, prior: SemanticPriorTable,
                     net_cfg: NetworkConfig | None = None, cfg: TrainConfig | None = None,
                     init=None, log_every: int = 0, validation: InteractionSamples | None = None
                     ) -> TrainResult:
    """Minimise the entire loss on ``samples``.

    ``linear`` freezes both encoders (parameters and normalisation statistics) and
    trains the heads and geometric stream; ``finetune`` trains everything from the
    pretrained encoder ``init``; ``random`` trains everything from scratch.
    With ``validation`` the eval-mode entire loss on it is recorded every
    ``cfg.eval_every`` steps as the ``val_l_entire`` curve.
    """
    cfg = cfg or TrainConfig()
    net_cfg = net_cfg or NetworkConfig(n_actions=prior.catalog.n_actions,
                                       n_interactions=prior.catalog.n_interactions)
    if len(samples) == 0:
        raise ValueError("empty training set")
    net = _init_network(net_cfg, cfg, init)
    net.clamp_attention(cfg.clamp_attention)
    if cfg.mode == "linear":
        for p in net.encoder_parameters():
            p.requires_grad_(False)
        params = list(net.head_parameters())
        frozen = _encoder_snapshot(net)
    else:
        params = list(net.parameters())
        frozen = None
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    prior_t = prior_tensor(prior)
    sampler = _SourceSampler(len(samples), np.random.default_rng([cfg.seed, 2]))
    curves = {"l_entire": [], "l_ind": [], "l_int": []}
    if validation is not None:
        curves["val_l_entire"] = []

    for step in range(cfg.steps):
        if validation is not None and step % cfg.eval_every == 0:
            curves["val_l_entire"].append(validation_loss(net, validation, prior_t, cfg))
        _set_train_mode(net, cfg.mode)
        batch = samples.subset(sampler.take(cfg.batch_size))
        report = compute_losses(net, batch, prior_t, cfg.teacher_forcing, cfg.interaction_loss)
        opt.zero_grad()
        report.l_entire.backward()
        opt.step()
        for k, v in report.as_floats().items():
            curves[k].append(v)
        if log_every and step % log_every == 0:
            log.info("train step %d: %s", step, report.as_floats())
        if cfg.stop_below is not None and curves["l_entire"][-1] < cfg.stop_below:
            break

    if frozen is not None:
        after = _encoder_snapshot(net)
        if any(not torch.equal(frozen[k], after[k]) for k in frozen):
            raise FrozenWeightsError("encoder weights changed during linear-probe training")
    net.eval()
    report = evaluate_samples(net, samples, prior, teacher_forcing=False)
    report.loss_curves = curves
    return TrainResult(net, curves["l_entire"], report)


def collect_individual_labels(frames, catalog: ClassCatalog) -> torch.Tensor:
    """Action indices aligned with :func:`collect_individual_slices`."""
    return torch.tensor([catalog.action_index(a.action) for f in frames for a in f.agents],
                        dtype=torch.long)


def train_individual_actions(slices: torch.Tensor, labels: torch.Tensor,
                             net_cfg: NetworkConfig | None = None, cfg: TrainConfig | None = None,
                             init=None, log_every: int = 0) -> TrainResult:
    """Cross-entropy training of the individual encoder and action head alone.

    This is the single-animal action task used to compare transfer modes. Returns the
    full network (untouched streams keep their initial weights) and the loss curve.
    """
    cfg = cfg or TrainConfig()
    net_cfg = net_cfg or NetworkConfig()
    if len(slices) == 0 or len(slices) != len(labels):
        raise ValueError("need a non-empty set of slices with one label each")
    net = _init_network(net_cfg, cfg, init)
    net.clamp_attention(cfg.clamp_attention)
    if cfg.mode == "linear":
        for p in net.encoder_parameters():
            p.requires_grad_(False)
        frozen = _encoder_snapshot(net)
    else:
        frozen = None
    params = [p for p in list(net.encoder_individual.parameters()) + list(net.action_head.parameters())
              if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = _SourceSampler(len(slices), np.random.default_rng([cfg.seed, 3]))
    curve = []
    for step in range(cfg.steps):
        _set_train_mode(net, cfg.mode)
        idx = sampler.take(cfg.batch_size)
        dist = net.predict_individual(net.encode(slices[idx], "individual"))
        loss = F.nll_loss(torch.log(dist.clamp_min(EPS)), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("action step %d: %.4f", step, curve[-1])
        if cfg.stop_below is not None and curve[-1] < cfg.stop_below:
            break
    if frozen is not None:
        after = _encoder_snapshot(net)
        if any(not torch.equal(frozen[k], after[k]) for k in frozen):
            raise FrozenWeightsError("encoder weights changed during linear-probe training")
    net.eval()
    with torch.no_grad():
        pred = net.predict_individual(net.encode(slices, "individual")).argmax(1)
    report = EvalReport(individual_accuracy=evaluate_accuracy(pred.tolist(), labels.tolist()),
                        loss_curves={"l_ind": curve})
    return TrainResult(net, curve, report)


# -- inference on samples ---------------------------------------------------

@torch.no_grad()
def predict_samples(net: TripleStreamNet, samples: InteractionSamples, prior: SemanticPriorTable,
                    teacher_forcing: bool = False, batch_size: int = 256):
    """Fused scores (n, N) and action distributions (n, 2, A) in eval mode."""
    net.eval()
    prior_t = prior_tensor(prior)
    fused, dists = [], []
    for start in range(0, len(samples), batch_size):
        b = samples.subset(range(start, min(start + batch_size, len(samples))))
        scores, pred = net(b.c1, b.c2, b.i, b.maps, prior_t, b.actions if teacher_forcing else None)
        fused.append(scores.s_fused)
        dists.append(torch.stack([pred.dist_a, pred.dist_b], dim=1))
    return torch.cat(fused), torch.cat(dists)


def evaluate_samples(net: TripleStreamNet, samples: InteractionSamples, prior: SemanticPriorTable,
                     teacher_forcing: bool = False) -> EvalReport:
    """Pair-level report where every sample is a correctly localised ground-truth pair."""
    fused, dists = predict_samples(net, samples, prior, teacher_forcing)
    names = prior.catalog.interactions
    n = len(names)
    labels = samples.labels
    preds = [(k, float(fused[j, k]), bool(labels[j] == k)) for j in range(len(samples)) for k in range(n)]
    gt_counts = torch.bincount(labels, minlength=n).tolist()
    report = evaluate_map(preds, gt_counts, names)
    report.interaction_accuracy = evaluate_accuracy(fused.argmax(1).tolist(), labels.tolist())
    report.individual_accuracy = evaluate_accuracy(dists.argmax(2).reshape(-1).tolist(),
                                                   samples.actions.reshape(-1).tolist())
    confusion = np.zeros((n, n), dtype=int)
    for t, p in zip(labels.tolist(), fused.argmax(1).tolist()):
        confusion[t, p] += 1
    report.confusion = confusion.tolist()
    return report


# -- metrics ----------------------------------------------------------------

def average_precision(scores: Sequence[float], correct: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.asarray(correct, dtype=float)[order]
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def evaluate_map(predictions: Sequence[tuple[int, float, bool]], gt_counts: Sequence[int],
                 class_names: Sequence[str] | None = None) -> EvalReport:
    """Per-class AP and their unweighted mean.

    ``predictions`` holds ``(class_index, score, correct)``; each ground-truth pair must
    have been matched at most once when the ``correct`` flags were assigned.
    Classes without ground truth get NaN and are left out of the mean.
    """
    names = list(class_names) if class_names is not None else [str(k) for k in range(len(gt_counts))]
    per_class = {}
    for k, name in enumerate(names):
        mine = [(s, c) for cls, s, c in predictions if cls == k]
        if gt_counts[k] == 0:
            warnings.warn(f"class {name!r} has no ground truth; AP excluded from mAP", UndefinedAPWarning,
                          stacklevel=2)
            per_class[name] = float("nan")
            continue
        per_class[name] = average_precision([s for s, _ in mine], [c for _, c in mine], gt_counts[k])
    defined = [v for v in per_class.values() if v == v]
    return EvalReport(per_class_ap=per_class, mAP=float(np.mean(defined)) if defined else float("nan"))


def evaluate_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    if len(predicted) != len(truth):
        raise ValueError("prediction and ground-truth lists differ in length")
    if not truth:
        return float("nan")
    return sum(int(p == t) for p, t in zip(predicted, truth)) / len(truth)


def _pair_matches(pa, pb, ga, gb, thr: float) -> bool:
    return ((iou(pa, ga) >= thr and iou(pb, gb) >= thr)
            or (iou(pa, gb) >= thr and iou(pb, ga) >= thr))


def match_pairs(predicted, ground_truth, n_classes: int, iou_threshold: float = 0.5):
    """Flag predicted pairs against ground-truth pairs, greedily by descending score.

    ``predicted``: iterable of ``(frame_id, box_a, box_b, scores)`` with one score per class.
    ``ground_truth``: iterable of ``(frame_id, box_a, box_b, class_index)``.
    A prediction for class k is correct when both member boxes reach ``iou_threshold``
    against an unmatched ground-truth pair of class k in the same frame.
    Returns ``(predictions, gt_counts)`` ready for :func:`evaluate_map`.
    """
    predicted = list(predicted)
    ground_truth = list(ground_truth)
    gt_counts = [0] * n_classes
    for g in ground_truth:
        gt_counts[g[3]] += 1
    out = []
    for k in range(n_classes):
        cand = sorted(((float(p[3][k]), j) for j, p in enumerate(predicted)), key=lambda t: -t[0])
        used: set[int] = set()
        for score, j in cand:
            fid, pa, pb, _ = predicted[j]
            hit = False
            for gi, (gfid, ga, gb, gk) in enumerate(ground_truth):
                if gk != k or gfid != fid or gi in used:
                    continue
                if _pair_matches(pa, pb, ga, gb, iou_threshold):
                    used.add(gi)
                    hit = True
                    break
            out.append((k, score, hit))
    return out, gt_counts


# -- convergence ------------------------------------------------------------

@dataclass
class ConvergenceReport:
    threshold: float
    crossings: dict[str, int | None]
    table: list[list]

    def crossing_text(self, name: str) -> str:
        step = self.crossings[name]
        return "not reached" if step is None else str(step)

    def write(self, path) -> None:
        names = list(self.crossings)
        lines = ["step\t" + "\t".join(names)]
        for row in self.table:
            lines.append("\t".join("" if v is None else repr(v) for v in row))
        lines.append("")
        lines.append(f"# first step below {self.threshold!r}: "
                     + ", ".join(f"{n}={self.crossing_text(n)}" for n in names))
        Path(path).write_text("\n".join(lines) + "\n")


def first_below(curve: Sequence[float], threshold: float) -> int | None:
    for k, v in enumerate(curve):
        if v < threshold:
            return k
    return None


def convergence_report(curves: dict[str, Sequence[float]], threshold: float) -> ConvergenceReport:
    if not curves:
        raise ValueError("at least one curve is required")
    names = list(curves)
    length = max(len(c) for c in curves.values())
    table = [[step] + [curves[n][step] if step < len(curves[n]) else None for n in names]
             for step in range(length)]
    return ConvergenceReport(threshold, {n: first_below(curves[n], threshold) for n in names}, table)


# -- ablation ---------------------------------------------------------------

def ablation_variants(base: NetworkConfig) -> list[tuple[str, str, NetworkConfig]]:
    """Six representation variants under fusion mode ``"paper"`` followed by the three fusion modes (all streams)."""
    out = [("representation", name, replace(base, streams=streams, fusion="paper"))
           for name, streams in REPRESENTATION_VARIANTS.items()]
    out += [("fusion", mode, replace(base, streams=STREAMS, fusion=mode)) for mode in FUSION_MODES]
    return out


def run_ablation(train: InteractionSamples, test: InteractionSamples, prior: SemanticPriorTable,
                 base: NetworkConfig, cfg: TrainConfig, init=None) -> list[dict]:
    rows = []
    for aspect, name, net_cfg in ablation_variants(base):
        result = train_supervised(train, prior, net_cfg, cfg, init)
        report = evaluate_samples(result.net, test, prior)
        rows.append({"aspect": aspect, "variant": name, "streams": "".join(net_cfg.streams),
                     "fusion": net_cfg.fusion, "mAP": report.mAP,
                     "accuracy": report.interaction_accuracy, "final_loss": result.losses[-1]})
    return rows


# -- Grad-CAM ---------------------------------------------------------------

def slices_to_batch(slices: SliceTriple):
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))[None].float()
    return t(slices.c1), t(slices.c2), t(slices.i), t(slices.geometric.data)


def gradcam_heatmap(net: TripleStreamNet, slices: SliceTriple, target: int, prior: SemanticPriorTable,
                    actions=None) -> dict[str, np.ndarray]:
    """Grad-CAM maps for the C1, C2 and I slices, each (S, S) in [0, 1].

    The target is the fused score of class ``target``; activations are the encoder outputs.
    """
    n = net.cfg.n_interactions
    if not 0 <= target < n:
        raise IndexError(f"class index {target} outside [0, {n})")
    net.eval()
    c1, c2, i, maps = slices_to_batch(slices)
    size = c1.shape[-1]
    if actions is not None:
        actions = torch.as_tensor(actions, dtype=torch.long).view(1, 2)
    with torch.enable_grad():
        bundle, _ = net.features(c1, c2, i, maps, prior_tensor(prior), actions)
        scores = net.stream_scores(bundle)
        fmaps = [bundle.f_c1, bundle.f_c2, bundle.f_i]
        grads = torch.autograd.grad(scores.s_fused[0, target], fmaps, allow_unused=True)
    out = {}
    for name, a, g in zip(("c1", "c2", "i"), fmaps, grads):
        if g is None:
            g = torch.zeros_like(a)
        weights = g.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * a).sum(dim=1, keepdim=True)).detach()
        peak = cam.max()
        if peak <= 0:
            warnings.warn(f"Grad-CAM for slice {name!r} is flat (no positive evidence)", FlatHeatmapWarning,
                          stacklevel=2)
            out[name] = np.zeros((size, size), dtype=np.float32)
            continue
        cam = F.interpolate(cam / peak, size=(size, size), mode="bilinear", align_corners=False)
        out[name] = cam[0, 0].clamp(0, 1).numpy()
    return out


def render_overlay(slices: SliceTriple, heatmaps: dict[str, np.ndarray], path, alpha: float = 0.5) -> None:
    """Side-by-side PNG of the three slices with a jet-coloured heatmap blended on top."""
    from matplotlib import colormaps
    from PIL import Image

    jet = colormaps["jet"]
    panels = []
    for name in ("c1", "c2", "i"):
        rgb = getattr(slices, name).transpose(1, 2, 0)
        heat = jet(heatmaps[name])[..., :3]
        panels.append((1 - alpha) * rgb + alpha * heat)
    img = np.clip(np.concatenate(panels, axis=1) * 255 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")
