"""Contrastive pretraining of the visual encoder on unlabeled slices."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision.transforms.v2.functional as TF

from .losses import nt_xent_batch
from .network import Encoder, EncoderConfig

MIN_IMAGE_SIDE = 8

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    output_size: int = 100

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.output_size < 32:
            raise ValueError("output_size must be >= 32")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue jitter must lie in [0, 0.5]")


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 32          # source images per step; the batch holds 2x this many views
    temperature: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-6
    steps: int = 200
    hidden_dim: int = 128
    projection_dim: int = 128
    asymmetric_temperature: bool = False
    seed: int = 0
    augment: AugmentationConfig = field(default_factory=lambda: AugmentationConfig(output_size=32))

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1 or self.lr <= 0 or self.temperature <= 0:
            raise ValueError("batch_size, steps, lr and temperature must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def _as_chw(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image))
    if t.dtype == torch.uint8:
        t = t.float() / 255.0
    if t.ndim != 3:
        raise ValueError(f"expected a 3-d image, got shape {tuple(t.shape)}")
    if t.shape[0] != 3 and t.shape[-1] == 3:
        t = t.permute(2, 0, 1)
    return t.float().contiguous()


def _crop_params(h: int, w: int, cfg: AugmentationConfig, rng: np.random.Generator):
    area = h * w
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _one_view(img: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = img.shape
    top, left, ch, cw = _crop_params(h, w, cfg, rng)
    size = [cfg.output_size, cfg.output_size]
    view = TF.resized_crop(img, top, left, ch, cw, size, antialias=False)
    if cfg.brightness > 0:
        view = TF.adjust_brightness(view, rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness))
    if cfg.contrast > 0:
        view = TF.adjust_contrast(view, rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast))
    if cfg.saturation > 0:
        view = TF.adjust_saturation(view, rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation))
    if cfg.hue > 0:
        view = TF.adjust_hue(view, rng.uniform(-cfg.hue, cfg.hue))
    return view.clamp(0.0, 1.0)


def resize_image(image, size: int) -> torch.Tensor:
    img = _as_chw(image)
    return TF.resized_crop(img, 0, 0, img.shape[1], img.shape[2], [size, size], antialias=False)


def augment_views(image, cfg: AugmentationConfig, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independent random-crop + colour-jitter draws of one image, each (3, S, S) in [0, 1]."""
    img = _as_chw(image)
    if min(img.shape[1:]) < MIN_IMAGE_SIDE:
        raise ValueError(f"image {tuple(img.shape[1:])} is smaller than {MIN_IMAGE_SIDE}px")
    return _one_view(img, cfg, rng), _one_view(img, cfg, rng)


class ProjectionHead(nn.Module):
    """Two dense layers on the pooled encoder feature."""

    def __init__(self, in_dim: int, hidden_dim: int = 128, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.ndim == 4:
            h = h.mean(dim=(2, 3))
        if h.shape[-1] != self.fc1.in_features:
            raise ValueError(f"expected features of width {self.fc1.in_features}, got {h.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(h)))


def project(h: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(h)


@dataclass
class PretrainResult:
    encoder: Encoder
    losses: list[float]


class _SourceSampler:
    """Draws source indices in shuffled passes, reshuffling whenever a pass is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.queue: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue = self.rng.permutation(self.n).tolist()
            need = k - len(out)
            out += self.queue[:need]
            self.queue = self.queue[need:]
        return out


def build_view_batch(images: Sequence, indices: Sequence[int], cfg: AugmentationConfig,
                     rng: np.random.Generator) -> tuple[torch.Tensor, list[int]]:
    """Interleaved batch [v0(x_a), v1(x_a), v0(x_b), v1(x_b), ...] with source tags."""
    views, tags = [], []
    for idx in indices:
        vi, vj = augment_views(images[idx], cfg, rng)
        views += [vi, vj]
        tags += [idx, idx]
    return torch.stack(views), tags


def run_pretraining(images: Sequence, cfg: PretrainConfig | None = None,
                    encoder_config: EncoderConfig | None = None, log_every: int = 0) -> PretrainResult:
    """Minimise NT-Xent over augmented view pairs; returns the encoder without its projection head.

    ``images`` is a sequence of unlabeled images (arrays or tensors); nothing else is accepted.
    """
    cfg = cfg or PretrainConfig()
    encoder_config = encoder_config or EncoderConfig.tiny(input_size=cfg.augment.output_size)
    if encoder_config.input_size != cfg.augment.output_size:
        raise ValueError("augmentation output size must match the encoder input size")
    if len(images) < 2:
        raise ValueError("pretraining needs at least two images")

    torch.manual_seed(cfg.seed)
    encoder = Encoder(encoder_config)
    head = ProjectionHead(encoder_config.out_channels, cfg.hidden_dim, cfg.projection_dim)
    opt = torch.optim.Adam([*encoder.parameters(), *head.parameters()], lr=cfg.lr,
                           weight_decay=cfg.weight_decay)
    sampler = _SourceSampler(len(images), np.random.default_rng([cfg.seed, 0]))
    encoder.train()
    head.train()
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        batch, tags = build_view_batch(images, sampler.take(cfg.batch_size), cfg.augment, rng)
        assert all(tags[2 * k] == tags[2 * k + 1] for k in range(len(tags) // 2))
        z = head(encoder(batch))
        loss = nt_xent_batch(z, cfg.temperature, cfg.asymmetric_temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("pretrain step %d: loss %.4f", step, losses[-1])
    return PretrainResult(encoder.eval(), losses)


def write_loss_curve(path, losses: Sequence[float], header: str = "loss") -> None:
    lines = [f"step\t{header}"] + [f"{k}\t{v!r}" for k, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_curve(path) -> list[float]:
    rows = Path(path).read_text().splitlines()[1:]
    return [float(r.split("\t")[1]) for r in rows if r.strip()]
