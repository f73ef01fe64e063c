"""Triple-stream interaction recognizer.

Visual stream: two MBConv encoders with coordinate attention (C1 and C2 share the
individual encoder, I goes through the interaction encoder). Geometric stream:
two convolutions and a pooling layer over the binary pair map. Semantic stream:
the co-occurrence prior indexed by the two individual actions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from safetensors import safe_open

from ._records import FORMAT_VERSION, FormatError

FUSION_MODES = ("paper", "sum", "product")
STREAMS = ("s", "g", "v")
ACTIVATIONS = ("sigmoid", "relu")
REPRESENTATION_VARIANTS = {
    "only_s": ("s",),
    "only_g": ("g",),
    "only_v": ("v",),
    "v+g": ("g", "v"),
    "v+s": ("s", "v"),
    "all": ("s", "g", "v"),
}
GEOMETRIC_FEATURE_DIM = 256


@dataclass(frozen=True)
class StageSpec:
    expand: int
    width: int
    depth: int
    stride: int
    kernel: int = 3


_B0_STAGES = (
    StageSpec(1, 16, 1, 1, 3),
    StageSpec(6, 24, 2, 2, 3),
    StageSpec(6, 40, 2, 2, 5),
    StageSpec(6, 80, 3, 2, 3),
    StageSpec(6, 112, 3, 1, 5),
    StageSpec(6, 192, 4, 2, 5),
    StageSpec(6, 320, 1, 1, 3),
)
_TINY_STAGES = (
    StageSpec(1, 16, 1, 1),
    StageSpec(4, 24, 1, 2),
    StageSpec(4, 40, 1, 2),
)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 100
    stem_width: int = 32
    stages: tuple[StageSpec, ...] = _B0_STAGES
    head_width: int | None = 1280
    attention: str = "coordinate"
    reduction: int = 32

    def __post_init__(self):
        if self.input_size < 32:
            raise ValueError("input_size must be >= 32")
        if self.attention not in ("none", "coordinate"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.reduction < 1:
            raise ValueError("reduction must be positive")
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages))

    @classmethod
    def b0(cls, input_size: int = 100, attention: str = "coordinate") -> "EncoderConfig":
        return cls(input_size=input_size, attention=attention)

    @classmethod
    def tiny(cls, input_size: int = 32, attention: str = "coordinate") -> "EncoderConfig":
        return cls(input_size=input_size, stem_width=16, stages=_TINY_STAGES, head_width=64,
                   attention=attention)

    @property
    def out_channels(self) -> int:
        return self.head_width or self.stages[-1].width

    @property
    def out_spatial(self) -> int:
        n = (self.input_size + 1) // 2
        for s in self.stages:
            if s.stride == 2:
                n = (n + 1) // 2
        return n

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.out_spatial, self.out_spatial)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


class CoordinateAttention(nn.Module):
    """Factorised channel attention: separate gates along height and width.

    ``clamp_gates`` forces both gates to 1 (identity), for debugging and ablation.
    """

    def __init__(self, channels: int, reduction: int = 32, min_width: int = 8):
        super().__init__()
        mid = max(min_width, channels // reduction)
        self.conv1 = nn.Conv2d(channels, mid, 1)
        self.bn1 = nn.BatchNorm2d(mid)
        self.act = nn.Hardswish()
        self.conv_h = nn.Conv2d(mid, channels, 1)
        self.conv_w = nn.Conv2d(mid, channels, 1)
        self.clamp_gates = False

    def gates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, c, h, w = x.shape
        pooled_h = x.mean(dim=3, keepdim=True)                     # n, c, h, 1
        pooled_w = x.mean(dim=2, keepdim=True).transpose(2, 3)     # n, c, w, 1
        y = self.act(self.bn1(self.conv1(torch.cat([pooled_h, pooled_w], dim=2))))
        y_h, y_w = torch.split(y, [h, w], dim=2)
        g_h = torch.sigmoid(self.conv_h(y_h))                      # n, c, h, 1
        g_w = torch.sigmoid(self.conv_w(y_w.transpose(2, 3)))      # n, c, 1, w
        return g_h, g_w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.clamp_gates:
            return x
        g_h, g_w = self.gates(x)
        return x * g_h * g_w


def _conv_bn(cin, cout, k, stride=1, groups=1, act=True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False), nn.BatchNorm2d(cout)]
    if act:
        layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class MBConv(nn.Module):
    def __init__(self, cin, cout, expand, stride, kernel, attention="coordinate", reduction=32):
        super().__init__()
        mid = cin * expand
        self.expand = _conv_bn(cin, mid, 1) if expand != 1 else nn.Identity()
        self.depthwise = _conv_bn(mid, mid, kernel, stride, groups=mid)
        self.attention = CoordinateAttention(mid, reduction) if attention == "coordinate" else nn.Identity()
        self.project = _conv_bn(mid, cout, 1, act=False)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.project(self.attention(self.depthwise(self.expand(x))))
        return x + y if self.residual else y


class Encoder(nn.Module):
    """MBConv image encoder mapping (B, 3, S, S) to (B, C, H, W)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = _conv_bn(3, cfg.stem_width, 3, 2)
        blocks = []
        cin = cfg.stem_width
        for s in cfg.stages:
            for d in range(s.depth):
                blocks.append(MBConv(cin, s.width, s.expand, s.stride if d == 0 else 1, s.kernel,
                                     cfg.attention, cfg.reduction))
                cin = s.width
        self.blocks = nn.Sequential(*blocks)
        self.head = _conv_bn(cin, cfg.head_width, 1) if cfg.head_width else nn.Identity()
        # depthwise convolutions are markedly faster on CPU in NHWC layout
        self.to(memory_format=torch.channels_last)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")
        return self.head(self.blocks(self.stem(x.contiguous(memory_format=torch.channels_last))))

    def attention_blocks(self) -> list[CoordinateAttention]:
        return [m for m in self.modules() if isinstance(m, CoordinateAttention)]

    def clamp_attention(self, flag: bool = True) -> None:
        for m in self.attention_blocks():
            m.clamp_gates = flag


class GeometricStream(nn.Module):
    """Two convolutions and a global pooling layer, projected to a 256-d feature."""

    def __init__(self, widths: tuple[int, int] = (32, 64), out_dim: int = GEOMETRIC_FEATURE_DIM):
        super().__init__()
        self.conv1 = nn.Conv2d(2, widths[0], 5, 2, 2)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 5, 2, 2)
        self.proj = nn.Linear(widths[1], out_dim)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.ndim != 4 or m.shape[1] != 2 or m.shape[2] != m.shape[3]:
            raise ValueError(f"expected maps of shape (B, 2, R, R), got {tuple(m.shape)}")
        x = F.relu(self.conv1(m))
        x = F.relu(self.conv2(x))
        return self.proj(x.mean(dim=(2, 3)))


@dataclass(frozen=True)
class NetworkConfig:
    n_actions: int = 4
    n_interactions: int = 3
    encoder: EncoderConfig = field(default_factory=EncoderConfig.tiny)
    map_resolution: int = 32
    geometric_widths: tuple[int, int] = (32, 64)
    fusion: str = "paper"
    activation: str = "sigmoid"
    streams: tuple[str, ...] = STREAMS

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        streams = tuple(s for s in STREAMS if s in self.streams)
        if not streams or set(self.streams) - set(STREAMS):
            raise ValueError(f"invalid stream selection {self.streams!r}")
        object.__setattr__(self, "streams", streams)
        object.__setattr__(self, "geometric_widths", tuple(self.geometric_widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        d["streams"] = tuple(d["streams"])
        return cls(**d)


@dataclass
class FeatureBundle:
    f_c1: torch.Tensor
    f_c2: torch.Tensor
    f_i: torch.Tensor
    f_g: torch.Tensor
    f_s: torch.Tensor

    @property
    def f_v(self) -> torch.Tensor:
        return torch.cat([self.f_c1, self.f_c2, self.f_i], dim=1)


@dataclass
class ScoreBundle:
    s_s: torch.Tensor | None
    s_g: torch.Tensor | None
    s_v: torch.Tensor | None
    s_fused: torch.Tensor
    fusion_mode: str


@dataclass
class ActionPrediction:
    dist_a: torch.Tensor
    dist_b: torch.Tensor

    @property
    def a1(self) -> torch.Tensor:
        return self.dist_a.argmax(dim=-1)

    @property
    def a2(self) -> torch.Tensor:
        return self.dist_b.argmax(dim=-1)


def fuse_scores(s_v, s_g, s_s, mode: str = "paper"):
    """Late fusion of per-stream scores; streams passed as None are left out.

    ``paper``: (s_v + s_g) * s_s, ``sum``: s_v + s_g + s_s, ``product``: s_v * s_g * s_s.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    present = [s for s in (s_v, s_g, s_s) if s is not None]
    if not present:
        raise ValueError("at least one stream score is required")
    if mode == "sum":
        return sum(present[1:], present[0])
    if mode == "product":
        out = present[0]
        for s in present[1:]:
            out = out * s
        return out
    appearance = [s for s in (s_v, s_g) if s is not None]
    if not appearance:
        return s_s
    base = sum(appearance[1:], appearance[0])
    return base if s_s is None else base * s_s


def fused_upper_bound(mode: str, streams=STREAMS) -> float:
    """Largest fused value reachable when every stream score lies in [0, 1]."""
    if mode == "product":
        return 1.0
    if mode == "sum":
        return float(len(streams))
    n_app = sum(1 for s in ("v", "g") if s in streams)
    return float(max(n_app, 1))


class TripleStreamNet(nn.Module):
    GROUPS = ("encoder_individual", "encoder_interaction", "geometric", "action_head",
              "semantic_head", "geometric_head", "visual_head")

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        c = cfg.encoder.out_channels
        self.encoder_individual = Encoder(cfg.encoder)
        self.encoder_interaction = Encoder(cfg.encoder)
        self.geometric = GeometricStream(cfg.geometric_widths)
        self.action_head = nn.Linear(c, cfg.n_actions)
        self.semantic_head = nn.Linear(cfg.n_interactions, cfg.n_interactions)
        self.geometric_head = nn.Linear(GEOMETRIC_FEATURE_DIM, cfg.n_interactions)
        self.visual_head = nn.Linear(3 * c, cfg.n_interactions)

    # -- stream pieces ----------------------------------------------------
    def encode(self, images: torch.Tensor, which: str = "individual") -> torch.Tensor:
        if which == "individual":
            return self.encoder_individual(images)
        if which == "interaction":
            return self.encoder_interaction(images)
        raise ValueError(f"unknown encoder {which!r}")

    def predict_individual(self, f_c: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.action_head(f_c.mean(dim=(2, 3))), dim=-1)

    def _activate(self, x):
        return torch.sigmoid(x) if self.cfg.activation == "sigmoid" else F.relu(x)

    def stream_scores(self, bundle: FeatureBundle) -> ScoreBundle:
        streams = self.cfg.streams
        s_s = self._activate(self.semantic_head(bundle.f_s)) if "s" in streams else None
        s_g = self._activate(self.geometric_head(bundle.f_g)) if "g" in streams else None
        s_v = self._activate(self.visual_head(bundle.f_v.mean(dim=(2, 3)))) if "v" in streams else None
        return ScoreBundle(s_s, s_g, s_v, fuse_scores(s_v, s_g, s_s, self.cfg.fusion), self.cfg.fusion)

    def clamp_attention(self, flag: bool = True) -> None:
        self.encoder_individual.clamp_attention(flag)
        self.encoder_interaction.clamp_attention(flag)

    # -- full pass --------------------------------------------------------
    def features(self, c1, c2, i, maps, prior: torch.Tensor, actions=None):
        """Compute the feature bundle and the individual-action prediction.

        ``prior`` is the (A, A, N) probability table; ``actions`` is an optional
        (B, 2) tensor of ground-truth action indices (teacher forcing). Without it
        the prior is indexed by the predicted argmax actions.
        """
        b = c1.shape[0]
        f_pair = self.encoder_individual(torch.cat([c1, c2], dim=0))
        f_c1, f_c2 = f_pair[:b], f_pair[b:]
        f_i = self.encoder_interaction(i)
        pred = ActionPrediction(self.predict_individual(f_c1), self.predict_individual(f_c2))
        if actions is None:
            ia, ib = pred.a1, pred.a2
        else:
            ia, ib = actions[:, 0], actions[:, 1]
        f_s = prior.to(f_c1.dtype)[ia, ib]
        f_g = self.geometric(maps.to(f_c1.dtype))
        return FeatureBundle(f_c1, f_c2, f_i, f_g, f_s), pred

    def forward(self, c1, c2, i, maps, prior, actions=None):
        bundle, pred = self.features(c1, c2, i, maps, prior, actions)
        return self.stream_scores(bundle), pred

    # -- parameter bookkeeping -------------------------------------------
    def encoder_parameters(self):
        yield from self.encoder_individual.parameters()
        yield from self.encoder_interaction.parameters()

    def head_parameters(self):
        for name in ("geometric", "action_head", "semantic_head", "geometric_head", "visual_head"):
            yield from getattr(self, name).parameters()

    def parameter_groups(self) -> dict[str, list[str]]:
        """Named parameter groups; attention parameters are split out of the encoders."""
        groups: dict[str, list[str]] = {g: [] for g in self.GROUPS}
        groups["attention"] = []
        for name, _ in self.named_parameters():
            top = name.split(".", 1)[0]
            if ".attention." in name and top.startswith("encoder"):
                groups["attention"].append(name)
            else:
                groups[top].append(name)
        return groups


# -- checkpoints ------------------------------------------------------------

def _state_for_save(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().contiguous() for k, v in module.state_dict().items()}


def _header(kind: str, cfg) -> dict[str, str]:
    # a single metadata entry: safetensors does not preserve key order, and
    # byte-identical checkpoints need a fixed header
    info = {"format_version": FORMAT_VERSION, "kind": kind, "config": cfg.to_dict()}
    return {"cattle_interaction": json.dumps(info, sort_keys=True)}


def save_network(net: TripleStreamNet, path) -> None:
    save_file(_state_for_save(net), str(path), metadata=_header("triple_stream", net.cfg))


def save_encoder(encoder: Encoder, path) -> None:
    save_file(_state_for_save(encoder), str(path), metadata=_header("encoder", encoder.cfg))


def _read_checkpoint(path, kind: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        state = load_file(str(path))
    except Exception as exc:  # safetensors raises several unrelated types on corrupt input
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from None
    try:
        info = json.loads(meta["cattle_interaction"])
    except (KeyError, json.JSONDecodeError):
        raise FormatError(f"{path}: checkpoint carries no readable header") from None
    if info.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {info.get('format_version')!r}")
    if info.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {info.get('kind')!r}")
    return info["config"], state


def load_network(path) -> TripleStreamNet:
    cfg, state = _read_checkpoint(path, "triple_stream")
    net = TripleStreamNet(NetworkConfig.from_dict(cfg))
    net.load_state_dict(state)
    return net.eval()


def load_encoder(path) -> Encoder:
    cfg, state = _read_checkpoint(path, "encoder")
    enc = Encoder(EncoderConfig.from_dict(cfg))
    enc.load_state_dict(state)
    return enc.eval()


def with_streams(cfg: NetworkConfig, streams) -> NetworkConfig:
    return replace(cfg, streams=tuple(streams))
