"""Transformer decision stack and the full driving policy.

Appearance features are flattened into tokens with a learned 1-D positional
embedding (visual tokenizer), the motion embedding is refined by dynamic
filters generated from the appearance map (motion tokenizer), and the
navigation command is embedded by a single linear map. A fusion transformer
attends over all tokens plus the command token; an MLP head maps the pooled
sequence to (steer, accel), each squashed into [-1, 1] by tanh.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .perception import PerceptionConfig, PerceptionNet, DynamicFilterHead, apply_dynamic_filters
from .substrate import ConfigError, MultiheadSelfAttention, ShapeError


class NavCommand(enum.Enum):
    FOLLOW = 0
    LEFT = 1
    RIGHT = 2
    STRAIGHT = 3

    def one_hot(self) -> Tensor:
        vec = torch.zeros(4)
        vec[self.value] = 1.0
        return vec

    @classmethod
    def from_name(cls, name: str) -> "NavCommand":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown navigation command {name!r}") from None


def validate_one_hot(vec: Tensor) -> Tensor:
    """Reject anything that is not an exact one-hot over the 4 commands."""
    if vec.shape[-1] != 4:
        raise ShapeError(f"command vector must have 4 entries, got {vec.shape[-1]}")
    flat = vec.reshape(-1, 4)
    ok = ((flat == 0) | (flat == 1)).all() and (flat.sum(dim=-1) == 1).all()
    if not ok:
        raise ShapeError("command embedding input must be exactly one-hot")
    return vec


@dataclass(frozen=True)
class Action:
    steer: float
    accel: float

    def __post_init__(self):
        if not (-1.0 <= self.steer <= 1.0 and -1.0 <= self.accel <= 1.0):
            raise ValueError(f"action components must lie in [-1, 1]: {self}")

    def as_tensor(self) -> Tensor:
        return torch.tensor([self.steer, self.accel])


@dataclass
class Observation:
    frame_t: Tensor           # (3, H, W) in [0, 1]
    frame_prev: Tensor        # (3, H, W); equals frame_t at episode start
    command: NavCommand


@dataclass(frozen=True)
class DecisionConfig:
    d_model: int = 256
    n_heads: int = 4
    visual_layers: int = 1
    motion_layers: int = 1
    fusion_layers: int = 4
    ff_ratio: int = 2
    filter_kernel: int = 3
    use_motion: bool = True      # dorsal / motion-token branch
    use_command: bool = True     # navigation command token


# Ablation variants: which branches of the full model are wired in.
VARIANTS = {
    "L_b": dict(use_motion=False, use_command=False),
    "L_D": dict(use_motion=True, use_command=False),
    "L_N": dict(use_motion=False, use_command=True),
    "L_D+L_N": dict(use_motion=True, use_command=True),
    "L_BID": dict(use_motion=True, use_command=True),
}


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer: self-attention then a relu MLP."""

    def __init__(self, dim: int, n_heads: int, ff_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_ratio * dim),
            nn.ReLU(),
            nn.Linear(ff_ratio * dim, dim),
        )

    def forward(self, tokens: Tensor, collect: list | None = None) -> Tensor:
        if collect is None:
            attended = self.attn(self.norm1(tokens))
        else:
            attended, weights = self.attn(self.norm1(tokens), return_weights=True)
            collect.append(weights)
        tokens = tokens + attended
        return tokens + self.ff(self.norm2(tokens))


class TokenProjector(nn.Module):
    """Flattens a (B, C, H, W) feature map into H*W tokens.

    Channels are projected to d_model, a learned 1-D positional embedding is
    added per token index, and `layers` encoder layers are applied.
    """

    def __init__(self, channels: int, grid: int, dim: int, n_heads: int,
                 layers: int = 1, ff_ratio: int = 2):
        super().__init__()
        self.grid = grid
        self.n_tokens = grid * grid
        self.proj = nn.Linear(channels, dim)
        self.positional = nn.Parameter(torch.zeros(self.n_tokens, dim))
        self.layers = nn.ModuleList(
            EncoderLayer(dim, n_heads, ff_ratio) for _ in range(layers)
        )

    def tokenize(self, feature_map: Tensor) -> Tensor:
        b, c, h, w = feature_map.shape
        if h * w != self.n_tokens:
            raise ConfigError(
                f"feature grid {h}x{w} does not match configured {self.grid}x{self.grid}"
            )
        tokens = feature_map.flatten(2).transpose(1, 2)   # (B, H*W, C)
        return self.proj(tokens) + self.positional

    def forward(self, feature_map: Tensor, collect: list | None = None) -> Tensor:
        tokens = self.tokenize(feature_map)
        for layer in self.layers:
            tokens = layer(tokens, collect)
        return tokens


class CommandEncoder(nn.Module):
    """Maps a one-hot navigation command to a d_model embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(4, dim)

    def forward(self, one_hot: Tensor) -> Tensor:
        validate_one_hot(one_hot)
        return self.fc(one_hot)


class MotionTokenizer(nn.Module):
    """Refines the motion embedding with filters generated from appearance.

    The appearance map is resized (nearest) to the motion grid, a filter head
    emits per-location kernels, and the filtered motion map is tokenized like
    the visual branch.
    """

    def __init__(self, motion_channels: int, appearance_channels: int, grid: int,
                 dim: int, n_heads: int, layers: int = 1, ff_ratio: int = 2,
                 kernel_size: int = 3):
        super().__init__()
        self.grid = grid
        self.filter_head = DynamicFilterHead(appearance_channels, kernel_size)
        self.tokens = TokenProjector(motion_channels, grid, dim, n_heads, layers, ff_ratio)

    def forward(self, motion: Tensor, appearance: Tensor, collect: list | None = None) -> Tensor:
        if motion.shape[-1] != self.grid or motion.shape[-2] != self.grid:
            raise ShapeError(
                f"motion grid {tuple(motion.shape[-2:])} does not match configured {self.grid}"
            )
        alpha = F.interpolate(appearance, size=motion.shape[-2:], mode="nearest")
        filters = self.filter_head(alpha)
        refined = apply_dynamic_filters(motion, filters)
        return self.tokens(refined, collect)


class FusionTransformer(nn.Module):
    """Joint encoder over visual tokens ++ motion tokens ++ command token."""

    def __init__(self, dim: int, n_heads: int, layers: int = 4, ff_ratio: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(dim, n_heads, ff_ratio) for _ in range(layers)
        )

    def forward(self, token_groups: list[Tensor], collect: list | None = None) -> Tensor:
        tokens = torch.cat(token_groups, dim=1)
        for layer in self.layers:
            tokens = layer(tokens, collect)
        return tokens


class ActionHead(nn.Module):
    """Mean-pools the fused tokens through a 3-layer MLP to (steer, accel).

    The final tanh makes the [-1, 1] range an architectural guarantee.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, 2)

    def forward(self, tokens: Tensor) -> Tensor:
        pooled = tokens.mean(dim=1)
        x = F.relu(self.fc1(pooled))
        x = F.relu(self.fc2(x))
        return torch.tanh(self.fc3(x))


@dataclass(frozen=True)
class ModelConfig:
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    variant: str = "L_BID"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}"
            )
        flags = VARIANTS[self.variant]
        object.__setattr__(
            self, "decision",
            DecisionConfig(**{**self.decision.__dict__, **flags}),
        )

    @staticmethod
    def reduced(frame_size: int = 16, variant: str = "L_BID") -> "ModelConfig":
        """A width-reduced configuration for gradient checks and fast tests."""
        return ModelConfig(
            perception=PerceptionConfig(
                frame_size=frame_size, v1_width=8,
                ventral_widths=(8, 16, 16), recurrence=(2, 2, 2),
                bottleneck_ratio=2, dorsal_width=16,
            ),
            decision=DecisionConfig(d_model=16, n_heads=2, fusion_layers=2),
            variant=variant,
        )


class DrivingPolicy(nn.Module):
    """End-to-end policy: two frames plus a command in, (steer, accel) out."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        p, d = cfg.perception, cfg.decision
        self.perception = PerceptionNet(p)
        self.visual_tokens = TokenProjector(
            p.appearance_channels, p.appearance_grid, d.d_model, d.n_heads,
            d.visual_layers, d.ff_ratio,
        )
        if d.use_motion:
            self.motion_tokens = MotionTokenizer(
                p.dorsal_width, p.appearance_channels, p.motion_grid,
                d.d_model, d.n_heads, d.motion_layers, d.ff_ratio, d.filter_kernel,
            )
        if d.use_command:
            self.command_encoder = CommandEncoder(d.d_model)
        self.fusion = FusionTransformer(d.d_model, d.n_heads, d.fusion_layers, d.ff_ratio)
        self.head = ActionHead(d.d_model)

    @property
    def token_count(self) -> int:
        p, d = self.cfg.perception, self.cfg.decision
        n = p.appearance_grid**2
        if d.use_motion:
            n += p.motion_grid**2
        if d.use_command:
            n += 1
        return n

    def forward(
        self,
        frame_t: Tensor,
        frame_prev: Tensor,
        command_one_hot: Tensor | None = None,
        collect_attention: list | None = None,
    ) -> Tensor:
        d = self.cfg.decision
        appearance, motion = self.perception(frame_t, frame_prev)
        groups = [self.visual_tokens(appearance, collect_attention)]
        if d.use_motion:
            groups.append(self.motion_tokens(motion, appearance, collect_attention))
        if d.use_command:
            if command_one_hot is None:
                raise ShapeError("this model variant requires a command one-hot")
            if command_one_hot.dim() == 1:
                command_one_hot = command_one_hot.unsqueeze(0)
            emb = self.command_encoder(command_one_hot.to(frame_t.dtype))
            groups.append(emb.unsqueeze(1))
        fused = self.fusion(groups, collect_attention)
        return self.head(fused)

    @torch.no_grad()
    def decide(self, obs: Observation) -> Action:
        self.eval()
        out = self.forward(
            obs.frame_t.unsqueeze(0),
            obs.frame_prev.unsqueeze(0),
            obs.command.one_hot(),
        )[0]
        return Action(steer=float(out[0]), accel=float(out[1]))


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> DrivingPolicy:
    """Construct a policy with seed-controlled initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return DrivingPolicy(cfg)


def assert_no_velocity_head(model: nn.Module) -> None:
    """The loss supervises only steer/accel; no velocity branch may exist."""
    banned = ("velocity", "speed")
    offenders = [
        name for name, _ in model.named_parameters()
        if any(b in name.lower() for b in banned)
    ]
    if offenders:
        raise AssertionError(f"velocity-prediction parameters found: {offenders}")
