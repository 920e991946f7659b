"""Two-stream encoder with per-stream classifiers and a shared projection head.

Desk-scale stand-in for a pretrained video backbone: each stream is a
small strided 3-D conv stack. Activations are smooth (GELU) so finite
difference gradient checks are well conditioned. The projection head is
a single shared module used only by the cross-modal objectives; the
cross-domain objective consumes raw encoder features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import APPEARANCE_CHANNELS, MOTION_CHANNELS
from .errors import ConfigError, NumericError

NORM_EPS = 1e-12
ZERO_NORM_THRESHOLD = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    feature_dim: int = 64
    projection_dim: int = 32
    width: int = 8
    window_length: int = 16

    def validate(self) -> None:
        if min(self.num_classes, self.feature_dim, self.projection_dim,
               self.width, self.window_length) <= 0:
            raise ConfigError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class StreamEncoder(nn.Module):
    """Strided Conv3d stack -> global average pool -> linear feature."""

    def __init__(self, in_channels: int, feature_dim: int, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, width, 3, stride=(1, 2, 2), padding=1)
        self.conv2 = nn.Conv3d(width, 2 * width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv3d(2 * width, 4 * width, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(4 * width, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))
        x = self.pool(x).flatten(1)
        return self.fc(x)


class ProjectionHead(nn.Module):
    """linear -> GELU -> linear -> L2 normalize, shared across domains.

    Rows that would normalize by ~0 are guarded with a fixed epsilon and
    counted in `zero_norm_events` instead of producing NaNs.
    """

    def __init__(self, feature_dim: int, projection_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, feature_dim)
        self.fc2 = nn.Linear(feature_dim, projection_dim)
        self.zero_norm_events = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.fc2(F.gelu(self.fc1(x)))
        norms = z.norm(dim=-1, keepdim=True)
        self.zero_norm_events += int((norms < ZERO_NORM_THRESHOLD).sum())
        return z / (norms + NORM_EPS)


class TwoStreamModel(nn.Module):
    """Appearance and motion streams, per-stream classifiers, one shared head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.appearance_encoder = StreamEncoder(
            APPEARANCE_CHANNELS, config.feature_dim, config.width
        )
        self.motion_encoder = StreamEncoder(
            MOTION_CHANNELS, config.feature_dim, config.width
        )
        self.classifier_appearance = nn.Linear(config.feature_dim, config.num_classes)
        self.classifier_motion = nn.Linear(config.feature_dim, config.num_classes)
        self.projection_head = ProjectionHead(
            config.feature_dim, config.projection_dim
        )

    def encode(
        self,
        windows: torch.Tensor,
        modality: str,
        clip_ids: list[str] | None = None,
    ) -> torch.Tensor:
        """Windows [B, C, T, H, W] -> features [B, D].

        Raises on a window-length mismatch or non-finite activations; the
        error names the offending clip when ids are supplied.
        """
        if windows.dim() != 5:
            raise ConfigError(f"expected 5-D window batch, got {tuple(windows.shape)}")
        if windows.shape[2] != self.config.window_length:
            raise ConfigError(
                f"window length {windows.shape[2]} != "
                f"configured {self.config.window_length}"
            )
        if modality == "appearance":
            features = self.appearance_encoder(windows)
        elif modality == "motion":
            features = self.motion_encoder(windows)
        else:
            raise ConfigError(f"unknown modality {modality!r}")
        finite = torch.isfinite(features).all(dim=1)
        if not bool(finite.all()):
            bad = int((~finite).nonzero()[0, 0])
            name = clip_ids[bad] if clip_ids else f"row {bad}"
            raise NumericError(f"non-finite {modality} features for {name}")
        return features

    def project(self, features: torch.Tensor) -> torch.Tensor:
        return self.projection_head(features)

    def stream_logits(
        self, features: torch.Tensor, modality: str
    ) -> torch.Tensor:
        if modality == "appearance":
            return self.classifier_appearance(features)
        if modality == "motion":
            return self.classifier_motion(features)
        raise ConfigError(f"unknown modality {modality!r}")

    def classify(
        self, f_appearance: torch.Tensor, f_motion: torch.Tensor
    ) -> torch.Tensor:
        """Fused logits: elementwise mean of the two stream logit matrices.

        Downstream argmax ties resolve to the lowest class index.
        """
        if f_appearance.shape[0] != f_motion.shape[0]:
            raise ConfigError("stream feature batches differ in size")
        logits_a = self.classifier_appearance(f_appearance)
        logits_m = self.classifier_motion(f_motion)
        if logits_a.shape[1] != logits_m.shape[1]:
            raise ConfigError("per-stream classifiers disagree on class count")
        return fuse_logits(logits_a, logits_m)


def fuse_logits(logits_a: torch.Tensor, logits_m: torch.Tensor) -> torch.Tensor:
    if logits_a.shape != logits_m.shape:
        raise ConfigError(
            f"cannot fuse logits of shapes {tuple(logits_a.shape)} and "
            f"{tuple(logits_m.shape)}"
        )
    return 0.5 * (logits_a + logits_m)


def _init_linear_like(weight: torch.Tensor, bias: torch.Tensor | None,
                      generator: torch.Generator) -> None:
    # Mirrors the default kaiming-uniform Linear/Conv init, but driven by
    # an explicit generator for reproducibility.
    fan_in = weight.shape[1] * (weight[0][0].numel() if weight.dim() > 2 else 1)
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=generator)


def build_model(config: ModelConfig, seed: int = 0) -> TwoStreamModel:
    """Construct a model whose initial parameters depend only on the seed."""
    model = TwoStreamModel(config)
    generator = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv3d)):
            _init_linear_like(module.weight, module.bias, generator)
    return model
