"""SpecAugment-style time and channel masking, plus the stage/role policy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .rng import Rng


@dataclass
class SpecAugmentPlan:
    num_time_masks: int = 2
    max_time_mask_width: float = 0.1  # fraction of T when < 1, frames otherwise
    num_channel_masks: int = 1
    max_channel_mask_width: float = 0.25  # fraction of C when < 1, channels otherwise
    mask_value: float = 0.0

    def __post_init__(self):
        if self.num_time_masks < 0 or self.num_channel_masks < 0:
            raise ValueError("specaugment mask counts must be >= 0")
        if self.max_time_mask_width < 0 or self.max_channel_mask_width < 0:
            raise ValueError("specaugment mask widths must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.num_time_masks == 0 and self.num_channel_masks == 0

    def to_dict(self) -> dict:
        return asdict(self)


def _width(spec: float, axis_len: int) -> int:
    """Widths below 1 are fractions of the axis; 1 and above are absolute."""
    if spec < 1:
        return int(np.floor(spec * axis_len))
    return int(spec)


def apply_specaugment(features: np.ndarray, plan: SpecAugmentPlan, rng: Rng) -> np.ndarray:
    """Return a masked copy of a (T, C) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or min(features.shape) < 1:
        raise ValueError(f"apply_specaugment: expected a (T, C) matrix with T, C >= 1, got {features.shape}")
    t, c = features.shape
    tw, cw = _width(plan.max_time_mask_width, t), _width(plan.max_channel_mask_width, c)
    if tw > t or cw > c:
        raise ValueError(f"apply_specaugment: mask widths ({tw}, {cw}) exceed feature shape {features.shape}")
    out = features.copy()
    for _ in range(plan.num_time_masks):
        w = int(rng.integers(0, tw + 1))
        start = int(rng.integers(0, t - w + 1))
        out[start : start + w, :] = plan.mask_value
    for _ in range(plan.num_channel_masks):
        w = int(rng.integers(0, cw + 1))
        start = int(rng.integers(0, c - w + 1))
        out[:, start : start + w] = plan.mask_value
    return out


def placement_policy(stage: str, role: str) -> bool:
    """Whether inputs to ``role`` get SpecAugment during ``stage``.

    Single-model stages (stage 1, source fine-tuning, continued pretraining)
    augment everything. In stage 2 only the student sees augmented inputs; the
    teacher labels clean audio.
    """
    if stage in ("stage1", "ft", "cpt"):
        return True
    if stage == "stage2":
        if role not in ("teacher", "student"):
            raise ValueError(f"placement_policy: unknown role {role!r}")
        return role == "student"
    raise ValueError(f"placement_policy: unknown stage {stage!r}")
