"""Window extraction and positive/negative pairing plans.

Window starts are drawn independently per modality, so the two views of a
clip rarely cover the same frames. Plans are plain data: they name which
feature goes where (batch row or memory-bank row) and are JSON-loggable
for audits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import MODALITIES, ClipSample
from .errors import PlanError

BATCH = "batch"
BANK = "bank"


@dataclass(frozen=True)
class WindowPair:
    clip_id: str
    appearance_start: int
    motion_start: int
    window_length: int


@dataclass(frozen=True)
class FeatureRef:
    """Names one feature row: which clip, which view, where it lives."""

    clip_id: str
    modality: str
    domain: str
    origin: str  # BATCH or BANK


@dataclass
class PlanEntry:
    anchor: FeatureRef
    positives: list[FeatureRef]
    negatives: list[FeatureRef]


@dataclass
class PairingPlan:
    kind: str  # "cross_modal" | "cross_domain"
    entries: list[PlanEntry] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[dict]:
        return [asdict(e) for e in self.entries]


def sample_window_pair(
    clip: ClipSample, window_length: int, rng: np.random.Generator
) -> WindowPair:
    """Uniform start per modality, drawn independently (appearance first)."""
    max_start = clip.clip_length - window_length
    if max_start < 0:
        raise PlanError(
            f"clip {clip.clip_id} has {clip.clip_length} frames, "
            f"shorter than window_length={window_length}"
        )
    appearance_start = int(rng.integers(0, max_start + 1))
    motion_start = int(rng.integers(0, max_start + 1))
    return WindowPair(clip.clip_id, appearance_start, motion_start, window_length)


def center_window_pair(clip: ClipSample, window_length: int) -> WindowPair:
    """Deterministic centered window used by evaluation."""
    max_start = clip.clip_length - window_length
    if max_start < 0:
        raise PlanError(
            f"clip {clip.clip_id} has {clip.clip_length} frames, "
            f"shorter than window_length={window_length}"
        )
    start = max_start // 2
    return WindowPair(clip.clip_id, start, start, window_length)


def extract_window(clip: ClipSample, pair: WindowPair, modality: str) -> np.ndarray:
    frames = (
        clip.frames_appearance if modality == "appearance" else clip.frames_motion
    )
    start = (
        pair.appearance_start if modality == "appearance" else pair.motion_start
    )
    return frames[start : start + pair.window_length]


def windows_to_tensor(windows: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack [T, H, W, C] windows into a float32 [B, C, T, H, W] batch."""
    stacked = np.stack(windows).transpose(0, 4, 1, 2, 3)
    return torch.from_numpy(np.ascontiguousarray(stacked, dtype=np.float32))


def _other(modality: str) -> str:
    return MODALITIES[1] if modality == MODALITIES[0] else MODALITIES[0]


def build_cross_modal_plan(
    clip_ids: Sequence[str],
    domain: str,
    *,
    bank_ids: Sequence[str] | None = None,
    bank_negatives: int = 64,
    negatives_mode: str = "both",
    rng: np.random.Generator | None = None,
) -> PairingPlan:
    """Within-domain plan pairing the two views of each clip.

    Anchors are every (clip, modality) in the batch, both orderings. The
    positive is the same clip's other view from the batch. Negatives are
    other clips' other view: the rest of the batch, a sample of the
    memory bank, or both; labels never enter.
    """
    ids = list(clip_ids)
    if len(ids) < 2 and negatives_mode == "batch":
        raise PlanError("cross-modal plan needs >= 2 clips for in-batch negatives")
    if len(ids) < 1:
        raise PlanError("empty batch")
    if negatives_mode not in ("both", "batch", "bank"):
        raise PlanError(f"unknown negatives_mode {negatives_mode!r}")
    use_bank = negatives_mode in ("both", "bank") and bank_negatives > 0
    if use_bank and (bank_ids is None or rng is None):
        raise PlanError("bank negatives requested without bank_ids/rng")
    if len(ids) < 2 and not use_bank:
        raise PlanError("no negatives available for a single-clip batch")

    entries: list[PlanEntry] = []
    bank_pool = np.array(bank_ids if bank_ids is not None else [], dtype=object)
    for clip_id in ids:
        for modality in MODALITIES:
            other = _other(modality)
            anchor = FeatureRef(clip_id, modality, domain, BATCH)
            positives = [FeatureRef(clip_id, other, domain, BATCH)]
            negatives = []
            if negatives_mode in ("both", "batch"):
                negatives.extend(
                    FeatureRef(cid, other, domain, BATCH)
                    for cid in ids
                    if cid != clip_id
                )
            if use_bank:
                candidates = bank_pool[bank_pool != clip_id]
                take = min(bank_negatives, len(candidates))
                if take > 0:
                    chosen = rng.choice(candidates, size=take, replace=False)
                    negatives.extend(
                        FeatureRef(str(cid), other, domain, BANK) for cid in chosen
                    )
            if not negatives:
                raise PlanError(f"no negatives available for anchor {clip_id}")
            entries.append(PlanEntry(anchor, positives, negatives))
    return PairingPlan(kind="cross_modal", entries=entries)


def build_cross_domain_plan(
    accepted: Sequence,
    source_class_index: Mapping[int, Sequence[str]],
    modality: str,
    *,
    positives_per_anchor: int = 4,
    negatives_per_anchor: int = 64,
    rng: np.random.Generator | None = None,
) -> PairingPlan:
    """Target-anchored plan gated by accepted pseudo-labels.

    Positives are source clips of the pseudo-class, negatives source clips
    of the other classes, all same-modality bank rows. Anchors whose
    pseudo-class has no source clips are skipped and counted.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    plan = PairingPlan(kind="cross_domain")
    if not accepted:
        return plan
    other_pool: dict[int, np.ndarray] = {}
    classes = sorted(source_class_index)
    for cls in classes:
        others = [
            cid for c in classes if c != cls for cid in source_class_index[c]
        ]
        other_pool[cls] = np.array(others, dtype=object)
    for record in accepted:
        cls = record.predicted_class
        pool = np.array(source_class_index.get(cls, []), dtype=object)
        if len(pool) == 0:
            plan.skipped += 1
            continue
        negatives_pool = other_pool.get(cls)
        if negatives_pool is None or len(negatives_pool) == 0:
            plan.skipped += 1
            continue
        n_pos = min(positives_per_anchor, len(pool))
        n_neg = min(negatives_per_anchor, len(negatives_pool))
        pos_ids = rng.choice(pool, size=n_pos, replace=False)
        neg_ids = rng.choice(negatives_pool, size=n_neg, replace=False)
        plan.entries.append(
            PlanEntry(
                anchor=FeatureRef(record.clip_id, modality, "target", BATCH),
                positives=[
                    FeatureRef(str(cid), modality, "source", BANK) for cid in pos_ids
                ],
                negatives=[
                    FeatureRef(str(cid), modality, "source", BANK) for cid in neg_ids
                ],
            )
        )
    return plan
