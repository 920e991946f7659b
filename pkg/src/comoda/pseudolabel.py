"""Pseudo-labels for target clips and the hard self-training baseline.

A target clip is accepted when the max softmax probability of the fused
(averaged) logits strictly exceeds the confidence threshold. Prediction
never updates parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ClipSample
from .errors import ConfigError
from .model import TwoStreamModel, fuse_logits
from .sampling import center_window_pair, extract_window, windows_to_tensor


@dataclass(frozen=True)
class PseudoLabelRecord:
    clip_id: str
    predicted_class: int
    confidence: float
    accepted: bool
    step_created: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("confidence threshold must lie in (0, 1]")


def records_from_logits(
    fused_logits: torch.Tensor,
    clip_ids: Sequence[str],
    threshold: float,
    step: int = 0,
) -> list[PseudoLabelRecord]:
    """Softmax the fused logits and gate on max probability > threshold."""
    _check_threshold(threshold)
    if fused_logits.shape[0] != len(clip_ids):
        raise ConfigError("logit rows do not match clip ids")
    probs = F.softmax(fused_logits.detach().double(), dim=1)
    confidences, classes = probs.max(dim=1)
    records = []
    for cid, conf, cls in zip(clip_ids, confidences.tolist(), classes.tolist()):
        records.append(
            PseudoLabelRecord(
                clip_id=cid,
                predicted_class=int(cls),
                confidence=float(conf),
                accepted=float(conf) > threshold,
                step_created=step,
            )
        )
    return records


@torch.no_grad()
def predict_pseudo_labels(
    model: TwoStreamModel,
    clips: Sequence[ClipSample],
    threshold: float,
    *,
    step: int = 0,
    rng: np.random.Generator | None = None,
) -> list[PseudoLabelRecord]:
    """One record per clip from fused center-window predictions.

    Pass an rng to sample the windows instead (the trainer does its own
    window bookkeeping and calls `records_from_logits` directly).
    """
    _check_threshold(threshold)
    if not clips:
        return []
    window = model.config.window_length
    app_windows, mot_windows, ids = [], [], []
    for clip in clips:
        if rng is None:
            pair = center_window_pair(clip, window)
        else:
            from .sampling import sample_window_pair

            pair = sample_window_pair(clip, window, rng)
        app_windows.append(extract_window(clip, pair, "appearance"))
        mot_windows.append(extract_window(clip, pair, "motion"))
        ids.append(clip.clip_id)
    was_training = model.training
    model.eval()
    try:
        f_app = model.encode(windows_to_tensor(app_windows), "appearance", ids)
        f_mot = model.encode(windows_to_tensor(mot_windows), "motion", ids)
        fused = fuse_logits(
            model.stream_logits(f_app, "appearance"),
            model.stream_logits(f_mot, "motion"),
        )
    finally:
        model.train(was_training)
    return records_from_logits(fused, ids, threshold, step=step)


def accepted_records(records: Sequence[PseudoLabelRecord]) -> list[PseudoLabelRecord]:
    return [r for r in records if r.accepted]


def inject_label_noise(
    records: Sequence[PseudoLabelRecord],
    noise_fraction: float,
    num_classes: int,
    rng: np.random.Generator,
) -> list[PseudoLabelRecord]:
    """Flip each accepted record's class to a random other class w.p. noise_fraction.

    Robustness-probe plumbing; a zero fraction returns the records as-is.
    """
    if noise_fraction <= 0:
        return list(records)
    if not 0.0 <= noise_fraction < 1.0:
        raise ConfigError("noise fraction must lie in [0, 1)")
    if num_classes < 2:
        raise ConfigError("label noise needs at least two classes")
    out = []
    for record in records:
        if record.accepted and rng.random() < noise_fraction:
            shifted = int(rng.integers(1, num_classes))
            flipped = (record.predicted_class + shifted) % num_classes
            out.append(
                PseudoLabelRecord(
                    clip_id=record.clip_id,
                    predicted_class=flipped,
                    confidence=record.confidence,
                    accepted=True,
                    step_created=record.step_created,
                )
            )
        else:
            out.append(record)
    return out


def self_training_loss(
    logits_appearance: torch.Tensor,
    logits_motion: torch.Tensor,
    clip_ids: Sequence[str],
    records: Sequence[PseudoLabelRecord],
    *,
    per_stream: bool = True,
) -> torch.Tensor:
    """Cross-entropy of target logits against accepted pseudo-labels.

    Zero when nothing is accepted. This is the hard baseline the
    contrastive cross-domain loss is compared against.
    """
    accepted = {r.clip_id: r.predicted_class for r in records if r.accepted}
    rows = [i for i, cid in enumerate(clip_ids) if cid in accepted]
    if not rows:
        return torch.zeros((), dtype=logits_appearance.dtype)
    labels = torch.as_tensor(
        [accepted[clip_ids[i]] for i in rows], dtype=torch.long
    )
    idx = torch.as_tensor(rows, dtype=torch.long)
    la = logits_appearance.index_select(0, idx)
    lm = logits_motion.index_select(0, idx)
    if per_stream:
        return F.cross_entropy(la, labels) + F.cross_entropy(lm, labels)
    return F.cross_entropy(0.5 * (la + lm), labels)
