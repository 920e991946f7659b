"""Synthetic two-domain, two-modality clip corpus plus feature-file ingestion.

The synthetic task: a bright sprite drifts over a textured background. The
class is the sprite's motion pattern (heading family with a transverse
wobble), so class identity is recoverable from the motion fields alone.
The target domain shifts the appearance channel only (background palette,
viewpoint zoom/offset, pixel noise); the motion modality is derived from
the sprite trajectory and stays essentially unshifted, which makes the
appearance stream domain-biased and the motion stream domain-stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError, LabelAccessError, UnknownClipError

DOMAINS = ("source", "target")
MODALITIES = ("appearance", "motion")

# Rendering constants. Appearance is RGB in [0, 1]; motion is a dense
# two-channel displacement field normalized by MAX_SPEED into [-1, 1].
APPEARANCE_CHANNELS = 3
MOTION_CHANNELS = 2
MAX_SPEED = 2.0
SPRITE_COLOR = np.array([0.95, 0.90, 0.82], dtype=np.float64)
SOURCE_PALETTE = np.array([0.22, 0.42, 0.62], dtype=np.float64)
PALETTE_SHIFT_DIRECTION = np.array([0.55, -0.28, -0.50], dtype=np.float64)
BG_AMPLITUDE = 0.12
SPRITE_RADIUS = 2.4


@dataclass(frozen=True)
class DomainShift:
    """Appearance-side shift applied to target-domain clips only."""

    background_palette_shift: float = 0.0
    viewpoint_jitter: float = 0.0
    noise_level: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one reproducible synthetic corpus."""

    num_classes: int
    clips_per_class_per_domain: int
    clip_length: int
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0
    image_size: int = 24

    def validate(self) -> None:
        if self.num_classes <= 0 or self.clips_per_class_per_domain <= 0:
            raise ConfigError("class and clip counts must be positive")
        if self.clip_length < 2:
            raise ConfigError("clip_length must be >= 2")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        raw = dict(raw)
        shift = raw.pop("domain_shift", {})
        try:
            return cls(domain_shift=DomainShift(**shift), **raw)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from exc


@dataclass
class ClipSample:
    """One video clip: per-modality frame stacks plus an optional label.

    `label` is populated for source clips. Target clips carry None here;
    their ground truth lives behind ``Corpus.eval_label``.
    """

    clip_id: str
    domain: str
    frames_appearance: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    frames_motion: np.ndarray  # [T, H, W, 2] float32, displacement / MAX_SPEED
    label: int | None = None

    @property
    def clip_length(self) -> int:
        return self.frames_appearance.shape[0]

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise DataFormatError(f"{self.clip_id}: unknown domain {self.domain!r}")
        if self.frames_appearance.shape[0] != self.frames_motion.shape[0]:
            raise DataFormatError(
                f"{self.clip_id}: appearance/motion time extents differ"
            )
        if self.domain == "source" and self.label is None:
            raise DataFormatError(f"{self.clip_id}: source clip without label")


class Corpus:
    """Clip collection with eval-only access to target ground truth.

    Target labels are not stored on the ClipSample; they sit in a side
    table that raises unless read inside :meth:`eval_access`. The trainer
    additionally locks the table for the duration of its step loop.
    """

    def __init__(
        self,
        clips: Sequence[ClipSample],
        spec: SyntheticSpec | None = None,
        eval_labels: dict[str, int] | None = None,
    ):
        self.clips = list(clips)
        self.spec = spec
        self._eval_labels = dict(eval_labels or {})
        self._by_id = {c.clip_id: c for c in self.clips}
        if len(self._by_id) != len(self.clips):
            raise DataFormatError("duplicate clip_id in corpus")
        self._eval_ok = True
        self._locked = False
        for clip in self.clips:
            clip.validate()

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[ClipSample]:
        return iter(self.clips)

    def get(self, clip_id: str) -> ClipSample:
        try:
            return self._by_id[clip_id]
        except KeyError:
            raise UnknownClipError(f"unknown clip_id {clip_id!r}") from None

    def ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]

    def domains(self) -> set[str]:
        return {c.domain for c in self.clips}

    def by_domain(self, domain: str) -> "Corpus":
        clips = [c for c in self.clips if c.domain == domain]
        labels = {c.clip_id: self._eval_labels[c.clip_id] for c in clips
                  if c.clip_id in self._eval_labels}
        return Corpus(clips, spec=self.spec, eval_labels=labels)

    def class_index(self) -> dict[int, list[str]]:
        """Label -> clip ids, from the trainer-visible labels only."""
        index: dict[int, list[str]] = {}
        for clip in self.clips:
            if clip.label is not None:
                index.setdefault(clip.label, []).append(clip.clip_id)
        return index

    # -- guarded ground-truth access ------------------------------------

    @contextmanager
    def eval_access(self):
        """Scope in which held-out labels may be read (evaluation only)."""
        previous = self._eval_ok
        self._eval_ok = True
        try:
            yield self
        finally:
            self._eval_ok = previous

    @contextmanager
    def labels_locked(self):
        """Scope in which held-out label reads raise (training loop)."""
        previous = self._eval_ok
        self._eval_ok = False
        try:
            yield self
        finally:
            self._eval_ok = previous

    def eval_label(self, clip_id: str) -> int:
        if not self._eval_ok:
            raise LabelAccessError(
                "held-out labels are locked inside the training loop"
            )
        clip = self.get(clip_id)
        if clip.label is not None:
            return clip.label
        try:
            return self._eval_labels[clip_id]
        except KeyError:
            raise UnknownClipError(f"no held-out label for {clip_id!r}") from None

    def has_eval_label(self, clip_id: str) -> bool:
        clip = self.get(clip_id)
        return clip.label is not None or clip_id in self._eval_labels

    def with_exposed_labels(self) -> "Corpus":
        """Copy with held-out labels inlined onto the clips.

        Only for the supervised-target upper bound; never feed the result
        to an adaptation run as the target corpus.
        """
        clips = [
            replace(c, label=self._eval_labels.get(c.clip_id, c.label))
            for c in self.clips
        ]
        return Corpus(clips, spec=self.spec, eval_labels=dict(self._eval_labels))

    def check_min_length(self, window_length: int) -> None:
        bad = [c.clip_id for c in self.clips if c.clip_length < window_length]
        if bad:
            raise DataFormatError(
                f"clips shorter than window_length={window_length}: {bad[:5]}"
            )

    def fingerprint(self) -> str:
        """SHA-256 over metadata and raw frame bytes, order-sensitive."""
        digest = hashlib.sha256()
        for clip in self.clips:
            meta = f"{clip.clip_id}|{clip.domain}|{clip.label}|" \
                   f"{self._eval_labels.get(clip.clip_id)}"
            digest.update(meta.encode())
            digest.update(np.ascontiguousarray(clip.frames_appearance).tobytes())
            digest.update(np.ascontiguousarray(clip.frames_motion).tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def _trajectory(
    spec: SyntheticSpec, class_idx: int, zoom: float, offset: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Sprite center positions [T, 2] and the rendered radius.

    Heading angle encodes the class; a transverse sine wobble plus heading
    jitter provides intra-class variation. The start point is drawn so the
    whole path stays inside the frame; if no start fits, speed and wobble
    shrink until one does.
    """
    size = spec.image_size
    t = np.arange(spec.clip_length, dtype=np.float64)
    heading = 2.0 * math.pi * class_idx / spec.num_classes
    heading += rng.uniform(-0.4, 0.4) * math.pi / spec.num_classes
    speed = rng.uniform(0.35, 0.60) * zoom
    amplitude = rng.uniform(0.6, 1.6) * zoom
    period = rng.uniform(8.0, 14.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    radius = SPRITE_RADIUS * zoom
    forward = np.array([math.cos(heading), math.sin(heading)])
    transverse = np.array([-math.sin(heading), math.cos(heading)])

    margin = radius + 1.5
    for _ in range(16):
        path = (speed * t)[:, None] * forward[None, :]
        path = path + (amplitude * np.sin(2.0 * math.pi * t / period + phase))[
            :, None
        ] * transverse[None, :]
        lo = path.min(axis=0)
        hi = path.max(axis=0)
        span = hi - lo
        if np.all(span <= size - 2.0 * margin):
            break
        speed *= 0.85
        amplitude *= 0.85
    start_lo = margin - lo
    start_hi = size - margin - hi
    start = np.array([
        rng.uniform(start_lo[0], max(start_hi[0], start_lo[0] + 1e-9)),
        rng.uniform(start_lo[1], max(start_hi[1], start_lo[1] + 1e-9)),
    ])
    positions = start[None, :] + path + offset[None, :]
    positions = np.clip(positions, margin, size - margin)
    return positions, radius


def _render_clip(
    spec: SyntheticSpec, domain: str, class_idx: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    shift = spec.domain_shift
    shifted = domain == "target"

    zoom = 1.0
    offset = np.zeros(2)
    if shifted and shift.viewpoint_jitter > 0:
        zoom = 1.0 + shift.viewpoint_jitter * rng.uniform(-0.06, 0.06)
        offset = shift.viewpoint_jitter * rng.uniform(-1.0, 1.0, size=2)
    elif shifted:
        # Keep the draw count identical across shift settings so a zeroed
        # shift reproduces the source clip distribution exactly.
        rng.uniform(-0.06, 0.06)
        rng.uniform(-1.0, 1.0, size=2)

    positions, radius = _trajectory(spec, class_idx, zoom, offset, rng)

    palette = SOURCE_PALETTE.copy()
    if shifted:
        palette = palette + shift.background_palette_shift * PALETTE_SHIFT_DIRECTION
    palette = np.clip(palette, 0.05, 0.95)

    phase_x = rng.uniform(0.0, size)
    phase_y = rng.uniform(0.0, size)
    ys = np.arange(size, dtype=np.float64)
    xs = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    texture = np.sin(2.0 * math.pi * (xx + phase_x) / size) * np.cos(
        2.0 * math.pi * (yy + phase_y) / size
    )
    background = np.clip(
        palette[None, None, :] + BG_AMPLITUDE * texture[:, :, None], 0.0, 1.0
    )

    # Soft sprite mask per frame: [T, H, W].
    dy = yy[None, :, :] - positions[:, 1][:, None, None]
    dx = xx[None, :, :] - positions[:, 0][:, None, None]
    mask = np.exp(-(dx * dx + dy * dy) / (radius * radius))

    appearance = background[None, :, :, :] * (1.0 - mask[..., None])
    appearance = appearance + SPRITE_COLOR[None, None, None, :] * mask[..., None]
    if shifted and shift.noise_level > 0:
        appearance = appearance + shift.noise_level * rng.standard_normal(
            appearance.shape
        )
    elif shifted:
        rng.standard_normal(appearance.shape)
    appearance = np.clip(appearance, 0.0, 1.0)

    displacement = np.diff(positions, axis=0)
    displacement = np.concatenate([displacement, displacement[-1:]], axis=0)
    motion = mask[..., None] * displacement[:, None, None, :] / MAX_SPEED
    # Channel order (dx, dy); displacement[:, 0] is x by construction.
    return appearance.astype(np.float32), np.clip(motion, -1.0, 1.0).astype(
        np.float32
    )


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Build the two-domain corpus deterministically from the spec seed.

    Source clips carry labels; target ground truth goes to the corpus's
    eval-only table.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clips: list[ClipSample] = []
    eval_labels: dict[str, int] = {}
    for domain in DOMAINS:
        tag = "src" if domain == "source" else "tgt"
        for class_idx in range(spec.num_classes):
            for i in range(spec.clips_per_class_per_domain):
                clip_id = f"{tag}-c{class_idx}-{i:04d}"
                appearance, motion = _render_clip(spec, domain, class_idx, rng)
                if domain == "source":
                    label: int | None = class_idx
                else:
                    label = None
                    eval_labels[clip_id] = class_idx
                clips.append(
                    ClipSample(
                        clip_id=clip_id,
                        domain=domain,
                        frames_appearance=appearance,
                        frames_motion=motion,
                        label=label,
                    )
                )
    return Corpus(clips, spec=spec, eval_labels=eval_labels)


# ---------------------------------------------------------------------------
# Corpus serialization: manifest.json + one little-endian f32 .bin per
# clip per modality
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for clip in corpus.clips:
        entry: dict = {
            "clip_id": clip.clip_id,
            "domain": clip.domain,
            "label": clip.label,
            "eval_label": corpus._eval_labels.get(clip.clip_id),
        }
        for modality, frames in (
            ("appearance", clip.frames_appearance),
            ("motion", clip.frames_motion),
        ):
            name = f"{clip.clip_id}.{modality}.bin"
            arr = np.ascontiguousarray(frames, dtype="<f4")
            (out / name).write_bytes(arr.tobytes())
            entry[modality] = {"file": name, "shape": list(arr.shape)}
        index.append(entry)
    manifest = {
        "format": "comoda-corpus",
        "version": 1,
        "spec": corpus.spec.to_dict() if corpus.spec else None,
        "clips": index,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out


def load_corpus(in_dir: str | Path) -> Corpus:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != "comoda-corpus":
        raise DataFormatError("not a corpus directory")
    spec = (
        SyntheticSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    )
    clips = []
    eval_labels: dict[str, int] = {}
    for entry in manifest["clips"]:
        arrays = {}
        for modality in MODALITIES:
            meta = entry[modality]
            raw = (root / meta["file"]).read_bytes()
            arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
            arrays[modality] = arr
        if entry.get("eval_label") is not None:
            eval_labels[entry["clip_id"]] = int(entry["eval_label"])
        clips.append(
            ClipSample(
                clip_id=entry["clip_id"],
                domain=entry["domain"],
                frames_appearance=arrays["appearance"],
                frames_motion=arrays["motion"],
                label=entry.get("label"),
            )
        )
    return Corpus(clips, spec=spec, eval_labels=eval_labels)


# ---------------------------------------------------------------------------
# Precomputed feature files: CSV with header
# clip_id,domain,modality,label,d0,...,d{D-1}
# ---------------------------------------------------------------------------


@dataclass
class FeatureFileRecord:
    clip_id: str
    domain: str
    modality: str
    vector: np.ndarray  # 1-D float32
    label: int | None = None


def write_feature_file(records: Sequence[FeatureFileRecord], path: str | Path) -> Path:
    path = Path(path)
    if not records:
        raise DataFormatError("refusing to write an empty feature file")
    dim = len(records[0].vector)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["clip_id", "domain", "modality", "label"] + [f"d{i}" for i in range(dim)]
        )
        for rec in records:
            if len(rec.vector) != dim:
                raise DataFormatError(
                    f"{rec.clip_id}: dimension {len(rec.vector)} != {dim}"
                )
            label = "" if rec.label is None else str(rec.label)
            values = [repr(float(v)) for v in rec.vector]
            writer.writerow([rec.clip_id, rec.domain, rec.modality, label] + values)
    return path


def load_feature_file(path: str | Path) -> list[FeatureFileRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: list[FeatureFileRecord] = []
    seen: set[tuple[str, str]] = set()
    dim: int | None = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["clip_id", "domain", "modality", "label"]:
            raise DataFormatError(f"{path}: bad header")
        expected = len(header) - 4
        if expected < 1:
            raise DataFormatError(f"{path}: header declares no feature columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: dimension mismatch, row carries "
                    f"{len(row) - 4} feature values but header declares {expected}"
                )
            clip_id, domain, modality, label_raw = row[:4]
            if domain not in DOMAINS:
                raise DataFormatError(f"{path}:{lineno}: unknown domain {domain!r}")
            if modality not in MODALITIES:
                raise DataFormatError(
                    f"{path}:{lineno}: unknown modality {modality!r}"
                )
            key = (clip_id, modality)
            if key in seen:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate (clip_id, modality) {key}"
                )
            seen.add(key)
            try:
                vector = np.array([float(v) for v in row[4:]], dtype=np.float32)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if dim is None:
                dim = len(vector)
            elif len(vector) != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: dimension {len(vector)} != {dim}"
                )
            label = None if label_raw == "" else int(label_raw)
            records.append(
                FeatureFileRecord(
                    clip_id=clip_id,
                    domain=domain,
                    modality=modality,
                    vector=vector,
                    label=label,
                )
            )
    return records
