"""Patch-size curriculum plans and positive-biased patch sampling over labeled volumes."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

# (patch edge, batch size, epochs) ahead of the final whole-image stage
PATCH_STAGES = ((64, 16, 4800), (128, 4, 1200))
WHOLE_IMAGE_STAGE = (1, 300)
LEARNING_RATE = 1e-3
OPTIMIZER = "rmsprop"


@dataclass(frozen=True)
class CurriculumStage:
    patch_size: tuple[int, int, int]
    batch_size: int
    epochs: int
    learning_rate: float = LEARNING_RATE
    optimizer: str = OPTIMIZER
    sampling: str = "positive_biased"  # or whole_image
    reset_optimizer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if any(v <= 0 for v in self.patch_size):
            raise ValueError(f"patch dimensions must be positive, got {self.patch_size}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.sampling not in ("positive_biased", "whole_image"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


@dataclass(frozen=True)
class CurriculumPlan:
    stages: tuple[CurriculumStage, ...]
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        for a, b in zip(self.stages, self.stages[1:]):
            if any(x > y for x, y in zip(a.patch_size, b.patch_size)):
                raise ValueError(f"patch sizes must not shrink: {a.patch_size} -> {b.patch_size}")

    @property
    def flagged(self) -> bool:
        return bool(self.notes)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "patch": list(s.patch_size),
                    "batch": s.batch_size,
                    "epochs": s.epochs,
                    "lr": s.learning_rate,
                    "optimizer": s.optimizer,
                    "sampling": s.sampling,
                    "reset_optimizer": s.reset_optimizer,
                }
                for s in self.stages
            ],
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CurriculumPlan":
        stages = tuple(
            CurriculumStage(
                patch_size=tuple(s["patch"]),
                batch_size=int(s["batch"]),
                epochs=int(s["epochs"]),
                learning_rate=float(s["lr"]),
                optimizer=str(s["optimizer"]),
                sampling=str(s["sampling"]),
                reset_optimizer=bool(s.get("reset_optimizer", True)),
            )
            for s in data["stages"]
        )
        return cls(stages, tuple(data.get("notes", ())))


def default_plan(whole_image_shape: Sequence[int]) -> CurriculumPlan:
    """Small positive patches, then medium ones, then the whole image.

    Patch stages are clamped per axis to the image; a stage whose clamped
    patch is the whole image is dropped (the final stage covers it) and the
    plan is flagged.
    """
    shape = tuple(int(v) for v in whole_image_shape)
    if len(shape) != 3 or any(v <= 0 for v in shape):
        raise ValueError(f"whole image shape must be three positive ints, got {shape}")
    notes: list[str] = []
    stages: list[CurriculumStage] = []
    for edge, batch, epochs in PATCH_STAGES:
        patch = tuple(min(edge, v) for v in shape)
        if patch != (edge,) * 3:
            notes.append(f"{edge}^3 patch clamped to {patch} for image {shape}")
        if patch == shape:
            notes.append(f"{edge}^3 stage dropped: patch covers the whole image")
            continue
        stages.append(CurriculumStage(patch, batch, epochs))
    batch, epochs = WHOLE_IMAGE_STAGE
    stages.append(CurriculumStage(shape, batch, epochs, sampling="whole_image"))
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return CurriculumPlan(tuple(stages), tuple(notes))


@dataclass(frozen=True)
class PatchSample:
    patch: np.ndarray
    labels: np.ndarray
    origin: tuple[int, ...]
    positive: bool


def _box_counts(labels: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Foreground voxel count of the patch at every valid origin (summed-area table)."""
    fg = (labels > 0).astype(np.int64)
    table = np.pad(fg, [(1, 0)] * fg.ndim)
    for axis in range(fg.ndim):
        table = np.cumsum(table, axis=axis)
    out_shape = tuple(n - s + 1 for n, s in zip(fg.shape, size))
    total = np.zeros(out_shape, dtype=np.int64)
    for corner in np.ndindex(*(2,) * fg.ndim):
        sign = (-1) ** (fg.ndim - sum(corner))
        idx = tuple(slice(c * s, c * s + o) for c, s, o in zip(corner, size, out_shape))
        total += sign * table[idx]
    return total


def qualifying_origins(labels: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Origins (as an ``(n, ndim)`` array) whose patch touches foreground."""
    return np.argwhere(_box_counts(labels, size) > 0)


def _check_size(spatial: Sequence[int], size: Sequence[int]) -> tuple[int, ...]:
    size = tuple(int(v) for v in size)
    if len(size) != len(spatial):
        raise ValueError(f"patch size {size} does not match volume rank {len(spatial)}")
    if any(s <= 0 or s > n for s, n in zip(size, spatial)):
        raise ValueError(f"patch size {size} does not fit in volume {tuple(spatial)}")
    return size


def sample_positive_patch(
    volume: np.ndarray, labels: np.ndarray, size: Sequence[int], rng_seed: int
) -> PatchSample:
    """Draw a patch uniformly among origins whose patch contains foreground.

    ``volume`` may carry leading channel axes; the trailing axes must match
    ``labels``. Without any foreground the origin is uniform over all valid
    origins and the sample is marked negative.
    """
    spatial = labels.shape
    if volume.shape[volume.ndim - labels.ndim :] != spatial:
        raise ValueError(f"volume {volume.shape} and labels {labels.shape} differ spatially")
    size = _check_size(spatial, size)
    rng = np.random.default_rng(rng_seed)
    candidates = qualifying_origins(labels, size)
    positive = len(candidates) > 0
    if positive:
        origin = tuple(int(v) for v in candidates[rng.integers(len(candidates))])
    else:
        origin = tuple(int(rng.integers(n - s + 1)) for n, s in zip(spatial, size))
    window = tuple(slice(o, o + s) for o, s in zip(origin, size))
    lead = (slice(None),) * (volume.ndim - labels.ndim)
    return PatchSample(volume[lead + window], labels[window], origin, positive)


def expected_foreground_fraction(labels: np.ndarray, patch_size: Sequence[int]) -> float:
    """Exact mean foreground fraction over all qualifying origins."""
    size = _check_size(labels.shape, patch_size)
    counts = _box_counts(labels, size)
    hits = counts[counts > 0]
    if hits.size == 0:
        return 0.0
    return float(hits.mean() / np.prod(size))


def imbalance_ratio(labels: np.ndarray, patch_size: Sequence[int], n_samples: int, rng_seed: int) -> float:
    """Monte-Carlo mean foreground fraction under positive-biased sampling."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    size = _check_size(labels.shape, patch_size)
    counts = _box_counts(labels, size)
    hits = counts[counts > 0]
    if hits.size == 0:
        return 0.0
    rng = np.random.default_rng(rng_seed)
    picks = hits[rng.integers(hits.size, size=n_samples)]
    return float(picks.mean() / np.prod(size))


def blob_volume(shape: Sequence[int], origin: Sequence[int], extent: Sequence[int]) -> np.ndarray:
    """Binary label volume holding one axis-aligned box of foreground."""
    labels = np.zeros(tuple(shape), dtype=np.uint8)
    labels[tuple(slice(o, o + e) for o, e in zip(origin, extent))] = 1
    return labels


def plan_summary(plan: CurriculumPlan) -> list[dict]:
    return [asdict(s) for s in plan.stages]
