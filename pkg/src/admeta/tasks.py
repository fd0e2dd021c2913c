"""Task sources and episodic N-way K-shot sampling.

A :class:`TaskSource` is an immutable bag of labeled sample tensors
grouped by class. Episodes are drawn from it without replacement at both
levels (classes, then samples within each class), with labels remapped to
a contiguous 0..ways-1 range shared by the support and query sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, GeometryError, IngestionError
from .serialize import load_sample

__all__ = [
    "TaskSource",
    "Episode",
    "SplitSpec",
    "load_image_source",
    "split_classes",
    "sample_episode",
    "synth_blob_source",
]

BLOB_SEPARATION = 1.0


@dataclass(frozen=True)
class TaskSource:
    """Per-class sample tensors with uniform geometry.

    ``classes`` maps a stable class id to a stack of samples with shape
    ``(n_samples, *geometry)``. ``value_range`` records the observed data
    range; attacks use it as the clipping window.
    """

    classes: tuple[tuple[str, np.ndarray], ...]
    geometry: tuple[int, ...]
    value_range: tuple[float, float]

    def __post_init__(self):
        for cid, samples in self.classes:
            if samples.ndim != len(self.geometry) + 1:
                raise GeometryError(f"class {cid!r}: rank mismatch with geometry")
            if tuple(samples.shape[1:]) != self.geometry:
                raise GeometryError(
                    f"class {cid!r}: sample shape {samples.shape[1:]} "
                    f"!= geometry {self.geometry}"
                )

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_sizes(self) -> list[int]:
        return [samples.shape[0] for _, samples in self.classes]


@dataclass(frozen=True)
class Episode:
    """One few-shot task: a support set to adapt on, a query set to score.

    Samples are class-major (all of remapped class 0, then class 1, ...)
    and labels are contiguous ints shared across both sets.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    ways: int
    shots: int

    @property
    def query_per_class(self) -> int:
        return self.query_y.shape[0] // self.ways

    def replaced(self, support_x=None, query_x=None) -> "Episode":
        """Copy with substituted inputs; labels and layout are preserved."""
        return Episode(
            support_x=self.support_x if support_x is None else support_x,
            support_y=self.support_y,
            query_x=self.query_x if query_x is None else query_x,
            query_y=self.query_y,
            ways=self.ways,
            shots=self.shots,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint class partition sizes plus the shuffle seed."""

    train: int
    val: int
    test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ContractError("split counts must be non-negative")


def _observed_range(stacks: Sequence[np.ndarray]) -> tuple[float, float]:
    lo = min(float(s.min()) for s in stacks)
    hi = max(float(s.max()) for s in stacks)
    return lo, hi


def load_image_source(root_path, manifest) -> TaskSource:
    """Build a TaskSource from a manifest of raw-tensor sample files.

    The manifest is UTF-8 text, one ``class_name<TAB>relative_path`` line
    per sample; paths are relative to ``root_path``. Class order follows
    first appearance in the manifest.
    """
    root = Path(root_path)
    try:
        lines = Path(manifest).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read manifest: {e}") from e
    per_class: dict[str, list[np.ndarray]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"manifest line {lineno}: expected name<TAB>path")
        cname, rel = parts
        try:
            arr = load_sample(root / rel)
        except OSError as e:
            raise IngestionError(f"manifest line {lineno}: {e}") from e
        per_class.setdefault(cname, []).append(arr)
    if not per_class:
        raise IngestionError("manifest lists no samples")
    geometry = tuple(next(iter(per_class.values()))[0].shape)
    classes = []
    for cname, samples in per_class.items():
        for s in samples:
            if tuple(s.shape) != geometry:
                raise GeometryError(
                    f"class {cname!r}: sample shape {s.shape} != {geometry}"
                )
        classes.append((cname, np.stack(samples, axis=0)))
    value_range = _observed_range([s for _, s in classes])
    return TaskSource(classes=tuple(classes), geometry=geometry, value_range=value_range)


def split_classes(
    source: TaskSource, spec: SplitSpec
) -> tuple[TaskSource, TaskSource, TaskSource]:
    """Deterministic disjoint partition into train/val/test sources."""
    total = spec.train + spec.val + spec.test
    if total != source.num_classes:
        raise ContractError(
            f"split sizes sum to {total}, source has {source.num_classes} classes"
        )
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = rng.permutation(source.num_classes)
    picks = (
        order[: spec.train],
        order[spec.train : spec.train + spec.val],
        order[spec.train + spec.val :],
    )

    def subset(idx: np.ndarray) -> TaskSource:
        classes = tuple(source.classes[i] for i in sorted(idx.tolist()))
        return TaskSource(
            classes=classes, geometry=source.geometry, value_range=source.value_range
        )

    return subset(picks[0]), subset(picks[1]), subset(picks[2])


def sample_episode(
    source: TaskSource,
    ways: int,
    shots: int,
    query_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one N-way K-shot episode without replacement.

    Classes are chosen uniformly without replacement, then ``shots`` +
    ``query_per_class`` samples per class, index-disjoint between support
    and query. The j-th chosen class becomes label j.
    """
    if ways < 2:
        raise ContractError(f"need ways >= 2, got {ways}")
    if shots < 1 or query_per_class < 1:
        raise ContractError("shots and query_per_class must be >= 1")
    if source.num_classes < ways:
        raise ContractError(
            f"source has {source.num_classes} classes, episode needs {ways}"
        )
    need = shots + query_per_class
    chosen = rng.choice(source.num_classes, size=ways, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for label, ci in enumerate(chosen):
        _, samples = source.classes[int(ci)]
        if samples.shape[0] < need:
            raise ContractError(
                f"class index {int(ci)} has {samples.shape[0]} samples, "
                f"episode needs {need}"
            )
        perm = rng.permutation(samples.shape[0])
        sup_x.append(samples[perm[:shots]])
        qry_x.append(samples[perm[shots:need]])
        sup_y.append(np.full(shots, label, dtype=np.int64))
        qry_y.append(np.full(query_per_class, label, dtype=np.int64))
    return Episode(
        support_x=np.concatenate(sup_x, axis=0),
        support_y=np.concatenate(sup_y, axis=0),
        query_x=np.concatenate(qry_x, axis=0),
        query_y=np.concatenate(qry_y, axis=0),
        ways=ways,
        shots=shots,
    )


def synth_blob_source(
    dim: int,
    classes: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    dtype=np.float64,
) -> TaskSource:
    """Gaussian-cluster stand-in dataset for desk-scale experiments.

    Each class gets a random unit-norm center scaled by a fixed separation
    constant; samples are center + spread * standard normal noise.
    """
    if dim < 2:
        raise ContractError(f"need dim >= 2, got {dim}")
    if classes < 5:
        raise ContractError(f"need at least 5 classes, got {classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for c in range(classes):
        center = rng.standard_normal(dim)
        center *= BLOB_SEPARATION / np.linalg.norm(center)
        noise = rng.standard_normal((samples_per_class, dim))
        samples = (center[None, :] + spread * noise).astype(dtype)
        out.append((f"blob{c:03d}", samples))
    value_range = _observed_range([s for _, s in out])
    return TaskSource(classes=tuple(out), geometry=(dim,), value_range=value_range)
