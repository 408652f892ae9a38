"""Shared domain types, invariant checks and the dataset manifest format."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PAPER_NATIVE_SIZE = (1500, 1500)


class HarnessError(Exception):
    """Base class for every error the harness reports to an operator."""

    kind = "error"

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        return {"error_kind": self.kind, "message": self.message,
                "context": {k: _jsonable(v) for k, v in self.context.items()}}


class ConfigError(HarnessError, ValueError):
    kind = "config_error"


class DataError(HarnessError, ValueError):
    kind = "data_error"


class TrainingError(HarnessError, RuntimeError):
    kind = "training_error"


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


class Task(str, enum.Enum):
    CROSS_ORGAN = "cross_organ"
    CROSS_SCANNER = "cross_scanner"

    @property
    def short(self) -> str:
        return "T1" if self is Task.CROSS_ORGAN else "T2"

    def other(self) -> "Task":
        return Task.CROSS_SCANNER if self is Task.CROSS_ORGAN else Task.CROSS_ORGAN


class Strategy(str, enum.Enum):
    STANDARD = "standard"
    CROSS_TASK = "cross_task"
    UNION = "union"

    @property
    def column_title(self) -> str:
        return {"standard": "Conventional", "cross_task": "Crossed Pre-Training",
                "union": "Dataset Union"}[self.value]


def _frozen_array(values: Any, dtype: Any = None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """An RGB raster of shape (height, width, 3) with values in [0, 1]."""

    id: str
    pixels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _frozen_array(self.pixels, np.float64))

    @property
    def native_size(self) -> tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class DomainLabel:
    task: Task
    domain_name: str
    seen: bool


@dataclass(frozen=True, eq=False)
class Sample:
    patch: ImagePatch
    mask: BinaryMask
    domain: DomainLabel

    @property
    def id(self) -> str:
        return self.patch.id


def validate_sample(sample: Sample) -> list[str]:
    """Return the invariant violations of ``sample`` (empty when well formed)."""
    problems: list[str] = []
    px = sample.patch.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        problems.append(f"image must have shape (h, w, 3), got {px.shape}")
    elif px.shape[0] < 1 or px.shape[1] < 1:
        problems.append("image has an empty spatial dimension")
    if not np.all(np.isfinite(px)):
        problems.append("pixel not finite")
    elif px.size and (px.min() < 0.0 or px.max() > 1.0):
        problems.append("pixel out of range")
    mv = sample.mask.values
    if mv.ndim != 2:
        problems.append(f"mask must be 2-D, got shape {mv.shape}")
    if not np.all(np.isin(mv, (0, 1))):
        problems.append("mask not binary")
    if px.ndim >= 2 and mv.ndim == 2 and px.shape[:2] != mv.shape:
        problems.append(f"mask shape {mv.shape} does not match image shape {px.shape[:2]}")
    if not sample.domain.domain_name:
        problems.append("empty domain name")
    return problems


@dataclass(frozen=True, eq=False)
class TaskDataset:
    task: Task
    samples: tuple[Sample, ...]
    manifest_path: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        seen_ids: set[str] = set()
        seen_flags: dict[str, bool] = {}
        for s in self.samples:
            if s.id in seen_ids:
                raise DataError(f"duplicate sample id {s.id!r}", sample_id=s.id)
            seen_ids.add(s.id)
            if s.domain.task is not self.task:
                raise DataError(f"sample {s.id!r} belongs to task {s.domain.task.value}, "
                                f"dataset is {self.task.value}", sample_id=s.id)
            flag = seen_flags.setdefault(s.domain.domain_name, s.domain.seen)
            if flag != s.domain.seen:
                raise DataError(f"domain {s.domain.domain_name!r} has inconsistent seen flags",
                                sample_id=s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids: Sequence[str]) -> "TaskDataset":
        lookup = self.by_id()
        return TaskDataset(self.task, tuple(lookup[i] for i in ids), self.manifest_path)

    @property
    def domain_names(self) -> list[str]:
        return list(dict.fromkeys(s.domain.domain_name for s in self.samples))


@dataclass(frozen=True)
class SplitPlan:
    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def check(self, ids: Sequence[str]) -> None:
        """Raise ``DataError`` unless the folds partition ``ids`` with balanced sizes."""
        if len(self.folds) != self.k:
            raise DataError(f"expected {self.k} folds, got {len(self.folds)}")
        flat = [i for fold in self.folds for i in fold]
        if len(flat) != len(set(flat)):
            raise DataError("folds overlap")
        if set(flat) != set(ids):
            raise DataError("folds do not cover the dataset id set")
        sizes = [len(f) for f in self.folds]
        if max(sizes) - min(sizes) > 1:
            raise DataError(f"fold sizes unbalanced: {sizes}")

    def train_ids(self, i: int) -> list[str]:
        return [x for j, fold in enumerate(self.folds) if j != i for x in fold]


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the experiment matrix plus the shared training recipe."""

    strategy: Strategy = Strategy.STANDARD
    target_task: Task = Task.CROSS_ORGAN
    base_lr: float = 1e-4
    epochs: int = 30
    train_resolution: tuple[int, int] = (1024, 1024)
    k: int = 5
    seed: int = 0
    model_preset: str = "paper"
    threshold: float = 0.5
    batch_size: int = 4
    cycles: int = 1
    augment: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "target_task", Task(self.target_task))
        object.__setattr__(self, "train_resolution", tuple(int(v) for v in self.train_resolution))
        if not (math.isfinite(self.base_lr) and self.base_lr > 0):
            raise ConfigError("base_lr must be positive", base_lr=self.base_lr)
        for name in ("epochs", "k", "batch_size", "cycles"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer", **{name: getattr(self, name)})
        if self.epochs % self.cycles:
            raise ConfigError("epochs must be a multiple of cycles",
                              epochs=self.epochs, cycles=self.cycles)
        if len(self.train_resolution) != 2 or min(self.train_resolution) < 1:
            raise ConfigError("train_resolution must be (h, w) with positive entries",
                              train_resolution=self.train_resolution)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)", threshold=self.threshold)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64", dtype=self.dtype)

    def with_(self, **changes: Any) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value, "target_task": self.target_task.value,
            "base_lr": self.base_lr, "epochs": self.epochs,
            "train_resolution": list(self.train_resolution), "k": self.k, "seed": self.seed,
            "model_preset": self.model_preset, "threshold": self.threshold,
            "batch_size": self.batch_size, "cycles": self.cycles, "augment": self.augment,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        return cls(**d)


# -- raster IO ---------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)


def read_mask(path: Path, sample_id: str = "") -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L")).astype(np.float64) / 255.0
    binary = arr >= 0.5
    if not np.all((arr == 0.0) | (arr == 1.0)):
        log.warning("mask for sample %r is not binary; thresholded at 0.5", sample_id)
    return binary.astype(np.uint8)


def write_image(path: Path, pixels: np.ndarray) -> None:
    q = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)


def write_mask(path: Path, values: np.ndarray) -> None:
    q = (np.asarray(values) > 0).astype(np.uint8) * 255
    Image.fromarray(q, mode="L").save(path, format="PNG", optimize=False)


# -- manifests ---------------------------------------------------------------

def load_manifest(path: str | Path) -> TaskDataset:
    """Read a dataset manifest and its PNG rasters.

    Sample order follows the manifest.  Every failure is raised as
    ``DataError`` naming the offending sample id where one exists.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text())
        task = Task(doc["task"])
        entries = doc["samples"]
        if not isinstance(entries, list):
            raise TypeError("'samples' must be a list")
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}", path=str(path)) from exc

    root = path.parent
    samples: list[Sample] = []
    ids: set[str] = set()
    for entry in entries:
        try:
            sid = str(entry["id"])
            image_rel, mask_rel = entry["image"], entry["mask"]
            domain, seen = str(entry["domain"]), bool(entry["seen"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest entry in {path}: {exc}", path=str(path)) from exc
        if sid in ids:
            raise DataError(f"duplicate sample id {sid!r}", sample_id=sid, path=str(path))
        ids.add(sid)
        try:
            pixels = read_image(root / image_rel)
            mask = read_mask(root / mask_rel, sid)
        except OSError as exc:
            raise DataError(f"cannot read raster for sample {sid!r}: {exc}", sample_id=sid) from exc
        if pixels.shape[:2] != mask.shape:
            raise DataError(f"sample {sid!r}: mask is {mask.shape[0]}x{mask.shape[1]} but image is "
                            f"{pixels.shape[0]}x{pixels.shape[1]}", sample_id=sid)
        sample = Sample(ImagePatch(sid, pixels), BinaryMask(mask), DomainLabel(task, domain, seen))
        problems = validate_sample(sample)
        if problems:
            raise DataError(f"sample {sid!r}: {'; '.join(problems)}", sample_id=sid)
        samples.append(sample)
    return TaskDataset(task, tuple(samples), str(path))


def save_manifest(dataset: TaskDataset, directory: str | Path) -> TaskDataset:
    """Write ``dataset`` as PNG rasters plus ``manifest.json`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        image_rel = f"images/{s.id}.png"
        mask_rel = f"masks/{s.id}.png"
        write_image(directory / image_rel, s.patch.pixels)
        write_mask(directory / mask_rel, s.mask.values)
        entries.append({"id": s.id, "image": image_rel, "mask": mask_rel,
                        "domain": s.domain.domain_name, "seen": s.domain.seen})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"task": dataset.task.value, "samples": entries}, indent=1) + "\n")
    return TaskDataset(dataset.task, dataset.samples, str(manifest))
