"""Dice scoring, fold ensembling and mean +/- std reporting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .core import BinaryMask, DataError, ExperimentConfig, Sample, TaskDataset
from .raster import resize_bilinear


class EnsembleMismatchError(DataError):
    kind = "ensemble_mismatch"


def _values(mask: BinaryMask | np.ndarray) -> np.ndarray:
    return np.asarray(mask.values if isinstance(mask, BinaryMask) else mask)


def dice(pred: BinaryMask | np.ndarray, gt: BinaryMask | np.ndarray) -> float:
    """2|P and G| / (|P| + |G|); two empty masks score 1.0."""
    p, g = _values(pred) != 0, _values(gt) != 0
    if p.shape != g.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def sigmoid_map(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def threshold(prob: np.ndarray, t: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= t).astype(np.uint8)


def ensemble(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise mean of member probability maps."""
    if len(maps) == 0:
        raise DataError("cannot ensemble an empty list of maps")
    shape = np.shape(maps[0])
    if any(np.shape(m) != shape for m in maps):
        raise DataError("ensemble members have different shapes",
                        shapes=[np.shape(m) for m in maps])
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        acc += m
    return acc / len(maps)


def _model_dtype(model: torch.nn.Module) -> torch.dtype:
    p = next(model.parameters(), None)
    return p.dtype if p is not None else torch.float64


def predict(models: Sequence[torch.nn.Module], sample: Sample, config: ExperimentConfig) -> np.ndarray:
    """Ensembled foreground probability at the sample's native resolution.

    The image is resized to the training resolution, each model's logits
    pass through a sigmoid, the maps are averaged, and the average is
    resized bilinearly back to the native size.
    """
    prints = {m.fingerprint() for m in models}
    if len(prints) > 1:
        raise EnsembleMismatchError("ensemble members have different architecture fingerprints")
    native = sample.patch.native_size
    image = resize_bilinear(sample.patch.pixels, config.train_resolution)
    maps = []
    for m in models:
        x = torch.from_numpy(image.transpose(2, 0, 1).copy())[None].to(_model_dtype(m))
        was_training = m.training
        m.eval()
        with torch.no_grad():
            logits = m(x)[0, 0].double().numpy()
        m.train(was_training)
        maps.append(sigmoid_map(logits))
    return np.clip(resize_bilinear(ensemble(maps), native), 0.0, 1.0)


def aggregate(scores: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator, 0 for a single score)."""
    xs = [float(s) for s in scores]
    if not xs:
        raise DataError("cannot aggregate an empty score list")
    n = len(xs)
    mean = math.fsum(xs) / n
    if n == 1:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1))


def format_cell(mean: float, std: float | None = None) -> str:
    if std is None:
        return f"{100 * mean:.2f}"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


@dataclass(frozen=True)
class ImageScore:
    id: str
    domain: str
    seen: bool
    dice: float


class MetricsReport:
    """Per-image Dice scores, kept sorted by sample id, with derived aggregates."""

    def __init__(self, per_image: Iterable[ImageScore]) -> None:
        self.per_image = sorted(per_image, key=lambda r: r.id)
        ids = [r.id for r in self.per_image]
        if len(ids) != len(set(ids)):
            raise DataError("duplicate sample ids in metrics report")

    def __len__(self) -> int:
        return len(self.per_image)

    @property
    def scores(self) -> list[float]:
        return [r.dice for r in self.per_image]

    @property
    def aggregate(self) -> tuple[float, float] | None:
        return aggregate(self.scores) if self.per_image else None

    def _grouped(self, key) -> dict[Any, tuple[float, float]]:
        groups: dict[Any, list[float]] = {}
        for r in self.per_image:
            groups.setdefault(key(r), []).append(r.dice)
        return {k: aggregate(v) for k, v in sorted(groups.items())}

    @property
    def per_domain(self) -> dict[str, tuple[float, float]]:
        return self._grouped(lambda r: r.domain)

    @property
    def per_seen(self) -> dict[str, tuple[float, float]]:
        return self._grouped(lambda r: "seen" if r.seen else "unseen")

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(list(self.per_image) + list(other.per_image))

    def to_dict(self) -> dict[str, Any]:
        agg = self.aggregate
        return {
            "per_image": [asdict(r) for r in self.per_image],
            "aggregate": None if agg is None else {"mean": agg[0], "std": agg[1], "n": len(self)},
            "per_domain": {k: {"mean": m, "std": s} for k, (m, s) in self.per_domain.items()},
            "per_seen": {k: {"mean": m, "std": s} for k, (m, s) in self.per_seen.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricsReport":
        return cls(ImageScore(**r) for r in d["per_image"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".csv").write_text(self.to_csv())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "domain", "seen", "dice"])
        for r in self.per_image:
            w.writerow([r.id, r.domain, str(r.seen).lower(), repr(r.dice)])
        return buf.getvalue()


def evaluate(models: Sequence[torch.nn.Module], dataset: TaskDataset, config: ExperimentConfig) -> MetricsReport:
    """Threshold the ensembled prediction of every sample and score it against its mask."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset", path=dataset.manifest_path)
    rows = []
    for s in dataset.samples:
        pred = threshold(predict(models, s, config), config.threshold)
        rows.append(ImageScore(s.id, s.domain.domain_name, s.domain.seen, dice(pred, s.mask)))
    return MetricsReport(rows)
