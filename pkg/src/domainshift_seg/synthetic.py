"""Seeded synthetic benchmark with seen and unseen appearance domains.

Each task gets ``n_seen + n_unseen`` domain styles.  Cross-scanner domains
share one tissue family and differ in colour response; cross-organ domains
share the colour response and differ in texture scale, lesion contrast and
lesion shape.  Unseen styles are drawn from parameter bands disjoint from
the seen ones, and the organ shift is the harder of the two by design.

Random streams are keyed hierarchically as (seed, task, domain, sample),
so growing one domain never changes another.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (BinaryMask, ConfigError, DomainLabel, ImagePatch, Sample, Task, TaskDataset,
                   save_manifest)

log = logging.getLogger(__name__)

_TASK_KEY = {Task.CROSS_ORGAN: 1, Task.CROSS_SCANNER: 2}
_STYLE_STREAM, _SAMPLE_STREAM = 0, 1
# optical density -> RGB absorption, roughly an H&E purple on pink
_STAIN = np.array([0.45, 0.75, 0.35])
_BLOB_LEVEL = 0.5


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_seen_domains: int = 3
    n_unseen_domains: int = 3
    samples_per_domain: int = 10
    patch_size: tuple[int, int] = (64, 64)
    lesion_count_range: tuple[int, int] = (1, 3)
    holdout_fraction: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        if self.n_seen_domains < 1 or self.n_unseen_domains < 0:
            raise ConfigError("need at least one seen domain and a non-negative unseen count")
        if self.samples_per_domain < 1:
            raise ConfigError("samples_per_domain must be >= 1")
        if min(self.patch_size) < 16:
            raise ConfigError("patch_size must be at least 16x16", patch_size=self.patch_size)
        lo, hi = self.lesion_count_range
        if lo < 1 or hi < lo:
            raise ConfigError("lesion_count_range must satisfy 1 <= min <= max",
                              lesion_count_range=self.lesion_count_range)
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.samples_per_domain - self.n_holdout < 1:
            raise ConfigError("holdout leaves no training samples per seen domain")

    @property
    def n_holdout(self) -> int:
        return int(round(self.samples_per_domain * self.holdout_fraction))


@dataclass(frozen=True, eq=False)
class DomainStyle:
    name: str
    task: Task
    seen: bool
    color_matrix: np.ndarray
    color_offset: np.ndarray
    texture_frequency: float
    noise_level: float
    lesion_contrast: float
    blob_scale: float
    blob_anisotropy: float

    def apply_color(self, rgb: np.ndarray) -> np.ndarray:
        return np.clip(rgb @ self.color_matrix.T + self.color_offset, 0.0, 1.0)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _signed_band(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))


def make_styles(config: GeneratorConfig, task: Task) -> list[DomainStyle]:
    task = Task(task)
    styles = []
    prefix = "organ" if task is Task.CROSS_ORGAN else "scanner"
    for d in range(config.n_seen_domains + config.n_unseen_domains):
        seen = d < config.n_seen_domains
        rng = _rng(config.seed, _TASK_KEY[task], d, _STYLE_STREAM)
        if task is Task.CROSS_SCANNER:
            if seen:
                gains = rng.uniform(0.9, 1.1, 3)
                mixing = rng.uniform(-0.04, 0.04, (3, 3))
                offset = rng.uniform(-0.03, 0.03, 3)
                noise = rng.uniform(0.01, 0.03)
            else:
                gains = 1.0 + np.array([_signed_band(rng, 0.1, 0.18) for _ in range(3)])
                mixing = np.array([[_signed_band(rng, 0.04, 0.07) for _ in range(3)] for _ in range(3)])
                offset = np.array([_signed_band(rng, 0.03, 0.06) for _ in range(3)])
                noise = rng.uniform(0.03, 0.05)
            np.fill_diagonal(mixing, 0.0)
            matrix = np.diag(gains) + mixing
            freq, contrast, scale, aniso = 5.0, 0.5, 0.11, 1.5
        else:
            matrix = np.diag(rng.uniform(0.97, 1.03, 3))
            offset = rng.uniform(-0.01, 0.01, 3)
            noise = 0.02
            if seen:
                freq = rng.uniform(3.0, 6.0)
                contrast = rng.uniform(0.45, 0.6)
                scale = rng.uniform(0.1, 0.14)
                aniso = rng.uniform(1.0, 1.5)
            else:
                freq = rng.uniform(10.0, 14.0)
                contrast = rng.uniform(0.14, 0.24)
                scale = rng.uniform(0.07, 0.09)
                aniso = rng.uniform(1.8, 2.4)
        styles.append(DomainStyle(
            name=f"{prefix}-{d + 1}", task=task, seen=seen,
            color_matrix=matrix, color_offset=np.asarray(offset, dtype=np.float64),
            texture_frequency=float(freq), noise_level=float(noise),
            lesion_contrast=float(contrast), blob_scale=float(scale),
            blob_anisotropy=float(aniso)))
    return styles


def value_noise(rng: np.random.Generator, size: tuple[int, int], frequency: float) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1], ``frequency`` cells per patch side."""
    h, w = size
    cells = int(np.ceil(frequency)) + 2
    lattice = rng.uniform(0.0, 1.0, (cells, cells))
    phase = rng.uniform(0.0, 1.0, 2)
    ys = np.arange(h) / h * frequency + phase[0]
    xs = np.arange(w) / w * frequency + phase[1]
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    ty, tx = ys - y0, xs - x0
    ty, tx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * tx[None, :]
    bottom = c + (d - c) * tx[None, :]
    return top + (bottom - top) * ty[:, None]


def _texture(rng: np.random.Generator, size: tuple[int, int], frequency: float) -> np.ndarray:
    return 0.65 * value_noise(rng, size, frequency) + 0.35 * value_noise(rng, size, 2 * frequency)


def lesion_support(rng: np.random.Generator, size: tuple[int, int], scale: float,
                   anisotropy: float) -> np.ndarray:
    """One lesion: the thresholded sum of 2-6 anisotropic Gaussian bumps.

    Only the connected component holding the lesion centre is kept, so a
    single lesion is always one connected region containing its centre.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = scale * min(h, w)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    field = np.zeros(size)
    for b in range(int(rng.integers(2, 7))):
        jitter = rng.uniform(0.8, 1.2)
        s_major = base * jitter * np.sqrt(anisotropy)
        s_minor = base * jitter / np.sqrt(anisotropy)
        theta = rng.uniform(0.0, np.pi)
        if b == 0:
            by, bx, amp = cy, cx, 1.0
        else:
            ang = rng.uniform(0.0, 2 * np.pi)
            dist = rng.uniform(0.3, 1.2) * base
            by, bx, amp = cy + dist * np.sin(ang), cx + dist * np.cos(ang), rng.uniform(0.6, 1.0)
        dy, dx = yy - by, xx - bx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        field += amp * np.exp(-0.5 * ((u / s_major) ** 2 + (v / s_minor) ** 2))
    support = field >= _BLOB_LEVEL
    labels, _ = ndimage.label(support)
    centre = labels[min(int(cy), h - 1), min(int(cx), w - 1)]
    # the centre bump alone peaks at 1 > level, so the centre pixel's label is nonzero
    return labels == centre


def generate_sample(style: DomainStyle, sample_seed: int, size: tuple[int, int] = (64, 64),
                    lesion_count_range: tuple[int, int] = (1, 3), sample_id: str | None = None) -> Sample:
    """Render one styled patch and its exact lesion mask; pure in (style, sample_seed)."""
    size = (int(size[0]), int(size[1]))
    rng = _rng(sample_seed)
    lo, hi = lesion_count_range
    mask = np.zeros(size, dtype=bool)
    for _ in range(int(rng.integers(lo, hi + 1))):
        mask |= lesion_support(rng, size, style.blob_scale, style.blob_anisotropy)

    background = _texture(rng, size, style.texture_frequency)
    nuclei = value_noise(rng, size, 2.5 * style.texture_frequency)
    density = 0.25 + 0.45 * background
    density = np.where(mask, density + style.lesion_contrast * (0.6 + 0.4 * nuclei), density)
    rgb = 1.0 - density[..., None] * _STAIN
    rgb = style.apply_color(rgb)
    rgb = rgb + style.noise_level * rng.standard_normal(rgb.shape)
    # quantise to 8 bit so in-memory and PNG round-tripped samples agree exactly
    pixels = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    sid = sample_id if sample_id is not None else f"{style.name}-{sample_seed}"
    return Sample(ImagePatch(sid, pixels), BinaryMask(mask.astype(np.uint8)),
                  DomainLabel(style.task, style.name, style.seen))


def sample_seed_for(config: GeneratorConfig, task: Task, domain_index: int, sample_index: int) -> int:
    ss = np.random.SeedSequence([config.seed, _TASK_KEY[Task(task)], domain_index, _SAMPLE_STREAM,
                                 sample_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generate_task(config: GeneratorConfig, task: Task) -> tuple[TaskDataset, TaskDataset, TaskDataset]:
    """Build (train, unseen_test, seen_test) for one task.

    The last ``round(samples_per_domain * holdout_fraction)`` samples of each
    seen domain form the seen-domain test set.
    """
    task = Task(task)
    train, unseen, seen_test = [], [], []
    for d, style in enumerate(make_styles(config, task)):
        for j in range(config.samples_per_domain):
            sid = f"{task.short.lower()}-{style.name}-{j:03d}"
            s = generate_sample(style, sample_seed_for(config, task, d, j), config.patch_size,
                                config.lesion_count_range, sample_id=sid)
            if not style.seen:
                unseen.append(s)
            elif j >= config.samples_per_domain - config.n_holdout:
                seen_test.append(s)
            else:
                train.append(s)
    if not unseen:
        log.warning("task %s has no unseen domains; unseen-test set is empty", task.value)
    return TaskDataset(task, tuple(train)), TaskDataset(task, tuple(unseen)), TaskDataset(task, tuple(seen_test))


SPLITS = ("train", "seen_test", "unseen_test")


def write_task(config: GeneratorConfig, task: Task, out_dir: str | Path) -> dict[str, Path]:
    """Generate one task and write ``<out_dir>/<task>/<split>/manifest.json`` for every split."""
    train, unseen, seen_test = generate_task(config, task)
    root = Path(out_dir) / Task(task).value
    paths = {}
    for split, ds in zip(SPLITS, (train, seen_test, unseen)):
        paths[split] = Path(save_manifest(ds, root / split).manifest_path)
    return paths
