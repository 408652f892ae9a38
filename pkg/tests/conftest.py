import numpy as np
import pytest

from domainshift_seg.core import (BinaryMask, DomainLabel, ExperimentConfig, ImagePatch, Sample, Task,
                                  TaskDataset)
from domainshift_seg.synthetic import GeneratorConfig, generate_task

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def make_sample(sid="s1", size=(8, 8), task=Task.CROSS_ORGAN, domain="organ-1", seen=True, seed=0):
    rng = np.random.default_rng(seed)
    pixels = np.rint(rng.uniform(0, 1, (*size, 3)) * 255) / 255
    mask = (rng.uniform(0, 1, size) > 0.5).astype(np.uint8)
    return Sample(ImagePatch(sid, pixels), BinaryMask(mask), DomainLabel(task, domain, seen))


def make_dataset(counts: dict[str, int], task=Task.CROSS_ORGAN, size=(8, 8)) -> TaskDataset:
    samples = []
    for domain, n in counts.items():
        for j in range(n):
            samples.append(make_sample(f"{domain}-{j:03d}", size, task, domain, seed=len(samples)))
    return TaskDataset(task, tuple(samples))


@pytest.fixture(scope="session")
def small_tasks():
    """Two small generated tasks at 32x32 (train, unseen, seen_test each)."""
    cfg = GeneratorConfig(seed=3, samples_per_domain=5, patch_size=(32, 32))
    return {task: generate_task(cfg, task) for task in Task}


@pytest.fixture
def quick_config():
    return ExperimentConfig(base_lr=1e-3, epochs=2, train_resolution=(32, 32), k=2, seed=0,
                            model_preset="micro", batch_size=4, dtype="float64")
