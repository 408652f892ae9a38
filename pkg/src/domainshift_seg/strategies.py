"""The three training strategies, each producing a k-fold ensemble per task.

* standard: each task trained on its own data.
* cross_task: fold ``i`` of one task fine-tunes from fold ``i`` of the other
  task's standard run, using the full recipe with a fresh optimizer.
* union: folds come from the target task; every fold additionally trains on
  all of the other task's training data and validates on target data only.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ConfigError, DataError, ExperimentConfig, Sample, SplitPlan, Strategy, Task, TaskDataset
from .evaluation import MetricsReport, evaluate
from .model import (Checkpoint, CheckpointMismatchError, build_model, fingerprint, load_checkpoint,
                    model_config_for, model_from_checkpoint, save_checkpoint)
from .training import DTYPES, TrainHistory, train

log = logging.getLogger(__name__)

_STRATEGY_KEY = {Strategy.STANDARD: 1, Strategy.CROSS_TASK: 2, Strategy.UNION: 3}
_TASK_KEY = {Task.CROSS_ORGAN: 1, Task.CROSS_SCANNER: 2}


class FoldCountMismatchError(ConfigError):
    kind = "fold_count_mismatch"


def make_folds(dataset: TaskDataset, k: int, seed: int) -> SplitPlan:
    """Seeded k-fold partition stratified by domain name.

    Ids are shuffled within each domain, the domains are concatenated and
    the result is dealt round-robin, so fold sizes differ by at most one
    overall and within every domain.
    """
    if k < 1:
        raise ConfigError("k must be >= 1", k=k)
    if k > len(dataset):
        raise ConfigError(f"k={k} exceeds dataset size {len(dataset)}", k=k, size=len(dataset))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    by_domain: dict[str, list[str]] = {}
    for s in dataset.samples:
        by_domain.setdefault(s.domain.domain_name, []).append(s.id)
    dealt: list[str] = []
    for ids in by_domain.values():
        dealt.extend(ids[j] for j in rng.permutation(len(ids)))
    position = {sid: i for i, sid in enumerate(dealt)}
    folds = tuple(tuple(sid for sid in dataset.ids if position[sid] % k == f) for f in range(k))
    plan = SplitPlan(k=k, seed=int(seed), folds=folds)
    plan.check(dataset.ids)
    return plan


def fold_seed(seed: int, strategy: Strategy, task: Task, fold: int) -> int:
    ss = np.random.SeedSequence([int(seed), _STRATEGY_KEY[strategy], _TASK_KEY[task], int(fold)])
    return int(ss.generate_state(1)[0])


@dataclass
class FoldRecord:
    train_ids: list[str]
    val_ids: list[str]


@dataclass
class StrategyRun:
    strategy: Strategy
    target_task: Task
    config: ExperimentConfig
    fold_checkpoints: list[Checkpoint]
    cv_report: MetricsReport
    folds: list[FoldRecord]
    histories: list[TrainHistory | None] = field(default_factory=list)
    source: str | None = None

    @property
    def name(self) -> str:
        return run_name(self.strategy, self.target_task)

    def models(self):
        return [model_from_checkpoint(c) for c in self.fold_checkpoints]

    def save(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(self.config.to_dict(), indent=1, sort_keys=True) + "\n")
        (run_dir / "folds.json").write_text(json.dumps(
            {"source": self.source, "folds": [{"train_ids": f.train_ids, "val_ids": f.val_ids} for f in self.folds]},
            indent=1, sort_keys=True) + "\n")
        for i, ckpt in enumerate(self.fold_checkpoints):
            fold_dir = run_dir / f"fold_{i}"
            if not (fold_dir / "metadata.json").is_file():
                save_checkpoint(ckpt, fold_dir)
            if i < len(self.histories) and self.histories[i] is not None:
                self.histories[i].save(fold_dir / "history.json")
        self.cv_report.save(run_dir / "cv_report.json")
        return run_dir

    @classmethod
    def load(cls, run_dir: str | Path) -> "StrategyRun":
        run_dir = Path(run_dir)
        for required in ("config.json", "folds.json", "cv_report.json"):
            if not (run_dir / required).is_file():
                raise DataError(f"incomplete run directory {run_dir}: missing {required}", path=str(run_dir))
        config = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
        folds_doc = json.loads((run_dir / "folds.json").read_text())
        ckpts, histories = [], []
        for i in range(config.k):
            ckpts.append(load_checkpoint(run_dir / f"fold_{i}"))
            hist = run_dir / f"fold_{i}" / "history.json"
            histories.append(TrainHistory.from_dict(json.loads(hist.read_text())) if hist.is_file() else None)
        return cls(config.strategy, config.target_task, config, ckpts,
                   MetricsReport.load(run_dir / "cv_report.json"),
                   [FoldRecord(f["train_ids"], f["val_ids"]) for f in folds_doc["folds"]],
                   histories, folds_doc.get("source"))


def run_name(strategy: Strategy, task: Task) -> str:
    return f"{Strategy(strategy).value}_{Task(task).value}"


InitFn = Callable[[int], "Checkpoint | None"]


def _run_folds(strategy: Strategy, target: TaskDataset, plan: SplitPlan, extra_train: Sequence[Sample],
               init_for: InitFn, config: ExperimentConfig, run_dir: Path | None, resume: bool,
               workers: int, source: str | None = None) -> StrategyRun:
    config = config.with_(strategy=strategy, target_task=target.task)
    mconf = model_config_for(config.model_preset)
    lookup = target.by_id()
    extra_ids = {s.id for s in extra_train}
    clash = extra_ids & set(lookup)
    if clash:
        raise DataError(f"sample ids shared between tasks: {sorted(clash)[:5]}")

    def one_fold(i: int):
        val_ids = list(plan.folds[i])
        train_ids = plan.train_ids(i)
        record = FoldRecord(train_ids + [s.id for s in extra_train], val_ids)
        fold_dir = run_dir / f"fold_{i}" if run_dir is not None else None
        val = [lookup[x] for x in val_ids]
        if resume and fold_dir is not None and (fold_dir / "metadata.json").is_file():
            log.info("%s fold %d: reusing %s", run_name(strategy, target.task), i, fold_dir)
            ckpt = load_checkpoint(fold_dir)
            hist_path = fold_dir / "history.json"
            history = TrainHistory.from_dict(json.loads(hist_path.read_text())) if hist_path.is_file() else None
        else:
            seed = fold_seed(config.seed, strategy, target.task, i)
            model, _ = build_model(mconf, seed, dtype=DTYPES[config.dtype])
            ckpt, history = train(model, [lookup[x] for x in train_ids] + list(extra_train), val,
                                  config.with_(seed=seed), init=init_for(i),
                                  metadata={"strategy": strategy.value, "task": target.task.value, "fold": i})
            if fold_dir is not None:
                save_checkpoint(ckpt, fold_dir)
                history.save(fold_dir / "history.json")
        report = evaluate([model_from_checkpoint(ckpt)], target.subset(val_ids), config)
        return ckpt, history, record, report

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_fold, range(plan.k)))
    else:
        results = [one_fold(i) for i in range(plan.k)]

    cv = results[0][3]
    for r in results[1:]:
        cv = cv.merged(r[3])
    run = StrategyRun(strategy, target.task, config, [r[0] for r in results], cv,
                      [r[2] for r in results], [r[1] for r in results], source)
    if run_dir is not None:
        run.save(run_dir)
    return run


def run_standard(task_data: TaskDataset, config: ExperimentConfig, run_dir: str | Path | None = None,
                 resume: bool = False, workers: int = 1) -> StrategyRun:
    plan = make_folds(task_data, config.k, config.seed)
    return _run_folds(Strategy.STANDARD, task_data, plan, (), lambda i: None, config,
                      Path(run_dir) if run_dir else None, resume, workers)


def run_cross_task(source_run: StrategyRun, target_data: TaskDataset, config: ExperimentConfig,
                   run_dir: str | Path | None = None, resume: bool = False, workers: int = 1) -> StrategyRun:
    if source_run.target_task is target_data.task:
        raise ConfigError("cross-task source and target must be different tasks", task=target_data.task.value)
    if len(source_run.fold_checkpoints) != config.k:
        raise FoldCountMismatchError(
            f"source run has {len(source_run.fold_checkpoints)} folds, target config asks for {config.k}",
            source_k=len(source_run.fold_checkpoints), target_k=config.k)
    expected = fingerprint(model_config_for(config.model_preset))
    for i, ckpt in enumerate(source_run.fold_checkpoints):
        if ckpt.fingerprint != expected:
            raise CheckpointMismatchError(f"source fold {i} architecture does not match preset "
                                          f"{config.model_preset!r}", fold=i)
    plan = make_folds(target_data, config.k, config.seed)
    return _run_folds(Strategy.CROSS_TASK, target_data, plan, (), lambda i: source_run.fold_checkpoints[i],
                      config, Path(run_dir) if run_dir else None, resume, workers, source=source_run.name)


def run_union(task_a: TaskDataset, task_b: TaskDataset, target_task: Task, config: ExperimentConfig,
              run_dir: str | Path | None = None, resume: bool = False, workers: int = 1) -> StrategyRun:
    if task_a.task is task_b.task:
        raise ConfigError("union needs two different tasks")
    target, other = (task_a, task_b) if task_a.task is Task(target_task) else (task_b, task_a)
    if target.task is not Task(target_task):
        raise ConfigError(f"neither dataset belongs to task {Task(target_task).value}")
    plan = make_folds(target, config.k, config.seed)
    return _run_folds(Strategy.UNION, target, plan, other.samples, lambda i: None, config,
                      Path(run_dir) if run_dir else None, resume, workers)


MATRIX_ORDER = (
    (Strategy.STANDARD, Task.CROSS_ORGAN), (Strategy.STANDARD, Task.CROSS_SCANNER),
    (Strategy.CROSS_TASK, Task.CROSS_SCANNER), (Strategy.CROSS_TASK, Task.CROSS_ORGAN),
    (Strategy.UNION, Task.CROSS_ORGAN), (Strategy.UNION, Task.CROSS_SCANNER),
)


def run_matrix(t1: TaskDataset, t2: TaskDataset, config: ExperimentConfig, run_dir: str | Path | None = None,
               resume: bool = False, workers: int = 1) -> dict[tuple[Strategy, Task], StrategyRun]:
    """All six (strategy, target task) runs; cross-task runs consume the standard checkpoints."""
    if t1.task is not Task.CROSS_ORGAN or t2.task is not Task.CROSS_SCANNER:
        raise ConfigError("run_matrix expects (cross_organ, cross_scanner) datasets")
    data = {Task.CROSS_ORGAN: t1, Task.CROSS_SCANNER: t2}

    def sub(strategy: Strategy, task: Task):
        return Path(run_dir) / run_name(strategy, task) if run_dir is not None else None

    runs: dict[tuple[Strategy, Task], StrategyRun] = {}
    for task in (Task.CROSS_ORGAN, Task.CROSS_SCANNER):
        runs[Strategy.STANDARD, task] = run_standard(data[task], config, sub(Strategy.STANDARD, task),
                                                     resume, workers)
    for task in (Task.CROSS_SCANNER, Task.CROSS_ORGAN):
        runs[Strategy.CROSS_TASK, task] = run_cross_task(runs[Strategy.STANDARD, task.other()], data[task],
                                                         config, sub(Strategy.CROSS_TASK, task), resume, workers)
    for task in (Task.CROSS_ORGAN, Task.CROSS_SCANNER):
        runs[Strategy.UNION, task] = run_union(t1, t2, task, config, sub(Strategy.UNION, task), resume, workers)
    return {key: runs[key] for key in MATRIX_ORDER}
