"""Command line entry point: generate, run, eval, table.

Exit codes: 0 success, 2 config error, 3 data error, 4 training failure,
1 anything unexpected.  Failures print ``{"error_kind", "message",
"context"}`` as JSON on stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .core import (ConfigError, DataError, ExperimentConfig, HarnessError, Strategy, Task, TrainingError,
                   load_manifest)
from .evaluation import MetricsReport, evaluate, format_cell
from .strategies import StrategyRun, run_matrix, run_name
from .synthetic import SPLITS, GeneratorConfig, write_task

log = logging.getLogger("domainshift_seg")

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {
        "data": {"seed": 0, "n_seen_domains": 3, "n_unseen_domains": 3, "samples_per_domain": 10,
                 "patch_size": [1500, 1500], "lesion_count_range": [1, 3], "holdout_fraction": 0.2,
                 "root": "data"},
        "model": {"preset": "paper"},
        "train": {"base_lr": 1e-4, "epochs": 30, "cycles": 1, "batch_size": 4,
                  "train_resolution": [1024, 1024], "augment": False, "dtype": "float32"},
        "strategy": {"k": 5, "seed": 0},
        "eval": {"threshold": 0.5},
        "runtime": {"workers": 1},
    },
}
PRESETS["desk"] = copy.deepcopy(PRESETS["paper"])
PRESETS["desk"]["data"]["patch_size"] = [64, 64]
PRESETS["desk"]["model"]["preset"] = "desk"
PRESETS["desk"]["train"].update(base_lr=1e-3, epochs=8, batch_size=8, train_resolution=[64, 64],
                                dtype="float64")

SECTIONS = ("data", "model", "train", "strategy", "eval", "runtime")
EXIT_CODES = {ConfigError: 2, DataError: 3, TrainingError: 4}


def resolve_config(path: str | Path | None, preset: str | None = None, seed: int | None = None) -> dict[str, Any]:
    """Merge preset defaults, the config file and command line overrides (in that order)."""
    doc: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", path=str(path))
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}", path=str(path)) from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object", path=str(path))
    name = preset or doc.get("preset") or "paper"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", choices=sorted(PRESETS))
    cfg = copy.deepcopy(PRESETS[name])
    cfg["preset"] = name
    for section, values in doc.items():
        if section == "preset":
            continue
        if section not in SECTIONS or not isinstance(values, dict):
            raise ConfigError(f"unknown config section {section!r}", allowed=list(SECTIONS))
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["strategy"]["seed"] = seed
    return cfg


def generator_config(cfg: dict[str, Any]) -> GeneratorConfig:
    d = {k: v for k, v in cfg["data"].items() if k != "root"}
    try:
        return GeneratorConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def experiment_config(cfg: dict[str, Any]) -> ExperimentConfig:
    t = cfg["train"]
    try:
        return ExperimentConfig(base_lr=float(t["base_lr"]), epochs=int(t["epochs"]), cycles=int(t["cycles"]),
                                batch_size=int(t["batch_size"]), train_resolution=tuple(t["train_resolution"]),
                                augment=bool(t["augment"]), dtype=t["dtype"], k=int(cfg["strategy"]["k"]),
                                seed=int(cfg["strategy"]["seed"]), model_preset=cfg["model"]["preset"],
                                threshold=float(cfg["eval"]["threshold"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid training config: {exc}") from exc


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: dict[str, Any], out: str | Path) -> dict[str, dict[str, Path]]:
    gen = generator_config(cfg)
    experiment_config(cfg)  # reject a bad config before writing anything
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {task.value: write_task(gen, task, out) for task in Task}
        (out / "generate_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}", path=str(out)) from exc
    if gen.n_unseen_domains == 0:
        log.warning("n_unseen_domains=0: unseen-test manifests are empty")
    return paths


@dataclass
class RunManifest:
    config: str
    runs: dict[str, dict[str, str]] = field(default_factory=dict)

    def save(self, run_dir: Path) -> None:
        (run_dir / "run_manifest.json").write_text(
            json.dumps({"config": self.config, "runs": self.runs}, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest":
        path = run_dir / "run_manifest.json"
        if not path.is_file():
            raise DataError(f"{run_dir} is not a completed run directory (no run_manifest.json)", path=str(run_dir))
        doc = json.loads(path.read_text())
        return cls(doc["config"], doc["runs"])

    def missing_paths(self, run_dir: Path) -> list[str]:
        refs = [self.config] + [p for r in self.runs.values() for p in r.values()]
        return [p for p in refs if not (run_dir / p).exists()]


def _train_manifest(data_root: Path, task: Task) -> Path:
    path = data_root / task.value / "train" / "manifest.json"
    if not path.is_file():
        raise DataError(f"training manifest not found: {path}", path=str(path))
    return path


def cmd_run(cfg: dict[str, Any], out: str | Path, data: str | Path | None = None, resume: bool = False,
            workers: int | None = None) -> RunManifest:
    exp = experiment_config(cfg)
    data_root = Path(data if data is not None else cfg["data"]["root"])
    t1 = load_manifest(_train_manifest(data_root, Task.CROSS_ORGAN))
    t2 = load_manifest(_train_manifest(data_root, Task.CROSS_SCANNER))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(cfg)
    resolved["data"]["root"] = str(data_root)
    (out / "run_config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    n_workers = workers if workers is not None else int(cfg["runtime"]["workers"])
    runs = run_matrix(t1, t2, exp, out, resume=resume, workers=n_workers)
    manifest = RunManifest("run_config.json")
    for (strategy, task), run in runs.items():
        name = run_name(strategy, task)
        manifest.runs[name] = {"dir": name, "cv_report": f"{name}/cv_report.json"}
        log.info("%s: cv dice %s", name, format_cell(*run.cv_report.aggregate))
    manifest.save(out)
    return manifest


def cmd_eval(run_dir: str | Path, manifests: Sequence[str | Path], split: str | None = None) -> dict[str, Path]:
    """Ensemble every fold of each run targeting a manifest's task and write its report."""
    run_dir = Path(run_dir)
    run_manifest = RunManifest.load(run_dir)
    missing = run_manifest.missing_paths(run_dir)
    if missing:
        raise DataError(f"incomplete run directory {run_dir}", missing=missing)
    written: dict[str, Path] = {}
    for m in manifests:
        dataset = load_manifest(m)
        split_name = split or Path(m).parent.name
        if len(dataset) == 0:
            log.warning("manifest %s is empty; nothing to evaluate", m)
            continue
        for name in run_manifest.runs:
            run = StrategyRun.load(run_dir / name)
            if run.target_task is not dataset.task:
                continue
            report = evaluate(run.models(), dataset, run.config)
            path = report.save(run_dir / name / "eval" / f"{split_name}.json")
            run_manifest.runs[name][f"eval_{split_name}"] = str(path.relative_to(run_dir))
            written[f"{name}/{split_name}"] = path
            log.info("%s on %s: %s", name, split_name, format_cell(*report.aggregate))
    run_manifest.save(run_dir)
    return written


ROW_KINDS = (("cv", "Cross-Validation"), ("seen_test", "Seen-Domain Test"), ("unseen_test", "Unseen-Domain Test"))
COLUMNS = (Strategy.STANDARD, Strategy.CROSS_TASK, Strategy.UNION)


def _report_path(run_dir: Path, strategy: Strategy, task: Task, kind: str) -> Path:
    base = run_dir / run_name(strategy, task)
    return base / "cv_report.json" if kind == "cv" else base / "eval" / f"{kind}.json"


def table_cells(run_dir: str | Path) -> list[tuple[str, list[tuple[float, float] | None]]]:
    """Rows of (label, per-strategy (mean, std) or None), read from persisted reports only."""
    run_dir = Path(run_dir)
    rows = []
    for task in Task:
        for kind, label in ROW_KINDS:
            cells = []
            for strategy in COLUMNS:
                path = _report_path(run_dir, strategy, task, kind)
                agg = MetricsReport.load(path).aggregate if path.is_file() else None
                cells.append(agg)
            rows.append((f"{task.short}: {label}", cells))
    return rows


def render_table(rows) -> str:
    headers = ["", *(s.column_title for s in COLUMNS)]
    body = [[label, *(format_cell(*c) if c is not None else "n/a" for c in cells)] for label, cells in rows]
    widths = [max(len(r[i]) for r in [headers, *body]) for i in range(len(headers))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.center(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(headers))
    return "\n".join([fmt(headers), rule, *(fmt(r) for r in body[:3]), rule, *(fmt(r) for r in body[3:])]) + "\n"


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "strategy", "mean", "std"])
    for label, cells in rows:
        for strategy, c in zip(COLUMNS, cells):
            if c is None:
                w.writerow([label, strategy.value, "n/a", "n/a"])
            else:
                w.writerow([label, strategy.value, f"{100 * c[0]:.2f}", f"{100 * c[1]:.2f}"])
    return buf.getvalue()


def trend_report(rows) -> list[dict[str, Any]]:
    """Unseen-domain Dice of each alternative strategy relative to conventional training."""
    out = []
    for label, cells in rows:
        if not label.endswith("Unseen-Domain Test") or cells[0] is None:
            continue
        for strategy, c in zip(COLUMNS[1:], cells[1:]):
            if c is not None:
                out.append({"row": label, "strategy": strategy.value,
                            "delta_points": round(100 * (c[0] - cells[0][0]), 2)})
    return out


def cmd_table(run_dir: str | Path) -> str:
    run_dir = Path(run_dir)
    rows = table_cells(run_dir)
    text = render_table(rows)
    trends = trend_report(rows)
    if trends:
        text += "\nUnseen-domain Dice relative to Conventional (points):\n"
        for t in trends:
            text += f"  {t['row'].split(':')[0]} {Strategy(t['strategy']).column_title}: {t['delta_points']:+.2f}\n"
            log.info("trend %s %s %+.2f", t["row"], t["strategy"], t["delta_points"])
    (run_dir / "table.txt").write_text(text)
    (run_dir / "table.csv").write_text(table_csv(rows))
    (run_dir / "trend.json").write_text(json.dumps(trends, indent=1) + "\n")
    return text


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainshift-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config with sections data/model/train/strategy/eval")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int, help="overrides the data and strategy seeds")

    p = sub.add_parser("generate", help="write the synthetic T1/T2 benchmark")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="train all six strategy/task runs")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="benchmark root (defaults to data.root in the config)")
    p.add_argument("--resume", action="store_true", help="reuse fold checkpoints already on disk")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("eval", help="evaluate fold ensembles on dataset manifests")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--manifest", action="append", default=[], help="manifest to evaluate (repeatable)")
    p.add_argument("--data", help="benchmark root; evaluates every seen_test and unseen_test manifest")
    p.add_argument("--split", help="report name (defaults to the manifest's directory name)")

    p = sub.add_parser("table", help="render the strategy comparison table")
    p.add_argument("--run", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "generate":
            cmd_generate(resolve_config(args.config, args.preset, args.seed), args.out)
        elif args.command == "run":
            cmd_run(resolve_config(args.config, args.preset, args.seed), args.out, args.data,
                    args.resume, args.workers)
        elif args.command == "eval":
            manifests = list(args.manifest)
            if args.data:
                manifests += [str(Path(args.data) / t.value / s / "manifest.json")
                              for t in Task for s in SPLITS if s != "train"]
            if not manifests:
                raise ConfigError("eval needs --manifest or --data")
            cmd_eval(args.run, manifests, args.split)
        elif args.command == "table":
            print(cmd_table(args.run), end="")
    except HarnessError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    except Exception as exc:  # noqa: BLE001 - every failure must surface as error JSON
        log.debug("unexpected failure", exc_info=True)
        print(json.dumps({"error_kind": "internal", "message": str(exc), "context": {"type": type(exc).__name__}}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
