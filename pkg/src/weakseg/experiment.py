"""Cross-validated experiment pipeline: split, train every method, evaluate, report.

Work is organised in independent units, one per ``(method, fold)``, each with
its own directory under ``<output>/runs/<method>/fold<i>/``.  A unit is done
once its ``COMPLETED`` marker exists; reruns skip it.  Units depend only on the
config, the dataset and their own seeds, so the order or parallelism of
execution cannot change the report bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as D
from . import tensor as T
from .errors import ConfigurationError, TrainingDiverged
from .evaluation import ConfusionMatrix, SliceMetrics, aggregate_report, decode_argmax, metrics_from_counts, slice_metrics
from .folds import FoldPlan, stratified_group_kfold, validation_split
from .losses import MODES, ClassId, LossConfig
from .training import AdamHyper, save_history, train
from .unet import ModelConfig, build_model, forward, save_model

logger = logging.getLogger(__name__)

COMPLETED = "COMPLETED"
FAILED = "FAILED"


@dataclass(frozen=True)
class Method:
    mode: str
    lam: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown method mode {self.mode!r}; expected one of {MODES}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.mode != "proposed" and self.lam != 0:
            raise ConfigurationError(f"lambda only applies to the proposed loss, not {self.mode!r}")

    @property
    def name(self) -> str:
        return f"proposed_{self.lam:g}" if self.mode == "proposed" else self.mode

    def loss_config(self, prob_floor: float) -> LossConfig:
        return LossConfig(lam=self.lam, mode=self.mode, prob_floor=prob_floor)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lambda": self.lam} if self.mode == "proposed" else {"mode": self.mode}

    @classmethod
    def from_dict(cls, d) -> "Method":
        if not isinstance(d, dict) or "mode" not in d:
            raise ConfigurationError(f"method entries need a 'mode', got {d!r}")
        unknown = set(d) - {"mode", "lambda"}
        if unknown:
            raise ConfigurationError(f"unknown method keys: {sorted(unknown)}")
        return cls(d["mode"], float(d.get("lambda", 0.0)))


DEFAULT_METHODS = (
    Method("supervised_only"),
    Method("proposed", 0.1),
    Method("proposed", 1.0),
    Method("semi_supervised"),
)


@dataclass
class ExperimentConfig:
    dataset_dir: str = "dataset"
    output_dir: str = "results"
    generator: D.GeneratorConfig = field(default_factory=D.GeneratorConfig)
    k: int = 5
    seed: int = 0
    validation_fraction: float = 0.2
    methods: tuple = DEFAULT_METHODS
    model: ModelConfig | None = None  # None: desk defaults sized to the generator
    adam: AdamHyper = field(default_factory=AdamHyper)
    prob_floor: float = 1e-7
    fold_plan: str | None = None

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig(
                context_slices=self.generator.context_slices, image_size=self.generator.image_size
            )

    def validate(self) -> None:
        self.generator.validate()
        self.model.validate()
        self.adam.validate()
        if not self.methods:
            raise ConfigurationError("the method list is empty")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate methods in {names}")
        if self.k < 2:
            raise ConfigurationError(f"k must be >= 2, got {self.k}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if not 0 < self.prob_floor < 1:
            raise ConfigurationError("prob_floor must lie in (0, 1)")
        if self.model.context_slices != self.generator.context_slices:
            raise ConfigurationError("model.context_slices must equal generator.context_slices")
        if self.model.image_size != self.generator.image_size:
            raise ConfigurationError("model.image_size must equal generator.image_size")

    def to_dict(self) -> dict:
        return {
            "dataset_dir": self.dataset_dir,
            "output_dir": self.output_dir,
            "generator": self.generator.to_dict(),
            "k": self.k,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "methods": [m.to_dict() for m in self.methods],
            "model": dataclasses.asdict(self.model),
            "adam": dataclasses.asdict(self.adam),
            "prob_floor": self.prob_floor,
            "fold_plan": self.fold_plan,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("the experiment config must be a JSON object")
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            gen = D.GeneratorConfig.from_dict(d.pop("generator", {}))
            model = d.pop("model", None)
            if model is not None:
                model = {"context_slices": gen.context_slices, "image_size": gen.image_size, **model}
                model = ModelConfig(**model)
            adam = AdamHyper(**d.pop("adam", {}))
            methods = d.pop("methods", None)
            methods = DEFAULT_METHODS if methods is None else tuple(Method.from_dict(m) for m in methods)
            return cls(generator=gen, model=model, adam=adam, methods=methods, **d)
        except TypeError as exc:
            raise ConfigurationError(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        """Hash of everything that shapes the results (paths excluded)."""
        d = self.to_dict()
        del d["dataset_dir"], d["output_dir"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def benchmark_config(seed: int = 0) -> ExperimentConfig:
    """The desk-scale phantom benchmark: 60 cases of 32x32, 3 folds, a two-level U-Net.

    Validation loss under the weak-pixel objectives is noisy from epoch to
    epoch, so the epoch budget is fixed and the best epoch is selected in
    hindsight (patience equals the budget).
    """
    return ExperimentConfig(
        generator=D.GeneratorConfig(num_cases=60, image_size=32, seed=seed),
        k=3,
        seed=seed,
        methods=DEFAULT_METHODS[:3],
        model=ModelConfig(context_slices=6, image_size=32, base_channels=8, depth=2),
        adam=AdamHyper(max_epochs=40, patience=40),
    )


# --------------------------------------------------------------------------
# synthesis


def synthesize(cfg: ExperimentConfig, directory=None) -> Path:
    cfg.generator.validate()
    out = Path(directory or cfg.dataset_dir)
    return D.save_dataset(D.synth_dataset(cfg.generator), out, cfg.generator)


# --------------------------------------------------------------------------
# running


def unit_seed(seed: int, fold: int) -> int:
    """Per-fold integer seed, shared by every method so their runs are paired."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def unit_dir(out: Path, method: str, fold: int) -> Path:
    return out / "runs" / method / f"fold{fold}"


def _load_cases(cfg: ExperimentConfig) -> list[D.Case]:
    d = Path(cfg.dataset_dir)
    if not (d / "manifest.json").is_file():
        raise ConfigurationError(f"dataset not found at {d} (run `synth` first)")
    cases = D.load_dataset(d)
    want = (cfg.model.image_size, cfg.model.image_size)
    for c in cases:
        if c.volume.shape[1:] != want:
            raise ConfigurationError(f"{c.case_id} has slices of {c.volume.shape[1:]}, model expects {want}")
    return cases


def _plan(cfg: ExperimentConfig, cases) -> FoldPlan:
    if cfg.fold_plan:
        path = Path(cfg.fold_plan)
        if not path.is_file():
            raise ConfigurationError(f"fold plan {path} does not exist")
        plan = FoldPlan.load(path)
        if set(plan.assignment) != {c.case_id for c in cases} or plan.k != cfg.k:
            raise ConfigurationError(f"fold plan {path} does not match the dataset or k={cfg.k}")
        return plan
    return stratified_group_kfold(cases, cfg.k, cfg.seed)


def _fold_samples(cfg: ExperimentConfig, cases, plan: FoldPlan, fold: int):
    by_id = {c.case_id: c for c in cases}
    z = cfg.model.context_slices
    train_pool = [s for cid in plan.train_cases(fold) for s in D.case_samples(by_id[cid], z)]
    test = [s for cid in plan.test_cases(fold) for s in D.case_samples(by_id[cid], z)]
    train_s, val_s = validation_split(train_pool, cfg.validation_fraction, unit_seed(cfg.seed, fold))
    return train_s, val_s, test


def _write_unit_metrics(path: Path, metrics: list[SliceMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice_id", "fold", "chosen_class", "tp", "fp", "fn"])
        for m in metrics:
            w.writerow([m.slice_id, m.fold, m.chosen_class.name, m.tp, m.fp, m.fn])


def _read_unit_metrics(path: Path) -> list[SliceMetrics]:
    with open(path, newline="") as fh:
        return [
            metrics_from_counts(r["slice_id"], ClassId[r["chosen_class"]], int(r["tp"]), int(r["fp"]), int(r["fn"]), int(r["fold"]))
            for r in csv.DictReader(fh)
        ]


def run_unit(cfg: ExperimentConfig, method: Method, fold: int, cases=None, plan: FoldPlan | None = None) -> str:
    """Train and evaluate one ``(method, fold)``; returns ``"completed"``, ``"skipped"`` or ``"failed"``."""
    out = unit_dir(Path(cfg.output_dir), method.name, fold)
    if (out / COMPLETED).is_file():
        return "skipped"
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    cases = _load_cases(cfg) if cases is None else cases
    plan = _plan(cfg, cases) if plan is None else plan
    train_s, val_s, test = _fold_samples(cfg, cases, plan, fold)
    seed = unit_seed(cfg.seed, fold)
    try:
        model, history = train(build_model(cfg.model, seed), train_s, val_s, method.loss_config(cfg.prob_floor), cfg.adam, seed)
    except TrainingDiverged as exc:
        (out / FAILED).write_text(f"{exc}\n")
        logger.error("%s fold %d failed: %s", method.name, fold, exc)
        return "failed"
    save_model(model, out / "model")
    save_history(history, out / "history.csv")
    metrics, cm = [], ConfusionMatrix()
    for s in test:
        pred = decode_argmax(T.softmax_channels(forward(model, s.volume)))
        metrics.append(slice_metrics(pred, s.annotation, fold))
        cm.add(pred, s.annotation)
    _write_unit_metrics(out / "metrics.csv", metrics)
    np.savetxt(out / "confusion_counts.txt", cm.counts, fmt="%d")
    (out / COMPLETED).write_text(f"best_epoch={history.best_epoch}\nepochs={len(history)}\n")
    return "completed"


def _unit_worker(args) -> tuple[str, int, str, str]:
    cfg_dict, output_dir, dataset_dir, method_dict, fold = args
    cfg = ExperimentConfig.from_dict({**cfg_dict, "output_dir": output_dir, "dataset_dir": dataset_dir})
    method = Method.from_dict(method_dict)
    try:
        return method.name, fold, run_unit(cfg, method, fold), ""
    except Exception as exc:  # reported, never fatal to the pool
        unit_dir(Path(output_dir), method.name, fold).mkdir(parents=True, exist_ok=True)
        (unit_dir(Path(output_dir), method.name, fold) / FAILED).write_text(traceback.format_exc())
        return method.name, fold, "failed", f"{type(exc).__name__}: {exc}"


@dataclass
class RunResult:
    output_dir: Path
    statuses: dict  # (method, fold) -> status
    failures: list  # (method, fold, message)
    reports: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _check_run_record(cfg: ExperimentConfig, out: Path, dataset_hash) -> None:
    record = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "generator_seed": cfg.generator.seed,
        "dataset_hash": dataset_hash,
        "config": cfg.to_dict(),
    }
    path = out / "run.json"
    if path.is_file():
        try:
            previous = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is corrupt ({exc})") from exc
        if previous.get("config_hash") != record["config_hash"] or previous.get("dataset_hash") != dataset_hash:
            raise ConfigurationError(f"{out} holds results of a different config or dataset; use another --out")
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Run every missing ``(method, fold)`` unit, then aggregate the report."""
    cfg.validate()
    if jobs < 1:
        raise ConfigurationError(f"--jobs must be >= 1, got {jobs}")
    cases = _load_cases(cfg)
    plan = _plan(cfg, cases)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _check_run_record(cfg, out, D.load_manifest(cfg.dataset_dir).get("generator_hash"))
    plan.save(out / "folds.json")

    units = [(m, f) for f in range(cfg.k) for m in cfg.methods]
    statuses, failures = {}, []
    if jobs == 1:
        for m, f in units:
            try:
                statuses[(m.name, f)] = run_unit(cfg, m, f, cases, plan)
            except Exception as exc:
                (unit_dir(out, m.name, f) / FAILED).write_text(traceback.format_exc())
                statuses[(m.name, f)] = "failed"
                failures.append((m.name, f, f"{type(exc).__name__}: {exc}"))
                continue
            if statuses[(m.name, f)] == "failed":
                failures.append((m.name, f, (unit_dir(out, m.name, f) / FAILED).read_text().strip()))
    else:
        args = [(cfg.to_dict(), str(out), str(cfg.dataset_dir), m.to_dict(), f) for m, f in units]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_unit_worker, args))
        for name, f, status, message in results:
            statuses[(name, f)] = status
            if status == "failed":
                message = message or (unit_dir(out, name, f) / FAILED).read_text().strip()
                failures.append((name, f, message))

    result = RunResult(out, statuses, failures)
    result.reports = aggregate(cfg, failures)
    return result


def aggregate(cfg: ExperimentConfig, failures=()) -> dict:
    """Collect completed units into the report; methods with any failed fold are left out."""
    out = Path(cfg.output_dir)
    failed_methods = {m for m, _, _ in failures}
    per_method, confusion = {}, {}
    for m in cfg.methods:
        if m.name in failed_methods:
            continue
        rows, cm = [], ConfusionMatrix()
        for f in range(cfg.k):
            d = unit_dir(out, m.name, f)
            rows += _read_unit_metrics(d / "metrics.csv")
            cm.counts += np.loadtxt(d / "confusion_counts.txt", dtype=np.int64, ndmin=2)
        per_method[m.name] = rows
        confusion[m.name] = cm
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fold", "error"])
        for m, f, msg in sorted(failures):
            w.writerow([m, f, msg.splitlines()[-1] if msg else ""])
    if not per_method:
        return {}
    return aggregate_report(per_method, confusion, out)
