"""Experiment runners: CS, SGD and hybrid training with CSV logging."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .data import Dataset, FeedMode, FoldFeeder, Whole, load_split, next_fold, parse_feed
from .network import (DenseNet, NetworkSpec, forward, load_checkpoint, loss_cce,
                      predict, save_checkpoint, sgd_train)
from .search import (CenterNormal, CsConfig, InitScheme, initial_values, optimize,
                     parse_init, parse_schedule, save_state)

log = logging.getLogger(__name__)

RUN_COLUMNS = ["step", "nfc", "train_loss", "train_acc", "test_acc", "elapsed_s"]
MODES = ("cs", "sgd", "hybrid")


class NetworkFitness:
    """Mean cross-entropy of the network given by a flat parameter vector.

    The loss is computed on the feeder's current fold; :meth:`advance` moves
    to the next fold and is meant to be the optimizer's ``fold_hook``.
    Evaluation never mutates shared state apart from the call counters.
    """

    def __init__(self, spec: NetworkSpec, dataset: Dataset, feeder: Optional[FoldFeeder] = None):
        if dataset.images.shape[1] != spec.n_inputs:
            raise ValueError(f"dataset has {dataset.images.shape[1]} features, "
                             f"network expects {spec.n_inputs}")
        self.spec = spec
        self.dataset = dataset
        self.feeder = feeder if feeder is not None else FoldFeeder()
        self.batch, self._next = next_fold(self.feeder, dataset)
        self.calls = 0
        self.seconds = 0.0

    def __call__(self, params: np.ndarray) -> float:
        start = time.perf_counter()
        probs = forward(DenseNet.view(self.spec, params), self.batch)
        value = loss_cce(probs, self.batch.labels)
        self.seconds += time.perf_counter() - start
        self.calls += 1
        return value

    def advance(self) -> None:
        if isinstance(self.feeder.mode, Whole):
            return
        self.feeder = self._next
        self.batch, self._next = next_fold(self.feeder, self.dataset)


def make_fitness(spec: NetworkSpec, dataset: Dataset, feeder: Optional[FoldFeeder] = None) -> NetworkFitness:
    return NetworkFitness(spec, dataset, feeder)


@dataclass
class ExperimentConfig:
    mode: str = "cs"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    layers: NetworkSpec = field(default_factory=lambda: NetworkSpec((784, 300, 100, 10)))
    bsf: float = 0.05
    bounds: tuple[float, float] = (-1.0, 1.0)
    init: InitScheme = field(default_factory=lambda: CenterNormal(0.0, 0.1))
    feed: FeedMode = field(default_factory=Whole)
    schedule: list[tuple[int, int]] = field(default_factory=lambda: [(5, 25), (20, 100)])
    cs_iterations: int = 1
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    time_budget: Optional[float] = None
    max_iterations: Optional[int] = None
    target_accuracy: Optional[float] = None
    seed: int = 0
    out: str = "run"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("train_images", "train_labels"):
            if not getattr(self, name):
                raise ValueError(f"{name.replace('_', '-')} is required")
        if bool(self.test_images) != bool(self.test_labels):
            raise ValueError("test-images and test-labels must be given together")
        if self.mode in ("cs", "hybrid"):
            if sum(c for c, _ in self.schedule) < 1:
                raise ValueError("the CS schedule needs at least one iteration")
            if self.max_iterations is not None and self.max_iterations < 1:
                raise ValueError("max-iterations must be >= 1")
            self.cs_config(self.layers_total()).validate()
        if self.mode in ("sgd", "hybrid"):
            if not self.lr >= 0:
                raise ValueError("lr must be >= 0")
            if self.batch_size < 1 or self.epochs < 0:
                raise ValueError("batch-size must be >= 1 and epochs >= 0")
        if self.mode == "hybrid" and self.cs_iterations < 1:
            raise ValueError("cs-iterations must be >= 1")

    def layers_total(self) -> int:
        return DenseNet(self.layers).n_params

    def cs_schedule(self) -> list[tuple[int, int]]:
        limit = self.cs_iterations if self.mode == "hybrid" else self.max_iterations
        return truncate_schedule(self.schedule, limit)

    def cs_config(self, dimension: int) -> CsConfig:
        return CsConfig.from_schedule(dimension, self.cs_schedule(), bsf=self.bsf,
                                      init_scheme=self.init, initial_lower=self.bounds[0],
                                      initial_upper=self.bounds[1], seed=self.seed)


def truncate_schedule(schedule, limit: Optional[int]) -> list[tuple[int, int]]:
    if limit is None:
        return list(schedule)
    out = []
    for count, size in schedule:
        if limit <= 0:
            break
        out.append((min(count, limit), size))
        limit -= count
    return out


@dataclass(frozen=True)
class RunRecord:
    step: int
    nfc: int
    train_loss: float
    train_acc: float
    test_acc: float
    elapsed_s: float
    phase: str = ""

    def row(self, with_phase: bool) -> list[str]:
        row = [str(self.step), str(self.nfc), repr(self.train_loss), repr(self.train_acc),
               repr(self.test_acc), f"{self.elapsed_s:.6f}"]
        return row + [self.phase] if with_phase else row


@dataclass
class RunResult:
    records: list[RunRecord]
    params: np.ndarray
    summary: dict
    out: Path


class _Recorder:
    """Evaluates the network after each iteration/epoch and collects records."""

    def __init__(self, config: ExperimentConfig, train: Dataset, test: Optional[Dataset]):
        self.config = config
        self.train = train
        self.test = test
        self.records: list[RunRecord] = []
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def record(self, step: int, nfc: int, params: np.ndarray, phase: str = "") -> bool:
        net = DenseNet.view(self.config.layers, params)
        probs = forward(net, self.train.as_batch())
        train_acc = metrics.accuracy(np.argmax(probs, axis=1), self.train.labels)
        test_acc = (metrics.accuracy(predict(net, self.test.as_batch()), self.test.labels)
                    if self.test is not None else float("nan"))
        rec = RunRecord(step, nfc, loss_cce(probs, self.train.labels), train_acc, test_acc,
                        self.elapsed(), phase)
        self.records.append(rec)
        log.info("%s step %d nfc %d loss %.4f train %.4f test %.4f (%.1fs)", phase or
                 self.config.mode, step, nfc, rec.train_loss, train_acc, test_acc, rec.elapsed_s)
        target = self.config.target_accuracy
        return target is not None and train_acc >= target


def load_data(config: ExperimentConfig) -> tuple[Dataset, Optional[Dataset]]:
    train = load_split(config.train_images, config.train_labels, config.subset, config.seed)
    test = None
    if config.test_images:
        test = load_split(config.test_images, config.test_labels, config.test_subset, config.seed)
    for name, ds in (("training", train), ("test", test)):
        if ds is not None and ds.images.shape[1] != config.layers.n_inputs:
            raise ValueError(f"{name} images have {ds.images.shape[1]} pixels, "
                             f"network input is {config.layers.n_inputs}")
    return train, test


def _initial_params(config: ExperimentConfig) -> np.ndarray:
    # same draw as the CS initial point for the same seed
    d = config.layers_total()
    rng = np.random.default_rng(config.seed)
    return initial_values(config.init, np.full(d, float(config.bounds[0])),
                          np.full(d, float(config.bounds[1])), rng)


def _sgd_rng(config: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 1])


def _run_cs_phase(config, train, recorder, phase=""):
    spec = config.layers
    fitness = make_fitness(spec, train, FoldFeeder(config.feed))
    cs_config = config.cs_config(DenseNet(spec).n_params)

    def on_iteration(state, rec):
        return recorder.record(rec.iteration, rec.nfc, state.current, phase)

    result = optimize(fitness, cs_config, on_iteration, fold_hook=fitness.advance)
    return result, fitness


def _run_sgd_phase(config, train, recorder, params, step0=0, nfc0=0, phase=""):
    net = DenseNet(config.layers, params)
    budget = None
    if config.time_budget is not None:
        budget = max(config.time_budget - recorder.elapsed(), 0.0)

    def on_epoch(net, rec):
        return recorder.record(step0 + rec.epoch, nfc0 + rec.steps, net.get_params(), phase)

    net, epochs = sgd_train(net, train.as_batch(), config.lr, config.batch_size, config.epochs,
                            _sgd_rng(config), on_epoch, budget)
    return net, epochs


def run_cs(config: ExperimentConfig) -> RunResult:
    config = replace(config, mode="cs")
    config.validate()
    train, test = load_data(config)
    recorder = _Recorder(config, train, test)
    result, fitness = _run_cs_phase(config, train, recorder)
    out = _prepare_out(config)
    save_state(out / "search_state.npz", result.state)
    summary = {"iterations": result.state.iteration, "nfc": result.nfc,
               "best_fitness": result.best_value, "fitness_calls": fitness.calls,
               "fitness_seconds": fitness.seconds}
    return _finish(config, out, recorder, result.x, test, summary)


def run_sgd(config: ExperimentConfig) -> RunResult:
    config = replace(config, mode="sgd")
    config.validate()
    train, test = load_data(config)
    recorder = _Recorder(config, train, test)
    net, epochs = _run_sgd_phase(config, train, recorder, _initial_params(config))
    out = _prepare_out(config)
    summary = {"epochs": len(epochs), "sgd_steps": epochs[-1].steps if epochs else 0}
    return _finish(config, out, recorder, net.get_params(), test, summary)


def run_hybrid(config: ExperimentConfig) -> RunResult:
    config = replace(config, mode="hybrid")
    config.validate()
    train, test = load_data(config)
    recorder = _Recorder(config, train, test)
    result, fitness = _run_cs_phase(config, train, recorder, phase="cs")
    net, epochs = _run_sgd_phase(config, train, recorder, result.x,
                                 step0=result.state.iteration, nfc0=result.nfc, phase="sgd")
    out = _prepare_out(config)
    summary = {"iterations": result.state.iteration, "nfc": result.nfc,
               "fitness_calls": fitness.calls, "fitness_seconds": fitness.seconds,
               "epochs": len(epochs), "sgd_steps": epochs[-1].steps if epochs else 0}
    return _finish(config, out, recorder, net.get_params(), test, summary)


RUNNERS = {"cs": run_cs, "sgd": run_sgd, "hybrid": run_hybrid}


def run(config: ExperimentConfig) -> RunResult:
    return RUNNERS[config.mode](config)


def _prepare_out(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(config, out, recorder, params, test, summary) -> RunResult:
    elapsed = recorder.elapsed()
    write_run_csv(out / "run.csv", recorder.records, with_phase=config.mode == "hybrid")
    net = DenseNet(config.layers, params)
    save_checkpoint(out / "model.ckpt", net)
    train_acc = metrics.accuracy(predict(net, recorder.train.as_batch()), recorder.train.labels)
    info = {"mode": config.mode, "layers": str(config.layers), "parameters": net.n_params,
            "seed": config.seed, "train_samples": len(recorder.train)}
    info.update(summary)
    info["train_accuracy"] = train_acc
    if test is not None:
        rep = metrics.report(predict(net, test.as_batch()), test.labels, config.layers.n_classes)
        rep.confusion.to_csv(out / "confusion_counts.csv", out / "confusion_normalized.csv")
        info.update(test_samples=len(test), test_accuracy=rep.accuracy,
                    macro_precision=rep.macro_precision, macro_recall=rep.macro_recall)
    info["elapsed_s"] = elapsed
    write_summary(out / "summary.txt", info)
    return RunResult(recorder.records, net.get_params(), info, out)


def write_run_csv(path, records, with_phase=False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_COLUMNS + (["phase"] if with_phase else []))
        for rec in records:
            writer.writerow(rec.row(with_phase))


def read_run_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, info: dict) -> None:
    lines = [f"{k} {v!r}" if isinstance(v, float) else f"{k} {v}" for k, v in info.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" ")
        out[key] = value
    return out


def evaluate(checkpoint, dataset: Dataset) -> metrics.Report:
    net = load_checkpoint(checkpoint)
    if dataset.images.shape[1] != net.spec.n_inputs:
        raise ValueError(f"checkpoint expects {net.spec.n_inputs} inputs, "
                         f"dataset has {dataset.images.shape[1]}")
    return metrics.report(predict(net, dataset.as_batch()), dataset.labels, net.spec.n_classes)


# -- flat key/value configuration ---------------------------------------------

def _parse_bounds(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"bounds must be LOWER,UPPER, got {text!r}")
    return parts[0], parts[1]


def _optional(conv):
    return lambda text: None if text.lower() in ("", "none") else conv(text)


PARSERS = {
    "mode": str, "train_images": str, "train_labels": str, "test_images": str,
    "test_labels": str, "subset": _optional(int), "test_subset": _optional(int),
    "layers": NetworkSpec.parse, "bsf": float, "bounds": _parse_bounds, "init": parse_init,
    "feed": parse_feed, "schedule": parse_schedule, "cs_iterations": int, "lr": float,
    "batch_size": int, "epochs": int, "time_budget": _optional(float),
    "max_iterations": _optional(int), "target_accuracy": _optional(float), "seed": int,
    "out": str,
}
assert set(PARSERS) == {f.name for f in fields(ExperimentConfig)}


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key = normalize_key(key)
        if key not in PARSERS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def build_config(values: dict[str, str], **overrides) -> ExperimentConfig:
    kwargs = {}
    for key, text in values.items():
        key = normalize_key(key)
        if key not in PARSERS:
            raise ValueError(f"unknown configuration key {key!r}")
        try:
            kwargs[key] = PARSERS[key](text)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {exc}") from None
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)
