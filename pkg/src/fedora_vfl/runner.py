"""Experiment pipeline: data -> train -> unlearn -> audit -> export."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import audit
from .baselines import gradient_ascent_unlearn, retrain
from .config import ExperimentConfig
from .data import (UnlearnRequest, gen_images, gen_tabular, load_csv, noniid_perturb, split_unlearn,
                   stratified_split, vertical_partition)
from .exceptions import ConfigError, FedoraError, IngestionError, ValidationError
from .fedora import fedora_unlearn
from .persist import load_dataset, save_dataset
from .vfl import build_split_model, even_party_specs, vfl_train

log = logging.getLogger(__name__)

TIMING_FIELDS = ("seconds_per_round", "total_seconds")
CSV_FIELDS = ("method", "test_acc", "unlearn_acc", "mia_asr", "bd_asr", "pre_test_acc", "pre_unlearn_acc",
              "pre_mia_asr", "pre_bd_asr", "retrain_test_acc", "rounds", "n_unlearn", "n_remain",
              "seconds_per_round", "total_seconds")


@dataclass
class MetricsReport:
    method: str
    test_acc: float
    unlearn_acc: float
    rounds: int
    seconds_per_round: float
    total_seconds: float
    n_unlearn: int
    n_remain: int
    pre_test_acc: float
    pre_unlearn_acc: float
    mia_asr: Optional[float] = None
    pre_mia_asr: Optional[float] = None
    bd_asr: Optional[float] = None
    pre_bd_asr: Optional[float] = None
    retrain_test_acc: Optional[float] = None
    trace_path: Optional[str] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("test_acc", "unlearn_acc", "mia_asr", "bd_asr", "pre_test_acc", "pre_unlearn_acc",
                     "pre_mia_asr", "pre_bd_asr", "retrain_test_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.seconds_per_round < 0 or self.total_seconds < 0:
            raise ValidationError("timings must be non-negative")

    def to_dict(self, include_timing=True) -> dict:
        d = asdict(self)
        # audits that did not run are omitted rather than written as null
        d = {k: v for k, v in d.items() if v is not None}
        if not include_timing:
            for k in TIMING_FIELDS:
                d.pop(k, None)
        return d


class StageError(FedoraError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def build_dataset(config: ExperimentConfig):
    """Generate or load the dataset and split its columns across parties."""
    ds = config.dataset
    if ds.kind == "tabular":
        data = gen_tabular(ds.n_classes, ds.per_class, ds.n_features, ds.separation, ds.seed)
    elif ds.kind == "images":
        data = gen_images(ds.n_classes, ds.per_class, ds.height, ds.width, ds.seed, ds.image_noise)
    else:
        data = load_csv(ds.path, ds.label_column, ds.delimiter, ds.standardize)
    tr = config.training
    specs = even_party_specs(data.matrix().shape[1], ds.n_parties, tr.embed_dim, tuple(tr.bottom_hidden))
    data = vertical_partition(data, specs)
    nz = config.noise
    if nz.noniid_party is not None:
        data = noniid_perturb(data, nz.noniid_party, nz.noniid_std, nz.noniid_seed)
    return data, specs


def prepare(config: ExperimentConfig):
    """Dataset, party specs, split rows and (optionally backdoored) training data."""
    data, specs = build_dataset(config)
    train_rows, test_rows = stratified_split(data, config.dataset.test_fraction, config.dataset.seed)
    un = config.unlearn
    part = split_unlearn(data, UnlearnRequest(tuple(un.classes), un.fraction), un.split_seed, rows=train_rows)
    unlearn_rows = data.rows_for_ids(part.unlearn_ids)
    remain_rows = data.rows_for_ids(part.remain_ids)
    clean = data
    if config.audit.backdoor:
        trigger = audit.TriggerSpec(config.audit.trigger_size, config.audit.trigger_value,
                                    config.audit.target_label)
        data = audit.backdoor_dataset(data, unlearn_rows, trigger)
    return {
        "data": data, "clean": clean, "specs": specs, "train_rows": train_rows, "test_rows": test_rows,
        "unlearn_rows": unlearn_rows, "remain_rows": remain_rows,
    }


def train_original(config: ExperimentConfig, prep):
    tr = config.training
    model = build_split_model(prep["specs"], prep["data"].n_classes, tuple(tr.top_hidden), tr.seed)
    model, history = vfl_train(model, prep["data"], tr.epochs, tr.lr, tr.batch_size, tr.seed,
                               rows=prep["train_rows"], noise_std=config.noise.embedding_std)
    return model, history


def unlearn_model(config: ExperimentConfig, prep, original):
    """Returns ``(model, trace_or_None, rounds, seconds)``."""
    un = config.unlearn
    data, u, r = prep["data"], prep["unlearn_rows"], prep["remain_rows"]
    start = time.perf_counter()
    if un.method == "fedora":
        model, trace = fedora_unlearn(original, data, u, r, un.fedora_config(),
                                      noise_std=config.noise.embedding_std)
        return model, trace, len(trace.seconds), time.perf_counter() - start
    bcfg = un.baseline_config(config.training)
    if un.method == "retrain":
        model = retrain(data, r, prep["specs"], bcfg, tuple(config.training.top_hidden),
                        config.noise.embedding_std)
    else:
        model = gradient_ascent_unlearn(original, data, u, r, bcfg)
    return model, None, bcfg.epochs, time.perf_counter() - start


def audit_models(config: ExperimentConfig, prep, original, unlearned):
    data, test, u = prep["data"], prep["test_rows"], prep["unlearn_rows"]
    out = {
        "test_acc": audit.accuracy(unlearned, data, test),
        "unlearn_acc": audit.accuracy(unlearned, data, u),
        "pre_test_acc": audit.accuracy(original, data, test),
        "pre_unlearn_acc": audit.accuracy(original, data, u),
    }
    if config.audit.mia:
        attack = audit.mia_fit(original, data, prep["train_rows"], test, config.audit.mia_seed)
        out["mia_asr"] = audit.mia_asr(attack, unlearned, data, u)
        out["pre_mia_asr"] = audit.mia_asr(attack, original, data, u)
    if config.audit.backdoor:
        target = config.audit.target_label
        triggered = u[prep["clean"].labels[u] != target]
        out["bd_asr"] = audit.bd_asr(unlearned, data, triggered, target)
        out["pre_bd_asr"] = audit.bd_asr(original, data, triggered, target)
    if config.audit.compare_retrain:
        bcfg = config.unlearn.baseline_config(config.training)
        bcfg.method = "retrain"
        ref = retrain(data, prep["remain_rows"], prep["specs"], bcfg, tuple(config.training.top_hidden),
                      config.noise.embedding_std)
        out["retrain_test_acc"] = audit.accuracy(ref, data, test)
    return out


def write_trace(path, trace):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "L_u", "L_r", "tau", "sigma", "delta_theta"])
        if trace is not None:
            for row in trace.rows():
                writer.writerow([row["round"], *(repr(float(row[k])) for k in
                                                 ("L_u", "L_r", "tau", "sigma", "delta_theta"))])


def run_experiment(config: ExperimentConfig, out_dir=None, write=True) -> MetricsReport:
    """Full pipeline. Writes ``report.json`` and ``trace.csv`` into the output directory."""
    out_dir = Path(out_dir or config.output.dir)
    with stage("data"):
        prep = prepare(config)
    with stage("train"):
        original, _ = train_original(config, prep)
    with stage("unlearn"):
        unlearned, trace, rounds, seconds = unlearn_model(config, prep, original)
    with stage("audit"):
        metrics = audit_models(config, prep, original, unlearned)
    report = build_report(config, prep, metrics, rounds, seconds)
    if write:
        with stage("export"):
            write_outputs(out_dir, report, trace)
    return report


def write_outputs(out_dir, report: MetricsReport, trace):
    """Write report.json and trace.csv; remove anything half-written on failure."""
    out_dir = Path(out_dir)
    created = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_path = out_dir / "trace.csv"
        created.append(trace_path)
        write_trace(trace_path, trace)
        created.append(out_dir / "report.json")
        export_metrics(report, out_dir / "report.json", "json")
    except OSError as exc:
        for p in created:
            with contextlib.suppress(OSError):
                p.unlink()
        raise IngestionError(f"cannot write outputs to {out_dir}: {exc}") from exc


def export_metrics(report: MetricsReport, path, fmt="json", append=False):
    """JSON: the full report. CSV: one flat row per run, header written once."""
    path = Path(path)
    if fmt == "json":
        try:
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"cannot write {path}: {exc}") from exc
        return path
    if fmt != "csv":
        raise ValidationError(f"unknown export format {fmt!r}")
    d = report.to_dict()
    row = {k: d.get(k, "") for k in CSV_FIELDS}
    new_file = not (append and path.exists() and path.stat().st_size > 0)
    try:
        with path.open("a" if append else "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerow(row)
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc
    return path


_INT_FIELDS = ("rounds", "n_unlearn", "n_remain")


def _report_from_mapping(d: dict) -> MetricsReport:
    d = dict(d)
    # timing columns are absent from reports exported without timing
    for name in TIMING_FIELDS:
        d.setdefault(name, 0.0)
    return MetricsReport(**d)


def report_from_json(path) -> MetricsReport:
    return _report_from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


def reports_from_csv(path) -> list:
    """Parse rows written by :func:`export_metrics` back into reports."""
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            parsed = {}
            for k, v in rec.items():
                if v == "":
                    continue
                if k == "method":
                    parsed[k] = v
                elif k in _INT_FIELDS:
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            rows.append(_report_from_mapping(parsed))
    return rows


PREP_ARRAYS = ("train_rows", "test_rows", "unlearn_rows", "remain_rows")


def save_prep(path, prep):
    """Persist a prepared dataset, its split rows and the clean labels."""
    try:
        save_dataset(path, prep["data"], clean_labels=prep["clean"].labels,
                     **{k: prep[k] for k in PREP_ARRAYS})
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc


def load_prep(path, config: ExperimentConfig):
    data, extras = load_dataset(path)
    missing = [k for k in PREP_ARRAYS + ("clean_labels",) if k not in extras]
    if missing:
        raise IngestionError(f"{path}: missing arrays {missing}")
    tr = config.training
    specs = even_party_specs(data.matrix().shape[1], config.dataset.n_parties, tr.embed_dim,
                             tuple(tr.bottom_hidden))
    if [s.width for s in specs] != list(data.widths):
        raise ConfigError(f"{path}: party layout does not match the configuration")
    prep = {k: extras[k].astype(np.int64) for k in PREP_ARRAYS}
    prep.update(data=data, clean=replace(data, labels=extras["clean_labels"]), specs=specs)
    return prep


def build_report(config: ExperimentConfig, prep, metrics, rounds, seconds) -> MetricsReport:
    return MetricsReport(
        method=config.unlearn.method, rounds=rounds,
        seconds_per_round=seconds / rounds if rounds else 0.0, total_seconds=seconds,
        n_unlearn=int(prep["unlearn_rows"].size), n_remain=int(prep["remain_rows"].size),
        trace_path="trace.csv", config=config.to_dict(), **metrics,
    )
