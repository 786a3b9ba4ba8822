"""Training and evaluation runs: data preparation, metrics files, reports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, filter_identity_attributes, load_dataset, split_per_identity
from .errors import ConfigError, DataError
from .model import ArchConfig, FusionModel, forward
from .optim import Batch, HyperParams, attribute_step, joint_step, make_states
from .storage import Checkpoint, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
TIMING_NAME = "timing.csv"
CHECKPOINT_NAME = "checkpoint.fuse"
REPORT_NAME = "report.json"


@dataclass
class Prepared:
    train: Dataset
    test: Dataset
    attr_names: list[str]
    mean: np.ndarray
    fingerprint: str


def prepare_data(cfg: RunConfig, attr_names: list[str] | None = None, mean: np.ndarray | None = None) -> Prepared:
    """Load, split and filter the dataset named by ``cfg.data.manifest``.

    Attribute filtering and the channel mean use the training split only.
    Pass ``attr_names``/``mean`` (from a checkpoint) to reproduce a run's
    preprocessing instead of recomputing it.
    """
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is not set")
    full = load_dataset(cfg.data.manifest)
    train_idx, test_idx = split_per_identity(full, cfg.data.train_fraction, cfg.data.split_seed)
    train, test = full.subset(train_idx), full.subset(test_idx)
    if attr_names is None:
        cols = filter_identity_attributes(train) if cfg.data.filter_attributes else list(range(len(full.attr_names)))
        if not cols:
            raise DataError("no attribute is constant within every identity of the training split")
    else:
        missing = [a for a in attr_names if a not in full.attr_names]
        if missing:
            raise DataError(f"dataset lacks attributes {missing}")
        cols = [full.attr_names.index(a) for a in attr_names]
    train, test = train.select_attributes(cols), test.select_attributes(cols)
    if mean is None:
        mean = train.channel_mean()
    return Prepared(train.centered(mean), test.centered(mean), train.attr_names, np.asarray(mean), full.fingerprint)


def provenance_header(cfg: RunConfig, fingerprint: str) -> str:
    lines = [f"# {line}" for line in cfg.to_text().splitlines()]
    lines.append(f"# dataset.fingerprint={fingerprint}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _attr_accuracy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return (probs.argmax(axis=-1) == labels).mean(axis=0)


def build_model(cfg: RunConfig, n_attributes: int, n_identities: int) -> FusionModel:
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    return FusionModel.create(ArchConfig.from_config(cfg), cfg.model.scenario, n_attributes, n_identities,
                              cfg.run.seed, dtype)


def train(cfg: RunConfig) -> dict:
    """Run a full training job and return the final test report.

    Writes ``metrics.csv`` (one row per iteration, flushed as it goes),
    ``timing.csv``, ``checkpoint.fuse`` (rewritten every epoch) and
    ``report.json`` under ``cfg.run.out``.
    """
    data = prepare_data(cfg)
    if data.train.image_shape != tuple(cfg.model.input_shape):
        raise ConfigError(f"model.input_shape {cfg.model.input_shape} does not match images {data.train.image_shape}")
    n_attr = len(data.attr_names)
    n_id = max(data.train.n_identities, data.test.n_identities)
    model = build_model(cfg, n_attr, n_id)
    hyper = HyperParams(cfg.opt.alpha, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps)
    opt1, opt2 = make_states(model, hyper)

    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    header = provenance_header(cfg, data.fingerprint)
    cols = ["epoch", "iteration", "l1", "l2", "id_acc"] + [f"attr_acc:{a}" for a in data.attr_names]
    meta = {"fingerprint": data.fingerprint, "attributes": ",".join(data.attr_names)}

    x_all = data.train.images.astype(model.dtype)
    n = len(data.train)
    bs = cfg.train.batch_size
    separate = cfg.train.separate
    iteration = 0
    start = time.perf_counter()
    with open(out / METRICS_NAME, "w", encoding="utf-8") as mf, open(out / TIMING_NAME, "w", encoding="utf-8") as tf:
        mf.write(header + ",".join(cols) + "\n")
        tf.write(header + "iteration,seconds\n")
        for epoch in range(1, cfg.train.epochs + 1):
            perm = np.random.default_rng([cfg.run.seed, epoch]).permutation(n)
            for lo in range(0, n, bs):
                idx = perm[lo : lo + bs]
                batch = Batch(x_all[idx], data.train.identities[idx], data.train.attributes[idx])
                iteration += 1
                if separate:
                    l1, attr_probs = attribute_step(model, opt1, batch)
                    l2 = id_probs = None
                else:
                    r = joint_step(model, opt1, opt2, batch)
                    l1, l2, attr_probs, id_probs = r.l1, r.l2, r.attr_probs, r.id_probs
                id_acc = None if id_probs is None else float((id_probs.argmax(1) == batch.identities).mean())
                if attr_probs is None:
                    attr_acc = [None] * n_attr
                else:
                    attr_acc = _attr_accuracy(attr_probs, batch.attributes)
                row = [str(epoch), str(iteration), _fmt(l1), _fmt(l2), _fmt(id_acc)] + [_fmt(a) for a in attr_acc]
                mf.write(",".join(row) + "\n")
                mf.flush()
                tf.write(f"{iteration},{time.perf_counter() - start:.3f}\n")
            save_checkpoint(out / CHECKPOINT_NAME, Checkpoint(model, opt1, opt2, cfg, meta, {"mean": data.mean}))
            log.info("epoch %d/%d done (iteration %d)", epoch, cfg.train.epochs, iteration)

    report = evaluate(model, data.test, data.attr_names)
    report.update(split="test", scenario=model.scenario.value, separate=separate, fingerprint=data.fingerprint)
    (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def evaluate(model: FusionModel, dataset: Dataset, attr_names: list[str], batch_size: int = 64) -> dict:
    """Identity and per-attribute accuracy of ``model`` on ``dataset``.

    GT models read the dataset's attribute bits; PA models fuse their own
    predictions; NPD models fuse nothing.
    """
    id_hits = 0
    attr_hits = np.zeros(len(attr_names))
    for lo in range(0, len(dataset), batch_size):
        sl = slice(lo, lo + batch_size)
        x = dataset.images[sl].astype(model.dtype)
        attr_probs, id_probs = forward(model, x, gt_attrs=dataset.attributes[sl])
        id_hits += int((id_probs.data.argmax(1) == dataset.identities[sl]).sum())
        attr_hits += (attr_probs.data.argmax(-1) == dataset.attributes[sl]).sum(axis=0)
    n = len(dataset)
    return {
        "n": n,
        "identity_accuracy": id_hits / n,
        "attribute_accuracy": {a: float(h / n) for a, h in zip(attr_names, attr_hits)},
    }


def evaluate_checkpoint(path: str | Path, scenario, split: str = "test", manifest: str | None = None) -> dict:
    ckpt = load_checkpoint(path)
    ckpt.require_scenario(scenario)
    cfg = ckpt.config
    if manifest:
        cfg.data.manifest = str(manifest)
    attr_names = ckpt.meta.get("attributes", "").split(",")
    data = prepare_data(cfg, attr_names, ckpt.extras.get("mean"))
    if split == "test":
        ds = data.test
    elif split == "train":
        ds = data.train
    elif split == "all":
        ds = Dataset(
            np.concatenate([data.train.images, data.test.images]),
            np.concatenate([data.train.identities, data.test.identities]),
            np.concatenate([data.train.attributes, data.test.attributes]),
            data.attr_names,
        )
    else:
        raise ConfigError(f"unknown split {split!r}")
    report = evaluate(ckpt.model, ds, attr_names)
    fp = ckpt.meta.get("fingerprint")
    report.update(split=split, scenario=ckpt.model.scenario.value, fingerprint=data.fingerprint,
                  fingerprint_match=fp == data.fingerprint)
    return report


# ---------------------------------------------------------------- metrics files


@dataclass
class MetricsFile:
    config: dict[str, str]
    columns: list[str]
    rows: list[dict[str, float | None]]

    @property
    def fingerprint(self) -> str:
        return self.config.get("dataset.fingerprint", "")


def read_metrics(path: str | Path) -> MetricsFile:
    config: dict[str, str] = {}
    columns: list[str] | None = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                config[k] = v
            continue
        if not line.strip():
            continue
        cells = line.split(",")
        if columns is None:
            columns = cells
            continue
        if len(cells) != len(columns):
            break  # partial trailing row of an interrupted run
        rows.append({c: (float(v) if v else None) for c, v in zip(columns, cells)})
    return MetricsFile(config, columns or [], rows)
