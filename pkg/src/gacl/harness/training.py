"""Training loop, evaluation, the global-mean baseline and the ablation suite."""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import predictor
from ..dataset import SplitDataset
from ..diffcore import AdamW, NonFiniteError
from ..dyngraph import DynamicInvocationGraph, build_graph
from ..tpgat import Ablation, WindowBuilder
from .config import ModelConfig
from .metrics import MetricsReport, mae, reports_to_csv
from .model import GACLModel, to_target_space

log = logging.getLogger(__name__)


class NoEligibleTargets(ValueError):
    """No record has at least ``ws`` slices of history."""


class ConfigMismatchError(ValueError):
    pass


class BaselineWarning(UserWarning):
    pass


@dataclass
class LeakageAudit:
    """Records every (user, service, slice) a training run reads as a target or an edge."""

    target_triples: set = field(default_factory=set)
    edge_triples: set = field(default_factory=set)
    target_reads: int = 0
    edge_reads: int = 0

    def record_targets(self, triples) -> None:
        triples = list(triples)
        self.target_reads += len(triples)
        self.target_triples.update(triples)

    def record_edges(self, triples) -> None:
        triples = set(triples)
        self.edge_reads += len(triples)
        self.edge_triples.update(triples)

    def touched(self, triples) -> int:
        """How many of ``triples`` were read at all during training."""
        seen = self.target_triples | self.edge_triples
        return sum(1 for t in map(tuple, triples) if t in seen)


@dataclass
class Targets:
    users: np.ndarray
    services: np.ndarray
    slices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.size)

    def triples(self, rows=None) -> list[tuple[int, int, int]]:
        rows = np.arange(len(self)) if rows is None else rows
        return list(zip(self.users[rows].tolist(), self.services[rows].tolist(), self.slices[rows].tolist()))

    def take(self, rows) -> "Targets":
        return Targets(self.users[rows], self.services[rows], self.slices[rows], self.values[rows])


def eligible_targets(ds, ws: int) -> Targets:
    rows = np.nonzero(ds.slices >= ws)[0]
    return Targets(ds.users[rows], ds.services[rows], ds.slices[rows], ds.values[rows])


@dataclass
class TrainResult:
    model: GACLModel
    log: list[dict]
    optimizer: AdamW
    epochs_run: int
    stopped_early: bool = False
    early_stop_state: dict = field(default_factory=dict)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in self.log)

    def save(self, path: str | Path) -> None:
        self.model.save(path, optimizer_state=self.optimizer.state_arrays(), step=self.optimizer.t,
                        epoch=self.epochs_run, early_stop=self.early_stop_state)


def _batch_gradients(model: GACLModel, builder: WindowBuilder, targets: Targets, y: np.ndarray,
                     workers: int, audit: LeakageAudit | None) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of squared errors and gradient of (batch MSE + L2) over one mini-batch.

    With ``workers > 1`` the batch is sharded; each shard runs its own tape
    over a read-only parameter snapshot and the shard gradients are summed
    in shard order.
    """
    cfg = model.config
    B = len(targets)
    decay = model.decay_names()
    triples = targets.triples()
    if audit is not None:
        audit.record_targets(triples)

    def run(shard_rows, with_penalty):
        params = model.ps.snapshot()
        wb = builder.build([triples[i] for i in shard_rows])
        if audit is not None:
            audit.record_edges(wb.edge_triples(model.n_users))
        preds = model.forward(params, wb)
        loss = predictor.loss(preds, y[shard_rows], params, cfg.reg_lambda if with_penalty else 0.0,
                              decay_names=decay, denominator=B)
        loss.backward()
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
        return float(np.sum((preds.data - y[shard_rows]) ** 2)), grads

    shards = [s for s in np.array_split(np.arange(B), min(workers, B)) if s.size]
    if len(shards) == 1:
        return run(shards[0], True)
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = list(pool.map(run, shards, [i == 0 for i in range(len(shards))]))
    sse = sum(r[0] for r in results)
    grads = {n: sum(r[1][n] for r in results) for n in results[0][1]}
    return sse, grads


def predict_targets(model: GACLModel, builder: WindowBuilder, triples, batch_size: int = 256,
                    group_by_slice: bool = True, workers: int = 1) -> np.ndarray:
    """Raw-scale predictions for (user, service, target_slice) triples, in input order."""
    triples = list(triples)
    if not triples:
        return np.zeros(0)
    order = np.arange(len(triples))
    if group_by_slice:
        order = np.array(sorted(order, key=lambda i: (triples[i][2], i)))
    params = model.constant_params()
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    def run(rows):
        wb = builder.build([triples[i] for i in rows])
        return model.forward(params, wb).data

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    out = np.empty(len(triples))
    out[order] = np.concatenate(outs)
    return model.to_raw(out)


def window_builder(model: GACLModel, graph: DynamicInvocationGraph) -> WindowBuilder:
    cfg = model.config
    return WindowBuilder(graph, cfg.ws, cfg.l_g, cfg.neighbor_cap, cfg.seed_sample)


def train(config: ModelConfig, split: SplitDataset, *, audit: LeakageAudit | None = None,
          resume: str | Path | None = None, graph: DynamicInvocationGraph | None = None,
          on_epoch=None) -> TrainResult:
    """Fit a model on the training split.

    Each epoch shuffles the eligible targets (seeded by ``seed_sample`` and the
    epoch index), takes AdamW steps on mini-batches and logs the epoch loss.
    A seeded ``val_fraction`` of the eligible targets is held out; with
    ``patience > 0`` training stops once validation MAE has not improved for
    that many epochs and the best parameters are restored.
    """
    cfg = config
    graph = graph or build_graph(split)
    eligible = eligible_targets(split.train, cfg.ws)
    if len(eligible) == 0:
        raise NoEligibleTargets(f"no training record lies at slice >= ws={cfg.ws}")

    n_val = int(np.floor(cfg.val_fraction * len(eligible)))
    n_val = min(n_val, len(eligible) - 1)
    perm = np.random.default_rng([cfg.seed_split, 1]).permutation(len(eligible))
    val = eligible.take(np.sort(perm[:n_val])) if n_val > 0 else None
    fit = eligible.take(np.sort(perm[n_val:]))

    y = to_target_space(fit.values, cfg.target_mode, graph.value_min, graph.value_max)
    model = GACLModel(cfg, split.n_users, split.n_services, graph.value_min, graph.value_max,
                      output_bias=float(y.mean()))
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.effective_weight_decay,
                decay_filter=set(model.decay_names()).__contains__)
    builder = window_builder(model, graph)

    start_epoch = 0
    state = {"best_val": None, "best_epoch": None, "bad_epochs": 0}
    best_values = None
    if resume is not None:
        loaded, meta, rest = GACLModel.load(resume)
        if meta["config_hash"] != cfg.config_hash():
            raise ConfigMismatchError("resume checkpoint was trained under a different configuration")
        model.ps.set_values(loaded.ps.copy_values())
        opt.load_state_arrays(rest, meta.get("step", 0))
        start_epoch = int(meta.get("epoch", 0))
        state.update(meta.get("early_stop") or {})
        if state["best_val"] is not None:
            best_values = model.ps.copy_values()

    history: list[dict] = []
    stopped = False
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed_sample, epoch]).permutation(len(fit))
        sse = 0.0
        for i in range(0, len(order), cfg.batch_size):
            rows = order[i:i + cfg.batch_size]
            batch_sse, grads = _batch_gradients(model, builder, fit.take(rows), y[rows], cfg.workers, audit)
            if not np.isfinite(batch_sse):
                raise NonFiniteError(f"non-finite loss in epoch {epoch}")
            sse += batch_sse
            opt.step(model.ps, grads)
        penalty = sum(float(np.sum(model.ps[n].data ** 2)) for n in model.decay_names())
        train_mse = sse / len(fit)
        entry = {"epoch": epoch, "train_loss": train_mse + cfg.reg_lambda * penalty,
                 "train_mse": train_mse, "val_mae": None, "lr": cfg.lr}
        if val is not None:
            pred = predict_targets(model, builder, val.triples(), cfg.batch_size)
            entry["val_mae"] = mae(pred, val.values)
        entry["wall_time"] = time.perf_counter() - t0
        history.append(entry)
        log.info("epoch %d train_loss=%.6g val_mae=%s", epoch, entry["train_loss"], entry["val_mae"])
        if on_epoch is not None:
            on_epoch(entry)

        if val is not None and cfg.patience > 0:
            if state["best_val"] is None or entry["val_mae"] < state["best_val"]:
                state.update(best_val=entry["val_mae"], best_epoch=epoch, bad_epochs=0)
                best_values = model.ps.copy_values()
            else:
                state["bad_epochs"] += 1
                if state["bad_epochs"] >= cfg.patience:
                    stopped = True
                    break

    epochs_run = epoch + 1 if history else start_epoch
    if best_values is not None and val is not None and cfg.patience > 0:
        model.ps.set_values(best_values)
    return TrainResult(model, history, opt, epochs_run, stopped, state)


def evaluate(model: GACLModel, split: SplitDataset, config: ModelConfig | None = None, *,
             force: bool = False, dataset_name: str | None = None,
             graph: DynamicInvocationGraph | None = None, workers: int = 1) -> MetricsReport:
    """MAE/NMAE/RMSE over every test record with at least ``ws`` slices of history."""
    if config is not None and config.config_hash() != model.config.config_hash():
        msg = (f"config hash {config.config_hash()} does not match the model's "
               f"{model.config.config_hash()}")
        if not force:
            raise ConfigMismatchError(msg)
        warnings.warn(msg + " (forced)", stacklevel=2)
    t0 = time.perf_counter()
    graph = graph or build_graph(split)
    targets = eligible_targets(split.test, model.config.ws)
    if len(targets) == 0:
        raise NoEligibleTargets(f"no test record lies at slice >= ws={model.config.ws}")
    pred = predict_targets(model, window_builder(model, graph), targets.triples(), model.config.batch_size,
                           workers=workers)
    return MetricsReport.from_predictions(
        pred, targets.values, dataset=dataset_name or split.parent.name, density=split.density,
        ablation=model.config.ablation_mode.label, config_hash=model.config.config_hash(),
        wall_time=time.perf_counter() - t0)


def baseline_global_mean(split: SplitDataset, ws: int = 0, dataset_name: str | None = None) -> MetricsReport:
    """Predict the training mean for every test record at slice >= ``ws``."""
    if len(split.train) == 0:
        raise ValueError("baseline needs a non-empty training split")
    targets = eligible_targets(split.test, ws)
    if len(targets) == 0:
        raise NoEligibleTargets(f"no test record lies at slice >= ws={ws}")
    pred = np.full(len(targets), float(np.mean(split.train.values)))
    return MetricsReport.from_predictions(pred, targets.values, dataset=dataset_name or split.parent.name,
                                          density=split.density, ablation="global-mean", config_hash="baseline")


def compare_to_baseline(report: MetricsReport, baseline: MetricsReport) -> bool:
    """True when the model beats the baseline MAE; warns otherwise."""
    if report.mae < baseline.mae:
        return True
    warnings.warn(f"model MAE {report.mae:.6g} does not beat the global-mean baseline {baseline.mae:.6g}",
                  BaselineWarning, stacklevel=2)
    return False


ABLATION_ORDER = (Ablation.FULL, Ablation.NO_TARGET, Ablation.NO_WEIGHT, Ablation.SEMANTIC_ONLY)


def run_ablation_suite(base_config: ModelConfig, split: SplitDataset, dataset_name: str | None = None,
                       return_results: bool = False):
    """Train and evaluate the full model and its three ablated variants on one split."""
    graph = build_graph(split)
    reports, results = [], []
    for mode in ABLATION_ORDER:
        cfg = base_config.replace(ablation=mode.value)
        result = train(cfg, split, graph=graph)
        reports.append(evaluate(result.model, split, dataset_name=dataset_name, graph=graph))
        results.append(result)
    return (reports, results) if return_results else reports


def ablation_table(reports) -> str:
    return reports_to_csv(reports)
