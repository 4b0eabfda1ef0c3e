"""Optimization loop with per-term parameter groups, metrics, and the
study drivers (depth/energy, term ablation, transport fit, random search).

Training is deterministic for a fixed (config, seed, dataset) triple: all
randomness flows through counter-based generators, and the optimizer walks
parameter groups in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable, backward
from .data import DatasetBundle, TemporalDataset, TransportTask, make_windows
from .graph import EnergyReport
from .models import (AdrGnnStatic, AdrGnnTemporal, GcnBaseline, SparseFeatures,
                     broadcast_time_embedding, layer_energy_profile, time_embedding)
from .operators import AdrLayerParams, adr_layer
from .runtime import SeedStream, philox

import logging

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

GROUPS = ("embedding", "advection", "diffusion", "reaction")
LAYER_CHOICES = (2, 4, 8, 16, 32, 64)
CHANNEL_CHOICES = (8, 16, 32, 64, 128, 256)


@dataclass
class TrainConfig:
    lr: dict = field(default_factory=lambda: {g: 1e-2 for g in GROUPS})
    weight_decay: dict = field(default_factory=lambda: {g: 5e-4 for g in GROUPS})
    dropout_io: float = 0.2
    dropout_hidden: float = 0.2
    h: float = 1.0
    layers: int = 4
    hidden: int = 64
    use_batchnorm: bool = False
    epochs: int = 1500
    patience: int = 200
    seed: int = 0
    cg_iterations: int = 5
    loss: str = "cross_entropy"
    terms: str = "ADR"
    tau_in: int = 4
    tau_out: int = 1
    n_frequencies: int = 10

    def validate(self, strict: bool = False) -> list[str]:
        """Check the documented hyperparameter ranges. Out-of-range values
        are warnings unless strict (the random-search driver is strict)."""
        problems = []
        for g in GROUPS:
            if not 1e-4 <= self.lr[g] <= 1e-1:
                problems.append(f"lr[{g}]={self.lr[g]} outside [1e-4, 1e-1]")
            if not 0.0 <= self.weight_decay[g] <= 1e-2:
                problems.append(f"weight_decay[{g}]={self.weight_decay[g]} outside [0, 1e-2]")
        for name, value in (("dropout_io", self.dropout_io),
                            ("dropout_hidden", self.dropout_hidden)):
            if not 0.0 <= value <= 0.9:
                problems.append(f"{name}={value} outside [0, 0.9]")
        if not 1e-3 <= self.h <= 1.0:
            problems.append(f"h={self.h} outside [1e-3, 1]")
        if self.layers not in LAYER_CHOICES:
            problems.append(f"layers={self.layers} not in {LAYER_CHOICES}")
        if self.hidden not in CHANNEL_CHOICES:
            problems.append(f"hidden={self.hidden} not in {CHANNEL_CHOICES}")
        if strict and problems:
            raise ValueError("config outside allowed ranges: " + "; ".join(problems))
        for p in problems:
            logger.warning("config: %s", p)
        return problems

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        for table, label in ((cfg.lr, "lr"), (cfg.weight_decay, "weight_decay")):
            missing = set(GROUPS) - set(table)
            if missing:
                raise ValueError(f"{label} missing groups: {sorted(missing)}")
        return cfg


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    accuracy: Optional[float] = None
    mse: Optional[float] = None
    rmse: Optional[float] = None
    mae: Optional[float] = None
    mape: Optional[float] = None
    mape_excluded: Optional[int] = None
    roc_auc: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def predict_classes(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)  # ties break to the lowest class index


def _binary_roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over ties
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(logits: np.ndarray, labels: np.ndarray,
                           mask: np.ndarray) -> Metrics:
    pred = predict_classes(logits[mask])
    truth = labels[mask]
    metrics = Metrics(accuracy=float((pred == truth).mean()))
    if logits.shape[1] == 2:
        scores = logits[mask, 1] - logits[mask, 0]
        metrics.roc_auc = _binary_roc_auc(scores, truth)
    return metrics


def regression_metrics(pred: np.ndarray, target: np.ndarray,
                       zero_threshold: float = 1e-8) -> Metrics:
    diff = pred - target
    mse_val = float((diff * diff).mean())
    defined = np.abs(target) >= zero_threshold
    excluded = int(diff.size - defined.sum())
    mape_val = (float((np.abs(diff[defined] / target[defined])).mean())
                if defined.any() else None)
    return Metrics(mse=mse_val, rmse=float(math.sqrt(mse_val)),
                   mae=float(np.abs(diff).mean()), mape=mape_val,
                   mape_excluded=excluded)


def aggregate_metrics(results: list[Metrics]) -> dict[str, tuple[float, float]]:
    """Per-field mean and standard deviation over splits/repetitions."""
    summary = {}
    for name in ("accuracy", "mse", "rmse", "mae", "mape", "roc_auc"):
        values = [getattr(m, name) for m in results if getattr(m, name) is not None]
        if values:
            arr = np.asarray(values, dtype=np.float64)
            summary[name] = (float(arr.mean()), float(arr.std()))
    return summary


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moment estimation with decoupled weight decay, one
    (lr, weight_decay) pair per parameter group."""

    def __init__(self, groups: dict[str, list[Variable]], lr: dict[str, float],
                 weight_decay: dict[str, float], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.groups = groups
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for ps in groups.values() for p in ps}
        self._v = {id(p): np.zeros_like(p.value) for ps in groups.values() for p in ps}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, params in self.groups.items():
            lr = self.lr.get(name, 0.0)
            wd = self.weight_decay.get(name, 0.0)
            for p in params:
                g = p.grad
                if not np.isfinite(g).all():
                    raise TrainingDiverged(f"non-finite gradient in parameter {p.name!r}")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if wd:
                    p.value -= lr * wd * p.value
                p.value -= lr * update

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.zero_grad()


def optimizer_step(optimizer: AdamW) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# snapshots

def _snapshot(model) -> dict:
    params = {name: var.value.copy() for name, var in model.named_parameters().items()}
    state = {name: arr.copy() for name, arr in model.extra_state().items()}
    return {"params": params, "state": state}


def _restore(model, snapshot: dict) -> None:
    for name, var in model.named_parameters().items():
        var.value = snapshot["params"][name].copy()
        var.grad = np.zeros_like(var.value)
    state = model.extra_state()
    for name in state:
        state[name][...] = snapshot["state"][name]


# ---------------------------------------------------------------------------
# node-classification training

@dataclass
class TrainResult:
    model: object
    metrics: Metrics
    val_metrics: Metrics
    history: list[dict]
    best_epoch: int


def _classifier_loop(model, bundle: DatasetBundle, cfg: TrainConfig,
                     split_index: int, forward_kwargs: Optional[dict] = None) -> TrainResult:
    g = bundle.graph
    x = bundle.features
    if (isinstance(model, AdrGnnStatic)
            and np.count_nonzero(x) < 0.05 * x.size and x.size > 1 << 20):
        x = SparseFeatures(x)  # bag-of-words inputs: CSR fast path
    labels = bundle.labels
    train_mask, val_mask, test_mask = bundle.splits[split_index]
    if not train_mask.any():
        raise ValueError(f"split {split_index} has an empty train mask")
    forward_kwargs = forward_kwargs or {}
    optimizer = AdamW(model.param_groups(), cfg.lr, cfg.weight_decay)
    stream = SeedStream(cfg.seed + split_index)
    history: list[dict] = []
    best = {"val": -np.inf, "epoch": -1, "snapshot": _snapshot(model)}
    for epoch in range(cfg.epochs):
        try:
            with Tape() as tape:
                logits = model.forward(g, x, train=True, rng=stream, **forward_kwargs)
                loss = ad.cross_entropy(logits, labels, train_mask)
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            backward(tape, loss)
            optimizer.step()
            optimizer.zero_grad()
            eval_logits = model.forward(g, x, train=False, **forward_kwargs).value
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        val_acc = classification_metrics(eval_logits, labels, val_mask).accuracy
        history.append({"epoch": epoch, "train_loss": loss_value, "val_accuracy": val_acc})
        if val_acc > best["val"]:
            best = {"val": val_acc, "epoch": epoch, "snapshot": _snapshot(model)}
        elif val_acc == best["val"]:
            # keep the most-trained checkpoint among equal validation maxima;
            # patience still counts from the first time the maximum was hit
            best["snapshot"] = _snapshot(model)
            if epoch - best["epoch"] >= cfg.patience:
                break
        elif epoch - best["epoch"] >= cfg.patience:
            break
    _restore(model, best["snapshot"])
    eval_logits = model.forward(g, x, train=False, **forward_kwargs).value
    metrics = classification_metrics(eval_logits, labels, test_mask)
    val_metrics = classification_metrics(eval_logits, labels, val_mask)
    return TrainResult(model, metrics, val_metrics, history, best["epoch"])


def train_node_classification(bundle: DatasetBundle, cfg: TrainConfig,
                              split_index: int = 0) -> TrainResult:
    """Optimize masked cross-entropy with four parameter groups; early-stops
    on best validation accuracy and reports test metrics at that point."""
    cfg.validate()
    model = AdrGnnStatic.init(
        c_in=bundle.features.shape[1], c_out=bundle.n_classes, hidden=cfg.hidden,
        layers=cfg.layers, h=cfg.h, dropout_io=cfg.dropout_io,
        dropout_hidden=cfg.dropout_hidden, use_batchnorm=cfg.use_batchnorm,
        cg_iterations=cfg.cg_iterations, seed=cfg.seed + split_index)
    return _classifier_loop(model, bundle, cfg, split_index,
                            forward_kwargs={"terms": cfg.terms})


def train_gcn_baseline(bundle: DatasetBundle, cfg: TrainConfig,
                       split_index: int = 0) -> TrainResult:
    model = GcnBaseline.init(
        c_in=bundle.features.shape[1], c_out=bundle.n_classes, hidden=cfg.hidden,
        layers=cfg.layers, dropout=cfg.dropout_hidden, seed=cfg.seed + split_index)
    return _classifier_loop(model, bundle, cfg, split_index)


def run_splits(bundle: DatasetBundle, cfg: TrainConfig,
               split_indices: Optional[list[int]] = None,
               trainer: Callable = train_node_classification):
    """Train over several splits; returns per-split results and the
    mean/std summary."""
    indices = split_indices if split_indices is not None else list(range(len(bundle.splits)))
    results = [trainer(bundle, cfg, split_index=s) for s in indices]
    return results, aggregate_metrics([r.metrics for r in results])


def evaluate(model, bundle: DatasetBundle, split_index: int = 0,
             part: str = "test") -> Metrics:
    """Deterministic evaluation-mode metrics on one split part."""
    train_mask, val_mask, test_mask = bundle.splits[split_index]
    mask = {"train": train_mask, "val": val_mask, "test": test_mask}[part]
    logits = model.forward(bundle.graph, bundle.features, train=False).value
    return classification_metrics(logits, bundle.labels, mask)


# ---------------------------------------------------------------------------
# temporal training

def _chronological_split(dataset: TemporalDataset, windows) -> tuple[list[int], list[int]]:
    """Window indices for the training prefix and the final 10% horizon;
    windows whose targets straddle the boundary are dropped."""
    horizon_start = int(math.ceil(0.9 * dataset.series.shape[0]))
    train_idx, test_idx = [], []
    for i in range(len(windows)):
        if i + dataset.tau_in + dataset.tau_out <= horizon_start:
            train_idx.append(i)
        elif i + dataset.tau_in >= horizon_start:
            test_idx.append(i)
    return train_idx, test_idx


def train_temporal(dataset: TemporalDataset, cfg: TrainConfig) -> TrainResult:
    """Incremental-mode training: one gradient step per window, chronological
    order, windows built over the training prefix; evaluation on the final
    10% horizon. Time embeddings are precomputed once per dataset."""
    windows = make_windows(dataset)
    train_idx, test_idx = _chronological_split(dataset, windows)
    if not train_idx or not test_idx:
        raise ValueError("series too short for a 90/10 chronological split")
    c_in = dataset.series.shape[2]
    n = dataset.graph.n_nodes
    embeddings = [broadcast_time_embedding(time_embedding(times, cfg.n_frequencies), n)
                  for _x, _y, times in windows]
    model = AdrGnnTemporal.init(
        c_in=c_in, c_out=c_in, hidden=cfg.hidden, layers=cfg.layers, h=cfg.h,
        tau_in=dataset.tau_in, tau_out=dataset.tau_out,
        n_frequencies=cfg.n_frequencies, dropout_io=cfg.dropout_io,
        dropout_hidden=cfg.dropout_hidden, use_batchnorm=cfg.use_batchnorm,
        cg_iterations=cfg.cg_iterations, seed=cfg.seed)
    optimizer = AdamW(model.param_groups(), cfg.lr, cfg.weight_decay)
    stream = SeedStream(cfg.seed)
    loss_fn = ad.mae if cfg.loss == "mae" else ad.mse
    history = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for i in train_idx:
            x, y, _times = windows[i]
            with Tape() as tape:
                pred = model.forward(dataset.graph, x, embeddings[i], train=True, rng=stream)
                loss = loss_fn(pred, y)
            if not np.isfinite(float(loss.value)):
                raise TrainingDiverged(f"non-finite temporal loss at epoch {epoch}")
            backward(tape, loss)
            optimizer.step()
            optimizer.zero_grad()
            epoch_loss += float(loss.value)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(train_idx)})
    metrics = evaluate_temporal(model, dataset, n_frequencies=cfg.n_frequencies)
    return TrainResult(model, metrics, metrics, history, cfg.epochs - 1)


def evaluate_temporal(model, dataset: TemporalDataset,
                      n_frequencies: int = 10) -> Metrics:
    """Deterministic forecast metrics over the final 10% horizon."""
    windows = make_windows(dataset)
    _train_idx, test_idx = _chronological_split(dataset, windows)
    if not test_idx:
        raise ValueError("series too short for a 10% evaluation horizon")
    n = dataset.graph.n_nodes
    preds, targets = [], []
    for i in test_idx:
        x, y, times = windows[i]
        emb = broadcast_time_embedding(time_embedding(times, n_frequencies), n)
        preds.append(model.forward(dataset.graph, x, emb, train=False).value)
        targets.append(y)
    return regression_metrics(np.concatenate(preds), np.concatenate(targets))


# ---------------------------------------------------------------------------
# studies

def depth_energy_study(bundle: DatasetBundle, depths, cfg: TrainConfig,
                       split_index: int = 0) -> list[dict]:
    """Train the ADR model and the convolution baseline at each depth;
    record test accuracy and the per-layer relative Dirichlet energy of the
    trained models."""
    rows = []
    for depth in depths:
        cfg_d = replace(cfg, layers=int(depth))
        for kind, trainer in (("adr", train_node_classification),
                              ("gcn", train_gcn_baseline)):
            result = trainer(bundle, cfg_d, split_index=split_index)
            _logits, stages = result.model.forward(
                bundle.graph, bundle.features, train=False, diagnostics=True)
            report = EnergyReport.from_energies(layer_energy_profile(bundle.graph, stages))
            rows.append({
                "model": kind, "depth": int(depth),
                "accuracy": result.metrics.accuracy,
                "energies": report.per_layer_energy,
                "relative_energy": report.relative_energy,
            })
    return rows


def ablation_study(bundle: DatasetBundle, term_masks, cfg: TrainConfig,
                   split_indices: Optional[list[int]] = None) -> list[dict]:
    """One metrics row per term subset; inactive terms are the identity."""
    rows = []
    for terms in term_masks:
        if not terms:
            raise ValueError("ablation_study: empty term subset")
        cfg_t = replace(cfg, terms=terms)
        results, summary = run_splits(bundle, cfg_t, split_indices)
        rows.append({"terms": terms, "summary": summary,
                     "per_split": [r.metrics.to_dict() for r in results]})
    return rows


# ---------------------------------------------------------------------------
# synthetic transport fit

@dataclass
class TransportFitResult:
    terms: str
    final_mse: float
    trace: list[dict]  # step, mse, mass
    node_values: np.ndarray


def transport_fit(task: TransportTask, terms: str, layers: int = 4, h: float = 1.0,
                  lr: float = 0.05, epochs: int = 800, seed: int = 0,
                  channels: int = 8, log_every: int = 25,
                  cg_iterations: int = 30) -> TransportFitResult:
    """Fit the selected term subset to the transport task by MSE.

    The unit source mass is replicated into ``channels`` identical channels
    and the prediction is their plain average, so each term's expressiveness
    is measured on its own (no learned pointwise embedding or head). Every
    channel individually conserves mass under advection, hence so does the
    average. A single channel leaves the velocity nets with exactly tied
    ReLU inputs on equal-valued edges (zero gradients); the replicated
    channels diverge after one step and break those ties.
    """
    g = task.graph
    stream = SeedStream(seed)
    layer_params = [AdrLayerParams.init(channels, stream.child(), name=f"layers.{l}")
                    for l in range(layers)]
    groups = {"advection": [], "diffusion": [], "reaction": []}
    for lp in layer_params:
        groups["advection"] += lp.advection.parameters()
        groups["diffusion"] += lp.diffusion.parameters()
        groups["reaction"] += lp.reaction.parameters()
    optimizer = AdamW(groups, {k: lr for k in groups}, {k: 0.0 for k in groups})
    source = np.tile(task.source_features, (1, channels))
    channel_mean = np.full((channels, 1), 1.0 / channels)

    def forward() -> Variable:
        u = Variable(source)
        u0 = Variable(source)
        for lp in layer_params:
            u = adr_layer(g, u, u0, lp, h, cg_iterations=cg_iterations, terms=terms)
        return ad.matmul(u, Variable(channel_mean))

    trace = []
    for step in range(epochs):
        with Tape() as tape:
            out = forward()
            loss = ad.mse(out, task.target_features)
        if not np.isfinite(float(loss.value)):
            raise TrainingDiverged(f"non-finite transport loss at step {step}")
        if step % log_every == 0:
            trace.append({"step": step, "mse": float(loss.value),
                          "mass": float(out.value.sum())})
        backward(tape, loss)
        optimizer.step()
        optimizer.zero_grad()
    final = forward()
    final_mse = float(np.mean((final.value - task.target_features) ** 2))
    trace.append({"step": epochs, "mse": final_mse, "mass": float(final.value.sum())})
    return TransportFitResult(terms, final_mse, trace, final.value.copy())


# ---------------------------------------------------------------------------
# random hyperparameter search

def sample_config(rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
    """One draw from the documented ranges: log-uniform rates, uniform
    decays/dropouts/step size, discrete-uniform layers/channels/batchnorm."""
    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    return replace(
        base,
        lr={g: log_uniform(1e-4, 1e-1) for g in GROUPS},
        weight_decay={g: float(rng.uniform(0.0, 1e-2)) for g in GROUPS},
        dropout_io=float(rng.uniform(0.0, 0.9)),
        dropout_hidden=float(rng.uniform(0.0, 0.9)),
        use_batchnorm=bool(rng.integers(0, 2)),
        h=float(rng.uniform(1e-3, 1.0)),
        layers=int(rng.choice(LAYER_CHOICES)),
        hidden=int(rng.choice(CHANNEL_CHOICES)),
    )


def grid_search(bundle: DatasetBundle, budget: int, base: TrainConfig,
                seed: int = 0, split_index: int = 0):
    """Random search over the documented ranges; best trial by validation
    accuracy. Returns (best config, trial log)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    trials = []
    best_cfg, best_val = None, -np.inf
    for trial in range(budget):
        cfg = sample_config(philox(seed, trial), base)
        cfg.validate(strict=True)
        try:
            result = train_node_classification(bundle, cfg, split_index=split_index)
            val = result.val_metrics.accuracy
            record = {"trial": trial, "config": cfg.to_dict(), "val_accuracy": val,
                      "test_accuracy": result.metrics.accuracy, "status": "ok"}
        except TrainingDiverged as exc:
            val = -np.inf
            record = {"trial": trial, "config": cfg.to_dict(), "val_accuracy": None,
                      "status": f"diverged: {exc}"}
        trials.append(record)
        if val > best_val:
            best_val, best_cfg = val, cfg
    return best_cfg, trials

