"""Dataset containers, on-disk format, split generation, temporal windows,
and the synthetic transport-task generator.

On disk a dataset is a directory with a manifest.json plus flat little-
endian binary sidecar arrays (float64 / int64, row major); small fixtures
may inline arrays directly in the manifest. See FORMATS.md for the byte-
exact layout. Loaders either produce a fully validated bundle or raise
with a JSON-pointer-style location.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import Graph, build_graph, erdos_renyi
from .runtime import philox

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "adrgnn-bundle-v1"
_INLINE_LIMIT = 4096  # elements; larger arrays go to .bin sidecars


class DataFormatError(ValueError):
    """Schema violation with the JSON-pointer-ish path of the offender."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# bundle types

@dataclass
class DatasetBundle:
    graph: Graph
    features: np.ndarray
    labels: Optional[np.ndarray]
    splits: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    name: str = "unnamed"
    homophily: Optional[float] = None
    row_normalized: bool = False
    split_source: Optional[str] = None

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            raise ValueError("bundle has no labels")
        return int(self.labels.max()) + 1


@dataclass
class TemporalDataset:
    graph: Graph
    series: np.ndarray  # (T, n, c)
    timestamps: np.ndarray  # (T,)
    tau_in: int = 4
    tau_out: int = 1
    name: str = "unnamed"


@dataclass
class TransportTask:
    graph: Graph
    source_features: np.ndarray  # (n, 1), 1/|sources| on sources
    target_features: np.ndarray  # (n, 1), 1 at the destination
    source_set: np.ndarray
    destination: int


# ---------------------------------------------------------------------------
# container format

def _array_spec(name: str, arr: np.ndarray, out_dir: Path, inline_limit: int) -> dict:
    dtype = "int64" if np.issubdtype(arr.dtype, np.integer) else "float64"
    arr = arr.astype("<i8" if dtype == "int64" else "<f8")
    spec = {"dtype": dtype, "shape": list(arr.shape)}
    if arr.size <= inline_limit:
        spec["inline"] = arr.ravel().tolist()
    else:
        filename = f"{name}.bin"
        (out_dir / filename).write_bytes(arr.tobytes(order="C"))
        spec["file"] = filename
    return spec


def _read_array(spec, base_dir: Path, path: str) -> np.ndarray:
    if not isinstance(spec, dict):
        raise DataFormatError(path, "array spec must be an object")
    for key in ("dtype", "shape"):
        if key not in spec:
            raise DataFormatError(f"{path}/{key}", "missing")
    dtype = {"int64": "<i8", "float64": "<f8"}.get(spec["dtype"])
    if dtype is None:
        raise DataFormatError(f"{path}/dtype", f"unsupported dtype {spec['dtype']!r}")
    shape = tuple(spec["shape"])
    if "inline" in spec:
        arr = np.asarray(spec["inline"], dtype=dtype)
    elif "file" in spec:
        raw = (base_dir / spec["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=dtype).copy()
    else:
        raise DataFormatError(path, "array spec needs 'inline' or 'file'")
    if arr.size != int(np.prod(shape)) if shape else arr.size != 1:
        raise DataFormatError(f"{path}/shape", f"{arr.size} values do not fill shape {shape}")
    return arr.reshape(shape)


def _resolve_manifest(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.is_dir():
        manifest = path / "manifest.json"
    else:
        manifest = path
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    return manifest, manifest.parent


def save_bundle(bundle: DatasetBundle, out_dir, inline_limit: int = _INLINE_LIMIT) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    edges = np.stack([g.edge_src, g.edge_dst], axis=1)
    arrays = {
        "edges": _array_spec("edges", edges, out_dir, inline_limit),
        "features": _array_spec("features", bundle.features, out_dir, inline_limit),
    }
    if bundle.labels is not None:
        arrays["labels"] = _array_spec("labels", bundle.labels, out_dir, inline_limit)
    for part in ("train", "val", "test"):
        idx = {"train": 0, "val": 1, "test": 2}[part]
        masks = np.stack([s[idx].astype(np.int64) for s in bundle.splits], axis=0)
        arrays[f"split_{part}"] = _array_spec(f"split_{part}", masks, out_dir, inline_limit)
    manifest = {
        "schema": SCHEMA_VERSION,
        "kind": "node_classification",
        "name": bundle.name,
        "n_nodes": g.n_nodes,
        "homophily": bundle.homophily,
        "row_normalized": bundle.row_normalized,
        "split_source": bundle.split_source,
        "arrays": arrays,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


def load_graph_dataset(path) -> DatasetBundle:
    """Load a node-classification bundle, validating the whole schema."""
    manifest_path, base = _resolve_manifest(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != SCHEMA_VERSION:
        raise DataFormatError("/schema", f"expected {SCHEMA_VERSION!r}")
    if manifest.get("kind") != "node_classification":
        raise DataFormatError("/kind", f"expected 'node_classification', got {manifest.get('kind')!r}")
    n = manifest.get("n_nodes")
    if not isinstance(n, int) or n < 1:
        raise DataFormatError("/n_nodes", "must be a positive integer")
    arrays = manifest.get("arrays", {})
    edges = _read_array(arrays.get("edges"), base, "/arrays/edges").astype(np.int64)
    graph = build_graph(edges, n, symmetrize=True)
    features = _read_array(arrays.get("features"), base, "/arrays/features")
    if features.shape[0] != n:
        raise DataFormatError("/arrays/features/shape", f"rows {features.shape[0]} != n_nodes {n}")
    labels = None
    if "labels" in arrays:
        labels = _read_array(arrays["labels"], base, "/arrays/labels").astype(np.int64)
        if labels.shape != (n,):
            raise DataFormatError("/arrays/labels/shape", f"{labels.shape} != ({n},)")
    splits = []
    masks = {}
    for part in ("train", "val", "test"):
        key = f"split_{part}"
        if key not in arrays:
            raise DataFormatError(f"/arrays/{key}", "missing")
        masks[part] = _read_array(arrays[key], base, f"/arrays/{key}").astype(bool)
        if masks[part].ndim != 2 or masks[part].shape[1] != n:
            raise DataFormatError(f"/arrays/{key}/shape", f"expected (k, {n})")
    k = masks["train"].shape[0]
    if any(masks[p].shape[0] != k for p in ("val", "test")) or k < 1:
        raise DataFormatError("/arrays", "split parts must share the same k >= 1")
    for s in range(k):
        train, val, test = masks["train"][s], masks["val"][s], masks["test"][s]
        if ((train & val) | (train & test) | (val & test)).any():
            raise DataFormatError(f"/arrays/split_train/{s}", "split masks overlap")
        splits.append((train, val, test))
    return DatasetBundle(
        graph=graph, features=features, labels=labels, splits=splits,
        name=manifest.get("name", "unnamed"), homophily=manifest.get("homophily"),
        row_normalized=bool(manifest.get("row_normalized", False)),
        split_source=manifest.get("split_source"),
    )


def save_temporal(dataset: TemporalDataset, out_dir, inline_limit: int = _INLINE_LIMIT) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = dataset.graph
    edges = np.stack([g.edge_src, g.edge_dst], axis=1)
    manifest = {
        "schema": SCHEMA_VERSION,
        "kind": "temporal",
        "name": dataset.name,
        "n_nodes": g.n_nodes,
        "tau_in": dataset.tau_in,
        "tau_out": dataset.tau_out,
        "arrays": {
            "edges": _array_spec("edges", edges, out_dir, inline_limit),
            "series": _array_spec("series", dataset.series, out_dir, inline_limit),
            "timestamps": _array_spec("timestamps", dataset.timestamps, out_dir, inline_limit),
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


def load_temporal_dataset(path) -> TemporalDataset:
    manifest_path, base = _resolve_manifest(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != SCHEMA_VERSION:
        raise DataFormatError("/schema", f"expected {SCHEMA_VERSION!r}")
    if manifest.get("kind") != "temporal":
        raise DataFormatError("/kind", f"expected 'temporal', got {manifest.get('kind')!r}")
    n = manifest.get("n_nodes")
    if not isinstance(n, int) or n < 1:
        raise DataFormatError("/n_nodes", "must be a positive integer")
    arrays = manifest.get("arrays", {})
    edges = _read_array(arrays.get("edges"), base, "/arrays/edges").astype(np.int64)
    series = _read_array(arrays.get("series"), base, "/arrays/series")
    timestamps = _read_array(arrays.get("timestamps"), base, "/arrays/timestamps")
    if series.ndim != 3 or series.shape[1] != n:
        raise DataFormatError("/arrays/series/shape", f"expected (T, {n}, c), got {series.shape}")
    if timestamps.shape != (series.shape[0],):
        raise DataFormatError("/arrays/timestamps/shape",
                              f"{timestamps.shape} != ({series.shape[0]},)")
    tau_in = int(manifest.get("tau_in", 4))
    tau_out = int(manifest.get("tau_out", 1))
    if series.shape[0] < tau_in + tau_out:
        raise DataFormatError("/arrays/series/shape",
                              f"T={series.shape[0]} < tau_in + tau_out = {tau_in + tau_out}")
    return TemporalDataset(
        graph=build_graph(edges, n, symmetrize=True), series=series,
        timestamps=timestamps, tau_in=tau_in, tau_out=tau_out,
        name=manifest.get("name", "unnamed"),
    )


def dataset_checksum(path) -> str:
    """sha256 over the manifest and every sidecar, for run manifests."""
    manifest_path, base = _resolve_manifest(path)
    digest = hashlib.sha256(manifest_path.read_bytes())
    for bin_file in sorted(base.glob("*.bin")):
        digest.update(bin_file.name.encode())
        digest.update(bin_file.read_bytes())
    return digest.hexdigest()


def from_temporal_json(payload: dict, name: str = "converted",
                       tau_in: int = 4, tau_out: int = 1) -> TemporalDataset:
    """Convert the upstream {"edges": [[i, j], ...], "FX": [[...], ...]}
    JSON shape (per-time-step rows of per-node values) to a dataset."""
    if "edges" not in payload or "FX" not in payload:
        raise DataFormatError("/", "payload needs 'edges' and 'FX'")
    fx = np.asarray(payload["FX"], dtype=np.float64)
    if fx.ndim == 2:
        fx = fx[:, :, None]
    n = fx.shape[1]
    graph = build_graph(np.asarray(payload["edges"], dtype=np.int64), n, symmetrize=True)
    timestamps = np.arange(fx.shape[0], dtype=np.float64)
    return TemporalDataset(graph=graph, series=fx, timestamps=timestamps,
                           tau_in=tau_in, tau_out=tau_out, name=name)


# ---------------------------------------------------------------------------
# splits

def generate_splits(n: int, ratios: tuple[float, float, float] = (0.48, 0.32, 0.20),
                    k: int = 10, seed: int = 0, labels: Optional[np.ndarray] = None,
                    stratified: bool = False) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """k seeded permutation splits partitioned by the given ratios.

    With ``stratified=True`` (requires labels) each class is partitioned
    proportionally. Deterministic and platform independent for fixed seed.
    """
    if sum(ratios) > 1 + 1e-12:
        raise ValueError(f"ratios {ratios} sum to more than 1")
    full_cover = abs(sum(ratios) - 1.0) < 1e-12
    splits = []
    for s in range(k):
        rng = philox(seed, s)
        train = np.zeros(n, dtype=bool)
        val = np.zeros(n, dtype=bool)
        test = np.zeros(n, dtype=bool)
        pools = ([np.flatnonzero(labels == c) for c in np.unique(labels)]
                 if stratified and labels is not None else [np.arange(n)])
        for pool in pools:
            perm = pool[rng.permutation(len(pool))]
            n_train = int(round(ratios[0] * len(pool)))
            n_val = int(round(ratios[1] * len(pool)))
            if full_cover:
                n_test = len(pool) - n_train - n_val
            else:
                n_test = int(round(ratios[2] * len(pool)))
            if min(n_train, n_val, n_test) < 1:
                raise ValueError(
                    f"pool of {len(pool)} nodes too small for nonempty parts at ratios {ratios}")
            train[perm[:n_train]] = True
            val[perm[n_train:n_train + n_val]] = True
            test[perm[n_train + n_val:n_train + n_val + n_test]] = True
        splits.append((train, val, test))
    return splits


# ---------------------------------------------------------------------------
# temporal windows and normalization

def make_windows(dataset: TemporalDataset):
    """Stride-1 sliding windows: (inputs n x (tau_in*c), targets
    n x (tau_out*c), frame_times), chronological order."""
    series, tau_in, tau_out = dataset.series, dataset.tau_in, dataset.tau_out
    t_total, n, c = series.shape
    if t_total < tau_in + tau_out:
        raise ValueError(f"series length {t_total} < tau_in + tau_out = {tau_in + tau_out}")
    windows = []
    for t in range(t_total - tau_in - tau_out + 1):
        x = series[t:t + tau_in].transpose(1, 0, 2).reshape(n, tau_in * c)
        y = series[t + tau_in:t + tau_in + tau_out].transpose(1, 0, 2).reshape(n, tau_out * c)
        windows.append((x, y, dataset.timestamps[t:t + tau_in]))
    return windows


class SeriesNormalizer:
    """Invertible affine normalization; exact inverse for metric reporting."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = mean
        self.std = std

    def transform(self, series: np.ndarray) -> np.ndarray:
        return (series - self.mean) / self.std

    def inverse(self, series: np.ndarray) -> np.ndarray:
        return series * self.std + self.mean


def normalize_series(dataset: TemporalDataset, scheme: str = "per_node"):
    """Z-score the series per node (or globally); returns the normalized
    dataset and the inverse-transform handle. Zero-variance units fall back
    to identity with a warning."""
    series = dataset.series
    if scheme == "per_node":
        mean = series.mean(axis=0, keepdims=True)
        std = series.std(axis=0, keepdims=True)
    elif scheme == "global":
        mean = series.mean(keepdims=True).reshape(1, 1, 1)
        std = series.std(keepdims=True).reshape(1, 1, 1)
    else:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    degenerate = std < 1e-12
    if degenerate.any():
        logger.warning("normalize_series: %d zero-variance units left unscaled",
                       int(degenerate.sum()))
        std = np.where(degenerate, 1.0, std)
        mean = np.where(degenerate, 0.0, mean)
    normalizer = SeriesNormalizer(mean, std)
    normalized = TemporalDataset(
        graph=dataset.graph, series=normalizer.transform(series),
        timestamps=dataset.timestamps, tau_in=dataset.tau_in,
        tau_out=dataset.tau_out, name=dataset.name)
    return normalized, normalizer


# ---------------------------------------------------------------------------
# synthetic tasks

def _components(graph: Graph) -> np.ndarray:
    """Connected-component label per node (iterative BFS)."""
    labels = np.full(graph.n_nodes, -1, dtype=np.int64)
    current = 0
    for start in range(graph.n_nodes):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = current
        while stack:
            node = stack.pop()
            for nb in graph.neighbors(node):
                if labels[nb] < 0:
                    labels[nb] = current
                    stack.append(int(nb))
        current += 1
    return labels


def make_transport_task(n: int, p: float, n_sources: int, seed: int,
                        max_retries: int = 20) -> TransportTask:
    """Unit mass spread over random source nodes, to be gathered at a random
    destination; regenerates (seed+1, ...) until sources and destination
    share a component."""
    if n_sources >= n:
        raise ValueError(f"n_sources={n_sources} must be < n={n}")
    for attempt in range(max_retries):
        trial_seed = seed + attempt
        graph = erdos_renyi(n, p, trial_seed)
        rng = philox(trial_seed, 1)
        nodes = rng.permutation(n)
        sources = np.sort(nodes[:n_sources])
        destination = int(nodes[n_sources])
        comp = _components(graph)
        if len(set(comp[sources]) | {comp[destination]}) == 1:
            source_features = np.zeros((n, 1))
            source_features[sources, 0] = 1.0 / n_sources
            target_features = np.zeros((n, 1))
            target_features[destination, 0] = 1.0
            return TransportTask(graph, source_features, target_features,
                                 sources, destination)
    raise ValueError(
        f"could not generate a connected transport task in {max_retries} tries; increase p")


def make_planted_partition(n: int, n_classes: int, p_in: float, p_out: float,
                           feat_dim: int, noise: float, seed: int,
                           k_splits: int = 3,
                           ratios: tuple[float, float, float] = (0.48, 0.32, 0.20)
                           ) -> DatasetBundle:
    """Citation-like synthetic bundle: class-clustered edges and Gaussian
    class-mean features, with stratified generated splits."""
    rng = philox(seed)
    labels = rng.integers(0, n_classes, size=n)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    graph = build_graph(np.stack([iu[keep], ju[keep]], axis=1), n, symmetrize=True)
    means = rng.normal(0.0, 1.0, size=(n_classes, feat_dim))
    features = means[labels] + noise * rng.normal(0.0, 1.0, size=(n, feat_dim))
    splits = generate_splits(n, ratios, k=k_splits, seed=seed, labels=labels,
                             stratified=True)
    same_frac = float(same[keep].mean()) if keep.any() else None
    return DatasetBundle(graph=graph, features=features, labels=labels,
                         splits=splits, name=f"planted-{n}", homophily=same_frac,
                         split_source="generated")
