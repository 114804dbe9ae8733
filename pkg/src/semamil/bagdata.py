"""Bag data model, embedding file format, synthetic generator, Monte Carlo splits.

A bag is one instance sequence: L embedding rows of width D plus one grid
coordinate pair per row and a single bag-level class label. Embeddings are
held as float32 so the on-disk format round-trips bit-exactly.

On-disk embedding format (little-endian):

    magic   4 bytes  b"SEMB"
    version u32      1
    L       u32
    D       u32
    X       L*D float32, row-major
    coords  L pairs of (row u32, col u32)

The bag id and label are not part of the payload; they travel in the
dataset manifest, a JSON file with keys
``{"name", "n_classes", "bags": [{"bag_id", "path", "label"}]}`` where each
path is relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SEMB"
FORMAT_VERSION = 1


class BagFormatError(ValueError):
    """Raised on malformed embedding files; `code` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class Bag:
    bag_id: str
    label: int
    coords: np.ndarray  # (L, 2) int64 grid indices
    X: np.ndarray       # (L, D) float32 embeddings

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        L = self.X.shape[0]
        if L < 1:
            raise ValueError("bag must contain at least one patch")
        if self.coords.shape != (L, 2):
            raise ValueError(f"coords shape {self.coords.shape} != ({L}, 2)")
        if len({(int(r), int(c)) for r, c in self.coords}) != L:
            raise ValueError("coordinate pairs must be distinct")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("embeddings contain non-finite values")

    @property
    def L(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.bag_id == other.bag_id
            and self.label == other.label
            and self.X.tobytes() == other.X.tobytes()
            and np.array_equal(self.coords, other.coords)
        )


@dataclass
class Dataset:
    name: str
    n_classes: int
    bags: list[Bag]

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        labels = {b.label for b in self.bags}
        if any(l < 0 or l >= self.n_classes for l in labels):
            raise ValueError("bag label out of range")
        if self.bags and labels != set(range(self.n_classes)):
            raise ValueError("every class must appear at least once")

    def by_id(self, bag_id: str) -> Bag:
        for b in self.bags:
            if b.bag_id == bag_id:
                return b
        raise KeyError(bag_id)


@dataclass
class SplitPlan:
    fold_seeds: list[int]
    ratios: tuple[float, float, float]
    folds: list[tuple[list[str], list[str], list[str]]]  # (train, val, test) ids


@dataclass
class SynthConfig:
    n_bags: int = 400
    n_classes: int = 2
    L_min: int = 64
    L_max: int = 128
    D: int = 32
    n_clusters_true: int = 40
    signal_cluster_fraction: float = 0.10
    noise_sigma: float = 0.8
    grid_side: int = 12
    seed: int = 7

    def __post_init__(self):
        for name in ("n_bags", "n_classes", "L_min", "L_max", "D",
                     "n_clusters_true", "grid_side"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 < self.signal_cluster_fraction < 1.0:
            raise ValueError("signal_cluster_fraction must lie in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.L_min > self.L_max:
            raise ValueError("L_min must not exceed L_max")
        if self.L_max > self.grid_side ** 2:
            raise ValueError("L_max exceeds grid capacity grid_side^2")
        if self.n_clusters_true < self.n_classes:
            raise ValueError("n_clusters_true must be >= n_classes")


def _bag_seed(dataset_seed: int, bag_id: str) -> int:
    """Stable per-bag seed: dataset seed XOR a string hash of the bag id."""
    digest = hashlib.sha256(bag_id.encode("utf-8")).digest()
    h = int.from_bytes(digest[:8], "little")
    return (dataset_seed ^ h) & 0x7FFFFFFFFFFFFFFF


def _draw_centers(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Cluster centers with pairwise separation >= 4 * noise_sigma."""
    scale = max(1.0, cfg.noise_sigma)
    min_dist = 4.0 * cfg.noise_sigma
    centers = np.empty((cfg.n_clusters_true, cfg.D))
    for k in range(cfg.n_clusters_true):
        for attempt in range(1000):
            cand = rng.normal(0.0, scale, size=cfg.D)
            if k == 0 or np.linalg.norm(centers[:k] - cand, axis=1).min() >= min_dist:
                centers[k] = cand
                break
        else:
            raise ValueError("cluster centers inseparable")
    return centers


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Build a dataset of bags with one planted signal cluster per class.

    Clusters 0..n_classes-1 are the per-class signal clusters; the rest act
    as shared background. Each bag devotes round(signal_cluster_fraction*L)
    patches to its class's signal cluster; remaining patches draw from the
    background clusters with per-bag Dirichlet mixture weights, so bag means
    vary a lot while individual signal patches stay cleanly identifiable.
    Signal patches are scattered uniformly over the grid (without
    replacement), so semantically similar patches are spatially dispersed.

    Deterministic: the dataset seed fixes the centers; each bag's patches
    depend only on (seed XOR hash(bag_id)), so generation order never
    matters.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = _draw_centers(rng, cfg)
    background = list(range(cfg.n_classes, cfg.n_clusters_true))

    bags = []
    for b in range(cfg.n_bags):
        bag_id = f"synth-{b:04d}"
        brng = np.random.default_rng(_bag_seed(cfg.seed, bag_id))
        label = b % cfg.n_classes  # balanced classes
        L = int(brng.integers(cfg.L_min, cfg.L_max + 1))
        n_signal = int(round(cfg.signal_cluster_fraction * L))
        n_signal = min(max(n_signal, 1), L)

        assignment = np.empty(L, dtype=np.int64)
        assignment[:n_signal] = label
        if background:
            weights = brng.dirichlet(np.full(len(background), 0.5))
            assignment[n_signal:] = brng.choice(background, size=L - n_signal, p=weights)
        else:
            others = [k for k in range(cfg.n_clusters_true) if k != label]
            if others:
                assignment[n_signal:] = brng.choice(others, size=L - n_signal)
            else:
                assignment[n_signal:] = label

        X = centers[assignment]
        if cfg.noise_sigma > 0:
            X = X + brng.normal(0.0, cfg.noise_sigma, size=(L, cfg.D))

        # scatter patches over grid cells; signal rows land anywhere
        cells = brng.choice(cfg.grid_side ** 2, size=L, replace=False)
        coords = np.stack([cells // cfg.grid_side, cells % cfg.grid_side], axis=1)

        bags.append(Bag(bag_id=bag_id, label=label, coords=coords,
                        X=X.astype(np.float32)))
    return Dataset(name=f"synth-seed{cfg.seed}", n_classes=cfg.n_classes, bags=bags)


def save_bag(bag: Bag, path) -> None:
    if not np.all(np.isfinite(bag.X)):
        raise BagFormatError("non_finite", "refusing to save non-finite embeddings")
    L, D = bag.X.shape
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<III", FORMAT_VERSION, L, D)
    payload += bag.X.astype("<f4").tobytes(order="C")
    payload += bag.coords.astype("<u4").tobytes(order="C")
    Path(path).write_bytes(bytes(payload))


def load_bag(path, *, bag_id: str | None = None, label: int = 0) -> Bag:
    """Read one SEMB file. Identity fields come from the manifest, so the
    caller supplies them; bag_id defaults to the file stem."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise BagFormatError("truncated", f"{path}: header shorter than 16 bytes")
    if raw[:4] != MAGIC:
        raise BagFormatError("bad_magic", f"{path}: bad magic {raw[:4]!r}")
    version, L, D = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise BagFormatError("bad_version",
                             f"{path}: version {version}, expected {FORMAT_VERSION}")
    expect = 16 + L * D * 4 + L * 8
    if len(raw) != expect:
        raise BagFormatError("truncated",
                             f"{path}: {len(raw)} bytes, expected {expect}")
    X = np.frombuffer(raw, dtype="<f4", count=L * D, offset=16).reshape(L, D)
    coords = np.frombuffer(raw, dtype="<u4", count=L * 2,
                           offset=16 + L * D * 4).reshape(L, 2).astype(np.int64)
    if not np.all(np.isfinite(X)):
        raise BagFormatError("non_finite", f"{path}: embeddings contain non-finite values")
    if bag_id is None:
        bag_id = Path(path).stem
    return Bag(bag_id=bag_id, label=label, coords=coords, X=X.copy())


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write one SEMB file per bag plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in dataset.bags:
        rel = f"{bag.bag_id}.semb"
        save_bag(bag, out / rel)
        entries.append({"bag_id": bag.bag_id, "path": rel, "label": bag.label})
    manifest = {"name": dataset.name, "n_classes": dataset.n_classes, "bags": entries}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def load_dataset(manifest_path) -> Dataset:
    mpath = Path(manifest_path)
    if not mpath.exists():
        raise FileNotFoundError(f"manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    bags = [
        load_bag(mpath.parent / e["path"], bag_id=e["bag_id"], label=int(e["label"]))
        for e in manifest["bags"]
    ]
    return Dataset(name=manifest["name"], n_classes=int(manifest["n_classes"]), bags=bags)


TRAIN_RATIO, VAL_RATIO, TEST_RATIO = 0.765, 0.135, 0.10


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) counts: round train and test, remainder to val."""
    n_train = round(TRAIN_RATIO * n)
    n_test = round(TEST_RATIO * n)
    n_val = n - n_train - n_test
    if n_test < 1 or n_val < 0 or n_train < 1:
        raise ValueError(f"dataset of {n} bags is too small to split")
    return n_train, n_val, n_test


def split_monte_carlo(dataset: Dataset, n_folds: int = 10, seed: int = 0) -> SplitPlan:
    """Independent random resplits (folds may overlap in test ids)."""
    ids = [b.bag_id for b in dataset.bags]
    n = len(ids)
    if n < 10:
        raise ValueError("need at least 10 bags for Monte Carlo splitting")
    n_train, n_val, n_test = split_sizes(n)
    fold_seeds = [seed + i for i in range(n_folds)]
    folds = []
    for fs in fold_seeds:
        order = np.random.default_rng(fs).permutation(n)
        shuffled = [ids[i] for i in order]
        folds.append((
            shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:],
        ))
    return SplitPlan(fold_seeds=fold_seeds,
                     ratios=(TRAIN_RATIO, VAL_RATIO, TEST_RATIO),
                     folds=folds)
