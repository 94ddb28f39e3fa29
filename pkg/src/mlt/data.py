"""Synthetic patch-grid sequences, dataset files, label-universe merging,
and mixup.

Each label owns a set of trigger patches and a pattern vector; the label is
active on a frame exactly when its pattern is added to its trigger patches,
on top of Gaussian background noise. Activations come in contiguous runs
whose lengths respect the configured segment bounds, with off-runs sized to
track the per-label target positive rate. Solving the task therefore
requires locating label-specific patches, which is what the cross-attention
decoder is for.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor_io


class DataError(ValueError):
    """Invalid synthetic spec, manifest, or merge input."""


@dataclass
class SyntheticSpec:
    """Generator settings. triggers/patterns may be given explicitly; when
    omitted they are derived from the seed (disjoint contiguous patch blocks
    and unit-norm pattern vectors scaled by ``amplitude``)."""

    n_x: int = 64
    patch_dim: int = 16
    L: int = 12
    grid_side: int = 8
    num_sequences: int = 40
    sequence_length: int = 200
    min_segment: int = 6
    max_segment: int = 16
    positive_rates: Optional[list] = None   # default: ramp over labels
    noise_std: float = 0.25
    amplitude: float = 1.0
    patches_per_label: int = 3
    flip_prob: float = 0.0
    triggers: Optional[list] = None          # per label: list of patch indices
    patterns: Optional[list] = None          # per label: [patch_dim] vector
    seed: int = 0
    task_seed: Optional[int] = None          # None: reuse seed; share this
                                             # across splits of one task

    def validate(self) -> "SyntheticSpec":
        if self.grid_side * self.grid_side != self.n_x:
            raise DataError(f"n_x={self.n_x} is not grid_side^2="
                            f"{self.grid_side * self.grid_side}")
        for name in ("patch_dim", "L", "num_sequences", "sequence_length",
                     "patches_per_label"):
            if getattr(self, name) <= 0:
                raise DataError(f"SyntheticSpec.{name} must be positive")
        if not 1 <= self.min_segment <= self.max_segment:
            raise DataError(f"segment bounds [{self.min_segment}, "
                            f"{self.max_segment}] invalid")
        if self.max_segment > self.sequence_length:
            raise DataError("max_segment exceeds sequence_length")
        if not 0.0 <= self.flip_prob < 1.0:
            raise DataError(f"flip_prob={self.flip_prob} must be in [0, 1)")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        rates = self.resolved_rates()
        if ((rates <= 0) | (rates >= 1)).any():
            raise DataError(f"positive rates must be in (0, 1), got {rates}")
        if self.triggers is not None:
            if len(self.triggers) != self.L:
                raise DataError(f"{len(self.triggers)} trigger sets for "
                                f"{self.L} labels")
            for t, patches in enumerate(self.triggers):
                if len(patches) == 0:
                    raise DataError(f"label {t}: empty trigger set")
                if any(not 0 <= p < self.n_x for p in patches):
                    raise DataError(f"label {t}: trigger patch out of grid")
        elif self.patches_per_label * self.L > self.n_x:
            raise DataError(f"{self.L} labels x {self.patches_per_label} "
                            f"patches do not fit in {self.n_x}")
        if self.patterns is not None and len(self.patterns) != self.L:
            raise DataError(f"{len(self.patterns)} patterns for {self.L} labels")
        return self

    def resolved_rates(self) -> np.ndarray:
        if self.positive_rates is None:
            # rare-event ramp: a trivial all-positive predictor stays weak
            return np.linspace(0.02, 0.12, self.L)
        rates = np.asarray(self.positive_rates, dtype=np.float64)
        if rates.ndim == 0:
            rates = np.full(self.L, float(rates))
        if rates.shape != (self.L,):
            raise DataError(f"positive_rates shape {rates.shape}, "
                            f"expected ({self.L},)")
        return rates

    def resolved_triggers(self) -> list[np.ndarray]:
        if self.triggers is not None:
            return [np.asarray(t, dtype=np.int64) for t in self.triggers]
        ppl = self.patches_per_label
        return [np.arange(t * ppl, (t + 1) * ppl) for t in range(self.L)]

    def resolved_patterns(self, rng: np.random.Generator) -> np.ndarray:
        if self.patterns is not None:
            return np.asarray(self.patterns, dtype=np.float64)
        raw = rng.standard_normal((self.L, self.patch_dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return raw * self.amplitude

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"SyntheticSpec: unknown keys {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Dataset:
    """In-memory dataset: patch features X [N, n_x, patch_dim], binary
    targets y [N, L], annotation mask [N, L], and the manifest dict."""

    X: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    manifest: dict

    @property
    def num_samples(self) -> int:
        return self.X.shape[0]

    @property
    def labels(self) -> list[str]:
        return list(self.manifest["labels"])

    @property
    def sequences(self) -> list[dict]:
        return list(self.manifest["sequences"])

    @property
    def positive_rates(self) -> np.ndarray:
        return np.asarray(self.manifest["positive_rates"], dtype=np.float64)

    @classmethod
    def from_arrays(cls, X, y, labels: Sequence[str], mask=None,
                    ids: Optional[Sequence[str]] = None) -> "Dataset":
        """Wrap plain arrays; each sample becomes a length-1 sequence unless
        explicit sequence ids are supplied (one per sample)."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = X.shape[0]
        if mask is None:
            mask = np.ones_like(y)
        mask = np.asarray(mask, dtype=np.float64)
        if ids is None:
            ids = [f"sample{i:06d}" for i in range(n)]
        seqs = [{"id": str(i), "start": k, "length": 1}
                for k, i in enumerate(ids)]
        manifest = {
            "version": 1,
            "num_samples": n,
            "sequences": seqs,
            "labels": list(labels),
            "positive_rates": _bounded_rates(y, mask).tolist(),
            "tensors": {"X": "X.mlt", "y": "y.mlt", "mask": "mask.mlt"},
        }
        return cls(X=X, y=y, mask=mask, manifest=manifest)


def _bounded_rates(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Empirical positive rate per label over annotated entries, kept
    strictly inside (0, 1) so frequency weighting stays defined."""
    counts = np.maximum(mask.sum(axis=0), 1.0)
    rates = (y * mask).sum(axis=0) / counts
    floor = 1.0 / (2.0 * max(y.shape[0], 1))
    return np.clip(rates, floor, 1.0 - floor)


def _activation_trace(length: int, rate: float, min_seg: int, max_seg: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Alternating off/on runs; on-runs are uniform in [min_seg, max_seg]
    and never truncated, off-runs track the target rate cycle by cycle."""
    trace = np.zeros(length)
    mean_on = 0.5 * (min_seg + max_seg)
    mean_off = max(1.0, mean_on * (1.0 - rate) / rate)
    t = int(rng.integers(0, int(mean_off) + 1))
    while t < length:
        on = int(rng.integers(min_seg, max_seg + 1))
        if t + on > length:
            break
        trace[t:t + on] = 1.0
        off = max(1, int(round(on * (1.0 - rate) / rate + rng.normal(0.0, 1.0))))
        t += on + off
    return trace


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    """Deterministic given the spec (seed and task_seed included)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    task_seed = spec.task_seed if spec.task_seed is not None else spec.seed
    task_rng = np.random.default_rng(task_seed)
    rates = spec.resolved_rates()
    triggers = spec.resolved_triggers()
    patterns = spec.resolved_patterns(task_rng)
    n = spec.num_sequences * spec.sequence_length

    y = np.zeros((n, spec.L))
    sequences = []
    for s in range(spec.num_sequences):
        start = s * spec.sequence_length
        sequences.append({"id": f"seq{s:04d}", "start": start,
                          "length": spec.sequence_length})
        for t in range(spec.L):
            trace = _activation_trace(spec.sequence_length, rates[t],
                                      spec.min_segment, spec.max_segment, rng)
            if spec.flip_prob > 0.0:
                flips = rng.random(spec.sequence_length) < spec.flip_prob
                trace = np.abs(trace - flips)
            y[start:start + spec.sequence_length, t] = trace

    if spec.noise_std > 0.0:
        X = rng.normal(0.0, spec.noise_std, (n, spec.n_x, spec.patch_dim))
    else:
        X = np.zeros((n, spec.n_x, spec.patch_dim))
    for t in range(spec.L):
        frames = np.nonzero(y[:, t])[0]
        if frames.size:
            X[np.ix_(frames, triggers[t])] += patterns[t]

    manifest = {
        "version": 1,
        "num_samples": n,
        "sequences": sequences,
        "labels": [f"label_{t:02d}" for t in range(spec.L)],
        "positive_rates": _bounded_rates(y, np.ones_like(y)).tolist(),
        "tensors": {"X": "X.mlt", "y": "y.mlt", "mask": "mask.mlt"},
    }
    return Dataset(X=X, y=y, mask=np.ones_like(y), manifest=manifest)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json plus one binary tensor file per array
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = {"version", "num_samples", "sequences", "labels",
                   "positive_rates", "tensors"}


def validate_manifest(manifest: dict) -> dict:
    missing = MANIFEST_FIELDS - set(manifest)
    if missing:
        raise DataError(f"manifest missing fields {sorted(missing)}")
    n = manifest["num_samples"]
    covered = sum(s["length"] for s in manifest["sequences"])
    if covered != n:
        raise DataError(f"sequences cover {covered} frames, "
                        f"manifest says {n}")
    starts = [s["start"] for s in manifest["sequences"]]
    if starts != sorted(starts):
        raise DataError("sequence starts are not ordered")
    rates = np.asarray(manifest["positive_rates"], dtype=np.float64)
    if len(rates) != len(manifest["labels"]):
        raise DataError("positive_rates and labels disagree on label count")
    if ((rates <= 0) | (rates >= 1)).any():
        raise DataError("manifest positive_rates must be in (0, 1)")
    return manifest


def save_dataset(ds: Dataset, directory: str) -> None:
    """Stage everything in a temp directory, then move into place, so a
    failed save never leaves a half-written dataset behind."""
    validate_manifest(ds.manifest)
    directory = os.path.abspath(directory)
    parent = os.path.dirname(directory)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=".dataset-")
    try:
        names = []
        for key, arr in (("X", ds.X), ("y", ds.y), ("mask", ds.mask)):
            name = ds.manifest["tensors"][key]
            with open(os.path.join(staging, name), "wb") as fh:
                tensor_io.write_tensor(fh, arr)
            names.append(name)
        with open(os.path.join(staging, "manifest.json"), "w") as fh:
            json.dump(ds.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        names.append("manifest.json")
        if os.path.isdir(directory):
            for name in names:
                os.replace(os.path.join(staging, name),
                           os.path.join(directory, name))
            os.rmdir(staging)
        else:
            os.rename(staging, directory)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def load_dataset(directory: str) -> Dataset:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = validate_manifest(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest at {path}: {exc}")
    arrays = {}
    for key in ("X", "y", "mask"):
        arrays[key] = tensor_io.load_tensor(
            os.path.join(directory, manifest["tensors"][key]))
    n = manifest["num_samples"]
    for key, arr in arrays.items():
        if arr.shape[0] != n:
            raise DataError(f"{key} has {arr.shape[0]} samples, "
                            f"manifest says {n}")
    if arrays["y"].shape != arrays["mask"].shape:
        raise DataError(f"y {arrays['y'].shape} and mask "
                        f"{arrays['mask'].shape} disagree")
    return Dataset(X=arrays["X"], y=arrays["y"], mask=arrays["mask"],
                   manifest=manifest)


# ---------------------------------------------------------------------------
# heterogeneous annotation unions
# ---------------------------------------------------------------------------


def merge_label_universes(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate datasets whose label sets may differ; the label axis
    becomes the first-seen-ordered union, and the mask marks exactly the
    entries each source annotates. Unannotated targets are stored as zero.
    """
    if not datasets:
        raise DataError("merge: no datasets given")
    union: list[str] = []
    for ds in datasets:
        for name in ds.labels:
            if name not in union:
                union.append(name)
    patch_shape = datasets[0].X.shape[1:]
    seen_ids: set[str] = set()
    xs, ys, masks, sequences = [], [], [], []
    offset = 0
    for ds in datasets:
        if ds.X.shape[1:] != patch_shape:
            raise DataError(f"merge: patch shape {ds.X.shape[1:]} differs "
                            f"from {patch_shape}")
        col = {name: union.index(name) for name in ds.labels}
        n = ds.num_samples
        y = np.zeros((n, len(union)))
        mask = np.zeros((n, len(union)))
        for j, name in enumerate(ds.labels):
            y[:, col[name]] = ds.y[:, j]
            mask[:, col[name]] = ds.mask[:, j]
        xs.append(ds.X)
        ys.append(y)
        masks.append(mask)
        for seq in ds.sequences:
            if seq["id"] in seen_ids:
                raise DataError(f"merge: duplicate sequence id {seq['id']!r}")
            seen_ids.add(seq["id"])
            sequences.append({"id": seq["id"],
                              "start": seq["start"] + offset,
                              "length": seq["length"]})
        offset += n
    X = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    mask = np.concatenate(masks, axis=0)
    manifest = {
        "version": 1,
        "num_samples": offset,
        "sequences": sequences,
        "labels": union,
        "positive_rates": _bounded_rates(y, mask).tolist(),
        "tensors": {"X": "X.mlt", "y": "y.mlt", "mask": "mask.mlt"},
    }
    return Dataset(X=X, y=y, mask=mask, manifest=manifest)


def project_to_labels(ds: Dataset, labels: Sequence[str]) -> Dataset:
    """Restrict a dataset to a label subset (columns reordered to match)."""
    cols = []
    for name in labels:
        if name not in ds.labels:
            raise DataError(f"label {name!r} not present")
        cols.append(ds.labels.index(name))
    manifest = dict(ds.manifest)
    manifest["labels"] = list(labels)
    manifest["positive_rates"] = _bounded_rates(
        ds.y[:, cols], ds.mask[:, cols]).tolist()
    return Dataset(X=ds.X, y=ds.y[:, cols], mask=ds.mask[:, cols],
                   manifest=manifest)


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def mixup(batch_a: tuple, batch_b: tuple, lam: float) -> tuple:
    """Convex combination of two (X, y, mask) batches; an entry is
    annotated in the mix only when both sources annotate it."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    xa, ya, ma = batch_a
    xb, yb, mb = batch_b
    if xa.shape != xb.shape or ya.shape != yb.shape or ma.shape != mb.shape:
        raise DataError(f"mixup: batch shapes differ, "
                        f"{xa.shape}/{ya.shape} vs {xb.shape}/{yb.shape}")
    x = lam * xa + (1.0 - lam) * xb
    y = lam * ya + (1.0 - lam) * yb
    mask = ma * mb
    return x, y, mask


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        return 1.0
    return float(rng.beta(alpha, alpha))


def iterate_batches(ds: Dataset, batch_size: int,
                    rng: Optional[np.random.Generator] = None,
                    drop_last: bool = False) -> Iterator[tuple]:
    """Yield (X, y, mask) batches; shuffled when a generator is given,
    deterministic order otherwise."""
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = ds.num_samples
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        yield ds.X[idx], ds.y[idx], ds.mask[idx]
