"""Metaset handling: ingestion, preprocessing, and episode sampling.

A metaset is a collection of task datasets; each trial is a (T, D) feature
sequence with a class label. The fixed preprocessing order is subsample ->
channel-pool -> min-max normalize, with normalization statistics computed
strictly within one split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc


class ManifestError(ValueError):
    """Raised when a manifest or feature file fails validation."""


@dataclass(frozen=True)
class Trial:
    id: str
    sequence: np.ndarray  # (T, D) float64
    label: int
    fps: float

    def __post_init__(self):
        seq = np.asarray(self.sequence, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise ValueError(f"trial {self.id!r}: sequence must be (T>=1, D), got {seq.shape}")
        object.__setattr__(self, "sequence", seq)


@dataclass
class TaskDataset:
    name: str
    classes: list[str]
    trials: list[Trial]
    role: str = "source"

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError(f"task {self.name!r}: needs at least 2 classes")
        counts = self.class_counts()
        missing = [self.classes[c] for c, n in enumerate(counts) if n == 0]
        if missing:
            raise ValueError(f"task {self.name!r}: classes without trials: {missing}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for t in self.trials:
            if not 0 <= t.label < len(self.classes):
                raise ValueError(f"task {self.name!r}: trial {t.id!r} label {t.label} out of range")
            counts[t.label] += 1
        return counts

    def min_class_size(self) -> int:
        return min(self.class_counts())

    def indices_of(self, label: int) -> list[int]:
        return [i for i, t in enumerate(self.trials) if t.label == label]


@dataclass
class Metaset:
    tasks: list[TaskDataset]

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names in metaset: {names}")

    def get(self, name: str) -> TaskDataset:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"no task named {name!r}")

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]


@dataclass(frozen=True)
class SamplerConfig:
    n_train: int
    n_val: int
    k: int
    seed: int

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1 or self.k < 1:
            raise ValueError("sampler counts must be >= 1")


@dataclass
class Episode:
    """Support/query split drawn equal-per-class from one task."""

    support: list[Trial]
    query: list[Trial]
    task: str

    def support_arrays(self):
        return [t.sequence for t in self.support], np.array([t.label for t in self.support])

    def query_arrays(self):
        return [t.sequence for t in self.query], np.array([t.label for t in self.query])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _read_feature_csv(path: Path, expected_dims: int | None) -> np.ndarray:
    rows = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read feature file ({exc})") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            row = [float(c) for c in cells]
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-numeric value ({exc})") from exc
        if expected_dims is not None and len(row) != expected_dims:
            raise ManifestError(
                f"{path}:{lineno}: expected {expected_dims} values, got {len(row)}")
        if rows and len(row) != len(rows[0]):
            raise ManifestError(
                f"{path}:{lineno}: ragged row, expected {len(rows[0])} values, got {len(row)}")
        rows.append(row)
    if not rows:
        raise ManifestError(f"{path}: feature file has no frames")
    return np.asarray(rows, dtype=np.float64)


def load_metaset(manifest_path) -> Metaset:
    """Parse a manifest JSON plus its CSV feature files into a Metaset.

    Manifest: {"tasks": [{name, classes, fps, trials: [{id, label, file}],
    role?}]}; file paths are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    task_docs = doc.get("tasks")
    if not isinstance(task_docs, list) or not task_docs:
        raise ManifestError(f"{manifest_path}: manifest needs a non-empty 'tasks' list")
    base = manifest_path.parent
    tasks = []
    for td in task_docs:
        try:
            name = td["name"]
            classes = list(td["classes"])
            fps = float(td["fps"])
            trial_docs = td["trials"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{manifest_path}: malformed task entry ({exc})") from exc
        role = td.get("role", "source")
        if role not in ("source", "validation", "test"):
            raise ManifestError(f"{manifest_path}: task {name!r} has unknown role {role!r}")
        label_index = {c: i for i, c in enumerate(classes)}
        trials = []
        dims = None
        for trd in trial_docs:
            try:
                trial_id, label, rel = trd["id"], trd["label"], trd["file"]
            except (KeyError, TypeError) as exc:
                raise ManifestError(
                    f"{manifest_path}: malformed trial entry in task {name!r} ({exc})") from exc
            if label not in label_index:
                raise ManifestError(
                    f"{manifest_path}: task {name!r} trial {trial_id!r} has unknown label "
                    f"{label!r} (classes: {classes})")
            fpath = base / rel
            if not fpath.is_file():
                raise ManifestError(f"{manifest_path}: task {name!r} trial {trial_id!r}: "
                                    f"missing feature file {fpath}")
            seq = _read_feature_csv(fpath, dims)
            dims = seq.shape[1]
            trials.append(Trial(id=trial_id, sequence=seq, label=label_index[label], fps=fps))
        try:
            tasks.append(TaskDataset(name=name, classes=classes, trials=trials, role=role))
        except ValueError as exc:
            raise ManifestError(f"{manifest_path}: {exc}") from exc
    try:
        return Metaset(tasks)
    except ValueError as exc:
        raise ManifestError(f"{manifest_path}: {exc}") from exc


def save_metaset(metaset: Metaset, out_dir) -> Path:
    """Write a metaset as manifest.json plus one CSV per trial; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task_docs = []
    for task in metaset.tasks:
        tdir = out_dir / task.name
        tdir.mkdir(exist_ok=True)
        trial_docs = []
        for trial in task.trials:
            rel = f"{task.name}/{trial.id}.csv"
            lines = [",".join(repr(float(v)) for v in row) for row in trial.sequence]
            (out_dir / rel).write_text("\n".join(lines) + "\n", encoding="utf-8")
            trial_docs.append({"id": trial.id, "label": task.classes[trial.label], "file": rel})
        task_docs.append({"name": task.name, "classes": task.classes,
                          "fps": task.trials[0].fps if task.trials else 1.0,
                          "role": task.role, "trials": trial_docs})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"tasks": task_docs}, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    return manifest


def subsample_fps(trial: Trial, target_fps: float = 1.0) -> Trial:
    """Keep frames at stride round(fps / target_fps), anchored at index 0."""
    if trial.fps < target_fps:
        raise ValueError(
            f"trial {trial.id!r}: cannot subsample {trial.fps} FPS to {target_fps} FPS")
    stride = int(round(trial.fps / target_fps))
    if stride <= 1:
        return trial
    return replace(trial, sequence=trial.sequence[::stride], fps=trial.fps / stride)


def pool_to_ssf(trial: Trial, d_prime: int) -> Trial:
    """Channel-pool a trial's frames down to d_prime dimensions."""
    pooled = dc.avg_pool_channels(dc.constant(trial.sequence), d_prime).value
    return replace(trial, sequence=pooled)


def minmax_normalize(trials: list[Trial]) -> list[Trial]:
    """Min-max scale each feature dimension over all frames of one split.

    Constant dimensions map to 0. Statistics never leave the split: callers
    normalize each split with a separate call.
    """
    if not trials:
        raise ValueError("cannot normalize an empty split")
    stacked = np.vstack([t.sequence for t in trials])
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = []
    for t in trials:
        scaled = (t.sequence - lo) / safe
        scaled[:, span == 0] = 0.0
        out.append(replace(t, sequence=scaled))
    return out


def sample_episode(task: TaskDataset, n_per_class: int, ratio: float = 0.5,
                   seed=0) -> Episode:
    """Draw exactly n trials per class without replacement and split them.

    Support receives ceil(n * ratio) of each class (the extra one on odd
    counts); the rest become the query set.
    """
    if n_per_class < 2:
        raise ValueError(f"need n_per_class >= 2 to split into support and query, got {n_per_class}")
    rng = _rng(seed)
    n_support = int(np.ceil(n_per_class * ratio))
    if n_support >= n_per_class:
        n_support = n_per_class - 1 if ratio < 1.0 else n_support
    if n_support < 1 or n_per_class - n_support < 1:
        raise ValueError(f"split ratio {ratio} leaves an empty support or query set")
    support, query = [], []
    for label in range(task.n_classes):
        idx = task.indices_of(label)
        if len(idx) < n_per_class:
            raise ValueError(
                f"task {task.name!r}: class {task.classes[label]!r} has {len(idx)} trials, "
                f"needs {n_per_class}")
        chosen = rng.permutation(len(idx))[:n_per_class]
        picked = [task.trials[idx[i]] for i in chosen]
        support.extend(picked[:n_support])
        query.extend(picked[n_support:])
    return Episode(support=support, query=query, task=task.name)


def pad_batch(sequences: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad variable-length sequences to this batch's max length.

    Returns the (B, T_max, D) batch and a (B, T_max) boolean mask that is
    true on original timesteps only.
    """
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    dims = {s.shape[1] for s in sequences}
    if len(dims) != 1:
        raise ValueError(f"mixed feature widths in one batch: {sorted(dims)}")
    d = dims.pop()
    t_max = max(s.shape[0] for s in sequences)
    batch = np.zeros((len(sequences), t_max, d))
    mask = np.zeros((len(sequences), t_max), dtype=bool)
    for i, s in enumerate(sequences):
        batch[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = True
    return batch, mask


def _rotation(rng: np.random.Generator, d: int, angle: float) -> np.ndarray:
    """Orthogonal rotation exp(angle * S) for a unit-normalized random skew S."""
    a = rng.normal(size=(d, d))
    skew = a - a.T
    norms = np.linalg.eigvalsh(skew @ skew.T)
    skew /= np.sqrt(max(norms.max(), 1e-12))
    vals, vecs = np.linalg.eigh(1j * skew)  # Hermitian, so exp is exact
    return np.real(vecs @ np.diag(np.exp(-1j * angle * vals)) @ vecs.conj().T)


class _ProfileBank:
    """Smooth per-class channel profiles with a calibrated separation margin."""

    N_MODES = 3

    def __init__(self, rng: np.random.Generator, n_classes: int, d: int, separation: float):
        self.offsets = rng.normal(0.0, 1.0, size=(n_classes, d))
        modes = np.arange(1, self.N_MODES + 1)
        self.amps = rng.normal(0.0, 1.0, size=(n_classes, d, self.N_MODES)) / modes
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_classes, d, self.N_MODES))
        grid = np.linspace(0.0, 1.0, 257)
        raw = np.stack([self._raw(c, grid) for c in range(n_classes)])
        center = raw.mean(axis=0)
        deltas = raw - center
        d_min = np.inf
        for a in range(n_classes):
            for b in range(a + 1, n_classes):
                gap = np.sqrt(np.mean(np.sum((deltas[a] - deltas[b]) ** 2, axis=1)))
                d_min = min(d_min, gap)
        self.scale = separation / d_min if d_min > 0 else 0.0

    def _raw(self, c: int, u: np.ndarray) -> np.ndarray:
        modes = np.arange(1, self.N_MODES + 1)
        waves = self.amps[c] * np.sin(2.0 * np.pi * modes * u[:, None, None] + self.phases[c])
        return self.offsets[c] + waves.sum(axis=-1)

    def mean_sequence(self, c: int, u: np.ndarray) -> np.ndarray:
        raw = np.stack([self._raw(ci, u) for ci in range(self.offsets.shape[0])])
        center = raw.mean(axis=0)
        return center + self.scale * (raw[c] - center)


def synth_metaset(n_tasks: int, n_classes: int, d: int, length_range=(20, 60),
                  separation: float = 2.0, seed: int = 0, trials_per_class: int = 12,
                  noise: float = 0.5, trial_jitter: float = 0.15,
                  task_rotation: float = 0.5) -> Metaset:
    """Generate a family of related synthetic tasks for desk-scale checks.

    All tasks share class-conditional mean sequences whose minimum pairwise
    RMS distance equals ``separation``; each task observes them through its
    own random rotation of feature space (angle ``task_rotation`` radians),
    so adapting to a held-out task is non-trivial. Trials add a per-trial
    amplitude jitter and white noise, and draw their lengths from
    ``length_range`` (inclusive).
    """
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    lo, hi = int(length_range[0]), int(length_range[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    bank = _ProfileBank(rng, n_classes, d, separation)
    classes = [f"class{c}" for c in range(n_classes)]
    tasks = []
    for ti in range(n_tasks):
        rot = _rotation(rng, d, task_rotation)
        trials = []
        for c in range(n_classes):
            for i in range(trials_per_class):
                t_len = int(rng.integers(lo, hi + 1))
                u = np.linspace(0.0, 1.0, t_len)
                base = bank.mean_sequence(c, u)
                amp = 1.0 + trial_jitter * rng.normal()
                seq = (amp * base) @ rot.T + noise * rng.normal(size=(t_len, d))
                trials.append(Trial(id=f"t{ti}_c{c}_{i:03d}", sequence=seq, label=c, fps=1.0))
        tasks.append(TaskDataset(name=f"family{ti}", classes=list(classes), trials=trials))
    return Metaset(tasks)
