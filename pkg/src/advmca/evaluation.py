"""Dataset manifests, partitioning, figures of merit and significance."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from pathlib import Path

import numpy as np
from scipy.special import gammaln, logsumexp

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed manifests, infeasible partitions, mismatched inputs."""


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    artist: str


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for e in self.entries:
            if not e.label or not e.artist:
                raise DataError(f"{e.path}: label and artist must be non-empty")
            if e.path in seen:
                raise DataError(f"duplicate path {e.path}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        """Label set in lexicographic order; position is the class index."""
        return sorted({e.label for e in self.entries})

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def by_label(self):
        groups = defaultdict(list)
        for e in self.entries:
            groups[e.label].append(e)
        return dict(sorted(groups.items()))

    def subset(self, entries) -> "DatasetManifest":
        return DatasetManifest(list(entries), self.root)

    def exclude(self, paths) -> "DatasetManifest":
        """Drop entries whose path is listed (e.g. known faulty recordings)."""
        drop = set(paths)
        return self.subset(e for e in self.entries if e.path not in drop)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["path", "label", "artist"]:
        raise DataError(f"{path}: header must be 'path,label,artist'")
    entries = [ManifestEntry(r["path"], r["label"], r["artist"]) for r in reader]
    return DatasetManifest(entries, path.parent)


def manifest_text(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "artist"])
    for e in manifest.entries:
        w.writerow([e.path, e.label, e.artist])
    return buf.getvalue()


# -- partitions --------------------------------------------------------------

@dataclass
class Partition:
    train: list
    valid: list
    test: list
    mode: str
    seed: int
    # per class: achieved item fractions minus target fractions
    ratio_deviation: dict = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def partition_random(manifest: DatasetManifest, counts, seed: int) -> Partition:
    """Stratified random split.

    ``counts`` is ``(n_train, n_valid, n_test)`` applied to every class, or a
    mapping from label to such a triple.
    """
    rng = np.random.default_rng(seed)
    out = {s: [] for s in SPLITS}
    for label, items in manifest.by_label().items():
        triple = counts[label] if isinstance(counts, dict) else counts
        if len(triple) != 3 or min(triple) < 0:
            raise DataError(f"invalid split counts {triple!r}")
        if sum(triple) > len(items):
            raise DataError(
                f"class {label!r} has {len(items)} items, cannot draw {sum(triple)}")
        order = rng.permutation(len(items))
        start = 0
        for split, n in zip(SPLITS, triple):
            out[split].extend(items[i] for i in sorted(order[start:start + n]))
            start += n
    return Partition(out["train"], out["valid"], out["test"], "random", seed)


def counts_from_ratios(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2)):
    """Per-class split counts closest to ``ratios`` (train takes the rounding slack)."""
    counts = {}
    for label, items in manifest.by_label().items():
        n = len(items)
        nv = int(round(ratios[1] * n))
        nt = int(round(ratios[2] * n))
        counts[label] = (n - nv - nt, nv, nt)
    return counts


def partition_artist_filtered(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2),
                              seed: int = 0) -> Partition:
    """Assign whole artists to splits so no artist appears in two splits.

    Within each class artists are taken largest first (seeded shuffle among
    equal sizes) and each goes to the split furthest below its item target.
    When the artists left are only just enough to fill the empty splits,
    they are forced into those.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    ratios = ratios / ratios.sum()
    rng = np.random.default_rng(seed)
    out = {s: [] for s in SPLITS}
    deviation = {}
    for label, items in manifest.by_label().items():
        groups = defaultdict(list)
        for e in items:
            groups[e.artist].append(e)
        if len(groups) < 3:
            raise DataError(
                f"class {label!r} has {len(groups)} artist(s); need 3 for disjoint splits")
        shuffle_key = dict(zip(sorted(groups), rng.permutation(len(groups))))
        artists = sorted(groups, key=lambda a: (-len(groups[a]), shuffle_key[a]))
        target = ratios * len(items)
        filled = np.zeros(3)
        used = [0, 0, 0]
        for i, artist in enumerate(artists):
            remaining = len(artists) - i
            empty = [s for s in range(3) if used[s] == 0]
            candidates = empty if remaining <= len(empty) else range(3)
            split = max(candidates, key=lambda s: (target[s] - filled[s], -s))
            filled[split] += len(groups[artist])
            used[split] += 1
            out[SPLITS[split]].extend(groups[artist])
        deviation[label] = tuple(filled / len(items) - ratios)
    return Partition(out["train"], out["valid"], out["test"], "artist_filtered", seed,
                     deviation)


def partition_text(entries) -> str:
    return manifest_text(DatasetManifest(list(entries)))


# -- figure of merit ---------------------------------------------------------

@dataclass
class FoM:
    labels: list
    confusion: np.ndarray  # rows: predicted class, columns: true class
    recall: np.ndarray
    precision: np.ndarray
    fscore: np.ndarray
    mean_recall: float

    @property
    def column_normalised(self) -> np.ndarray:
        sums = self.confusion.sum(axis=0, keepdims=True)
        return np.divide(self.confusion, sums, out=np.zeros(self.confusion.shape),
                         where=sums > 0)


def compute_fom(truths, predictions, n_classes=None, label_names=None) -> FoM:
    """Confusion matrix and per-class metrics.

    Labels are class indices, or strings mapped through ``label_names``
    (default: sorted union of the observed labels).  Mean recall averages
    only over classes present in ``truths``.
    """
    truths, predictions = list(truths), list(predictions)
    if len(truths) != len(predictions):
        raise DataError(f"{len(truths)} truths but {len(predictions)} predictions")
    if not truths:
        raise DataError("no predictions to score")
    if isinstance(truths[0], str) or (truths and isinstance(predictions[0], str)):
        names = list(label_names) if label_names is not None else sorted(set(truths) | set(predictions))
        lookup = {n: i for i, n in enumerate(names)}
        try:
            truths = [lookup[t] for t in truths]
            predictions = [lookup[p] for p in predictions]
        except KeyError as exc:
            raise DataError(f"unknown label {exc.args[0]!r}") from exc
    else:
        k = n_classes or (len(label_names) if label_names is not None
                          else 1 + max(max(truths), max(predictions)))
        names = list(label_names) if label_names is not None else [str(i) for i in range(k)]
    K = len(names)
    t = np.asarray(truths, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if t.min() < 0 or p.min() < 0 or t.max() >= K or p.max() >= K:
        raise DataError(f"labels must lie in [0, {K})")
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (p, t), 1)
    diag = np.diag(confusion).astype(float)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    recall = np.divide(diag, col, out=np.zeros(K), where=col > 0)
    precision = np.divide(diag, row, out=np.zeros(K), where=row > 0)
    denom = recall + precision
    fscore = np.divide(2 * recall * precision, denom, out=np.zeros(K), where=denom > 0)
    mean_recall = float(recall[col > 0].mean())
    return FoM(names, confusion, recall, precision, fscore, mean_recall)


def fom_report(fom: FoM) -> str:
    """Comma-separated FoM table scaled by 100.

    Columns are true classes, rows predicted classes, the last column is
    precision, the last row F-score, and the bottom-right cell mean recall.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predicted\\true", *fom.labels, "precision"])
    norm = fom.column_normalised
    for k, name in enumerate(fom.labels):
        w.writerow([name, *(f"{100 * v:.2f}" for v in norm[k]), f"{100 * fom.precision[k]:.2f}"])
    w.writerow(["fscore", *(f"{100 * v:.2f}" for v in fom.fscore), f"{100 * fom.mean_recall:.2f}"])
    return buf.getvalue()


# -- significance ------------------------------------------------------------

def log_binomial_tail(correct: int, total: int, chance: float) -> float:
    """``log P[X >= correct]`` for ``X ~ Binomial(total, chance)``."""
    if not (0 <= correct <= total):
        raise DataError(f"need 0 <= correct <= total, got {correct}/{total}")
    if not 0.0 < chance < 1.0:
        raise DataError(f"chance must lie in (0, 1), got {chance}")
    if correct == 0:
        return 0.0
    k = np.arange(correct, total + 1)
    logpmf = (gammaln(total + 1) - gammaln(k + 1) - gammaln(total - k + 1)
              + k * np.log(chance) + (total - k) * np.log1p(-chance))
    return float(min(0.0, logsumexp(logpmf)))


def binomial_test(correct: int, total: int, chance) -> float:
    """Upper-tail p-value of ``correct`` successes in ``total`` trials.

    A :class:`fractions.Fraction` chance (e.g. ``Fraction(1, K)``) is summed
    in exact rational arithmetic and rounded once; a float chance is summed
    in log space.
    """
    if isinstance(chance, Fraction):
        if not (0 <= correct <= total):
            raise DataError(f"need 0 <= correct <= total, got {correct}/{total}")
        if not 0 < chance < 1:
            raise DataError(f"chance must lie in (0, 1), got {chance}")
        tail = sum(comb(total, k) * chance ** k * (1 - chance) ** (total - k)
                   for k in range(correct, total + 1))
        return float(tail)
    return float(np.exp(log_binomial_tail(correct, total, chance)))
