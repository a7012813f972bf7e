"""Identity-robustness metrics: per-identity accuracy statistics, the
min-max curve and its area (AUMM), binary Rawlsian min-max, worst
(group x label) cell accuracy, and embedding-neighborhood disparity (DEN/AUD).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import EmbeddingDataset
from .errors import DegenerateInputError, PreconditionError
from .rng import splitmix_stream
from .trainer import predict


@dataclass
class GroupAccuracyTable:
    entries: dict  # key -> (correct, total, accuracy)

    def accuracies(self) -> np.ndarray:
        # keys sorted so every downstream reduction is order-independent
        return np.array([self.entries[k][2] for k in sorted(self.entries)], dtype=np.float64)

    def __len__(self):
        return len(self.entries)


@dataclass
class MmCurve:
    values: np.ndarray


@dataclass
class DenCurve:
    radii: np.ndarray
    values: np.ndarray


@dataclass
class MetricsReport:
    n: int
    acc: float
    aud: Optional[float] = None
    den_curve: Optional[DenCurve] = None
    num_identities: Optional[int] = None
    id_acc: Optional[float] = None
    id_acc_bottom10: Optional[float] = None
    delta_id: Optional[float] = None
    aumm: Optional[float] = None
    mm_curve: Optional[MmCurve] = None
    rmm_group: Optional[float] = None
    worst_subpop_acc: Optional[float] = None
    worst_subpop_cell: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, digits: int = 9) -> dict:
        r = lambda x: None if x is None else round(float(x), digits)
        d = {
            "n": self.n,
            "acc": r(self.acc),
            "num_identities": self.num_identities,
            "id_acc": r(self.id_acc),
            "id_acc_bottom10": r(self.id_acc_bottom10),
            "delta_id": r(self.delta_id),
            "aumm": r(self.aumm),
            "aud": r(self.aud),
            "rmm_group": r(self.rmm_group),
            "worst_subpop_acc": r(self.worst_subpop_acc),
            "worst_subpop_cell": self.worst_subpop_cell,
            "mm_curve": None if self.mm_curve is None else [r(v) for v in self.mm_curve.values],
            "den_curve": None if self.den_curve is None else {
                "radii": [r(v) for v in self.den_curve.radii],
                "values": [r(v) for v in self.den_curve.values],
            },
        }
        d.update(self.extra)
        return d

    SCALARS = ("acc", "id_acc", "id_acc_bottom10", "delta_id", "aumm", "aud", "rmm_group", "worst_subpop_acc")


def per_group_accuracy(correct_flags, keys) -> GroupAccuracyTable:
    flags = [int(f) for f in correct_flags]
    keys = list(keys)
    if not flags:
        raise PreconditionError("cannot tabulate accuracy of an empty evaluation set")
    if len(flags) != len(keys):
        raise PreconditionError("correct_flags and keys differ in length")
    counts: dict = {}
    for f, k in zip(flags, keys):
        if k is None or k == "":
            raise PreconditionError("group keys must be non-empty")
        if f not in (0, 1):
            raise PreconditionError("correct flags must be 0 or 1")
        c, t = counts.get(k, (0, 0))
        counts[k] = (c + f, t + 1)
    return GroupAccuracyTable({k: (c, t, c / t) for k, (c, t) in counts.items()})


def bottom_fraction_count(size: int, fraction: float = 0.1) -> int:
    return max(1, math.floor(fraction * size))


def identity_summary(table: GroupAccuracyTable):
    """(mean, population std, mean of the lowest 10%) of per-group accuracy."""
    acc = table.accuracies()
    if acc.size == 0:
        raise PreconditionError("empty accuracy table")
    m = bottom_fraction_count(acc.size)
    bottom = np.sort(acc)[:m]
    return float(acc.mean()), float(acc.std()), float(bottom.mean())


def mm_curve_values(acc) -> np.ndarray:
    """MM_k = 1 - mean(bottom-k) / mean(top-k) for k = 1..|G|."""
    acc = np.sort(np.asarray(acc, dtype=np.float64))[::-1]
    g = acc.size
    if g == 0:
        raise PreconditionError("empty accuracy list")
    k = np.arange(1, g + 1)
    top = np.cumsum(acc) / k
    bottom = np.cumsum(acc[::-1]) / k
    with np.errstate(divide="ignore", invalid="ignore"):
        mm = np.where(top > 0, 1.0 - bottom / np.where(top > 0, top, 1.0), 0.0)
    mm = np.clip(mm, 0.0, 1.0)
    mm[-1] = 0.0  # top and bottom sets coincide
    return mm


def mm_curve(table: GroupAccuracyTable) -> MmCurve:
    return MmCurve(mm_curve_values(table.accuracies()))


def aumm(curve: MmCurve) -> float:
    vals = np.asarray(curve.values if isinstance(curve, MmCurve) else curve, dtype=np.float64)
    if vals.size == 0:
        raise PreconditionError("empty min-max curve")
    return float(vals.mean())


def rmm_binary(table: GroupAccuracyTable) -> float:
    if len(table) != 2:
        raise PreconditionError(f"Rawlsian min-max needs exactly 2 groups, got {len(table)}")
    acc = table.accuracies()
    hi = acc.max()
    return 0.0 if hi == 0 else float(1.0 - acc.min() / hi)


POLARITY = {1: "P", 0: "N"}


def worst_subpop_accuracy(correct_flags, labels, groups):
    """Lowest accuracy over the (group x label) cells, with its cell tag."""
    keys = [f"{g}{POLARITY.get(int(y), str(y))}" for g, y in zip(groups, labels)]
    if not keys:
        raise PreconditionError("all subpopulation cells are empty")
    if any(int(y) not in POLARITY for y in labels):
        raise PreconditionError("worst-subpopulation accuracy needs binary labels")
    if len(set(groups)) > 2:
        raise PreconditionError("worst-subpopulation accuracy needs a binary group attribute")
    table = per_group_accuracy(correct_flags, keys)
    cell = min(sorted(table.entries), key=lambda k: table.entries[k][2])
    return table.entries[cell][2], cell


def _trimmed_disparity(values: np.ndarray) -> float:
    m = bottom_fraction_count(values.size)
    ordered = np.sort(values)
    top = ordered[-m:].mean()
    if top == 0:
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - ordered[:m].mean() / top)))


TIE_MARGIN = 1e-12


def den_curve(proxies, correct_flags, radii: Sequence[float]) -> DenCurve:
    """Disparity of neighborhood accuracy across Euclidean balls of each radius.

    Every sample is a neighborhood center; neighbors satisfy ||z_i - z_j|| < r
    (the center counts). DEN(r) = 1 - mean(lowest 10%) / mean(highest 10%)
    of the neighborhood accuracies.
    """
    z = np.asarray(proxies, dtype=np.float64)
    flags = np.asarray(correct_flags, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if z.shape[0] == 0:
        raise PreconditionError("DEN needs at least one sample")
    if radii.size and (np.any(radii <= 0) or np.any(np.diff(radii) <= 0)):
        raise PreconditionError("radii must be positive and strictly increasing")
    dist = cdist(z, z)
    values = []
    for r in radii:
        # distances equal to r up to rounding count as "not less than r"; quantile
        # radii often coincide with an observed pairwise distance
        inside = dist < r * (1.0 - TIE_MARGIN)
        np.fill_diagonal(inside, True)
        local = (inside @ flags) / inside.sum(axis=1)
        values.append(_trimmed_disparity(local))
    return DenCurve(radii=radii, values=np.array(values))


def aud(curve: DenCurve) -> float:
    vals = np.asarray(curve.values if isinstance(curve, DenCurve) else curve, dtype=np.float64)
    if vals.size == 0:
        raise PreconditionError("empty DEN curve")
    return float(vals.mean())


def quantile_levels(count: int) -> np.ndarray:
    if count < 1:
        raise PreconditionError("radius count must be >= 1")
    if count == 1:
        return np.array([0.05])
    return np.linspace(0.05, 0.50, count)


def radius_grid(proxies, count: int = 10, max_pairs: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Radii at evenly spaced quantiles in [0.05, 0.5] of pairwise distances.

    All pairs are used when there are at most ``max_pairs`` of them;
    otherwise that many pairs are drawn with a seeded SplitMix64 stream.
    """
    z = np.asarray(proxies, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise PreconditionError("a radius grid needs at least two points")
    levels = quantile_levels(count)
    if n * (n - 1) // 2 <= max_pairs:
        dists = pdist(z)
    else:
        stream = splitmix_stream(seed, 2 * max_pairs)
        i = (stream[0::2] % np.uint64(n)).astype(np.int64)
        j = (stream[1::2] % np.uint64(n - 1)).astype(np.int64)
        j += j >= i
        dists = np.linalg.norm(z[i] - z[j], axis=1)
    if not np.any(dists > 0):
        raise DegenerateInputError("all proxy embeddings are identical")
    radii = np.quantile(dists, levels)
    radii = np.unique(radii[radii > 0])
    if radii.size == 0:
        radii = np.array([dists[dists > 0].min()])
    return radii


def correctness(model, dataset: EmbeddingDataset, rows) -> np.ndarray:
    pred, _ = predict(model, dataset.features[rows])
    return (pred == dataset.labels[rows]).astype(np.int64)


def report_from_flags(dataset: EmbeddingDataset, rows, flags, radius_count: int = 10,
                      min_id_count: int = 1, radius_seed: int = 0) -> MetricsReport:
    """Assemble every metric from 0/1 correctness flags on ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    flags = np.asarray(flags, dtype=np.int64)
    if rows.size == 0:
        raise PreconditionError("evaluation split is empty")
    rep = MetricsReport(n=int(rows.size), acc=float(flags.mean()))

    z = dataset.proxies[rows]
    if rows.size >= 2 and np.any(z != z[0]):
        radii = radius_grid(z, radius_count, seed=radius_seed)
        rep.den_curve = den_curve(z, flags, radii)
        rep.aud = aud(rep.den_curve)

    if dataset.identities is not None:
        idents = [dataset.identities[i] for i in rows]
        table = per_group_accuracy(flags, idents)
        if min_id_count > 1:
            table = GroupAccuracyTable({k: v for k, v in table.entries.items() if v[1] >= min_id_count})
        if len(table):
            rep.num_identities = len(table)
            rep.id_acc, rep.delta_id, rep.id_acc_bottom10 = identity_summary(table)
            rep.mm_curve = mm_curve(table)
            rep.aumm = aumm(rep.mm_curve)

    if dataset.groups is not None:
        groups = [dataset.groups[i] for i in rows]
        gtable = per_group_accuracy(flags, groups)
        if len(gtable) == 2:
            rep.rmm_group = rmm_binary(gtable)
        labels = dataset.labels[rows]
        if len(gtable) <= 2 and dataset.num_classes == 2:
            rep.worst_subpop_acc, rep.worst_subpop_cell = worst_subpop_accuracy(flags, labels, groups)
    return rep


def full_report(dataset: EmbeddingDataset, model, split: str = "test", radius_count: int = 10,
                min_id_count: int = 1) -> MetricsReport:
    rows = dataset.split_indices(split)
    if rows.size == 0:
        raise PreconditionError(f"split {split!r} is empty")
    flags = correctness(model, dataset, rows)
    return report_from_flags(dataset, rows, flags, radius_count, min_id_count)
