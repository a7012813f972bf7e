"""Dataset model and the CSV directory format.

A dataset directory holds ``meta.csv``, ``features.csv`` and optionally
``proxies.csv``. A small ``dataset.json`` sidecar carries the class count
and flags that the CSVs cannot express.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetLoadError, DegenerateInputError, ParseError, SchemaError, WriteError

SPLITS = ("train", "val", "test")
META_HEADER = ["sample_id", "split", "label", "identity", "group"]


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    sample_ids: tuple
    features: np.ndarray
    proxies: np.ndarray
    labels: np.ndarray
    splits: tuple
    num_classes: int
    identities: Optional[tuple] = None
    groups: Optional[tuple] = None
    normalized: bool = False
    proxies_alias_features: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        set_(self, "splits", tuple(self.splits))
        set_(self, "features", _as_matrix(self.features))
        set_(self, "proxies", _as_matrix(self.proxies))
        set_(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))
        if self.identities is not None:
            set_(self, "identities", tuple(str(s) for s in self.identities))
        if self.groups is not None:
            set_(self, "groups", tuple(str(s) for s in self.groups))
        self.features.setflags(write=False)
        self.proxies.setflags(write=False)
        self.labels.setflags(write=False)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def validate(self) -> None:
        n = self.n
        counts = {
            "features": self.features.shape[0],
            "proxies": self.proxies.shape[0],
            "labels": self.labels.shape[0],
            "splits": len(self.splits),
        }
        if self.identities is not None:
            counts["identities"] = len(self.identities)
        if self.groups is not None:
            counts["groups"] = len(self.groups)
        bad = {k: v for k, v in counts.items() if v != n}
        if bad:
            raise SchemaError(f"row-count mismatch: {n} sample_ids vs {bad}")
        if len(set(self.sample_ids)) != n:
            seen = set()
            dup = next(s for s in self.sample_ids if s in seen or seen.add(s))
            raise SchemaError(f"duplicate sample_id {dup!r}")
        if self.num_classes < 2:
            raise SchemaError(f"num_classes must be >= 2, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SchemaError(f"labels must lie in [0, {self.num_classes})")
        for i, s in enumerate(self.splits):
            if s not in SPLITS:
                raise SchemaError(f"row {i}: split {s!r} not in {SPLITS}")
        for name, mat in (("features", self.features), ("proxies", self.proxies)):
            finite = np.isfinite(mat)
            if not finite.all():
                row = int(np.argwhere(~finite)[0, 0])
                raise ParseError(f"non-finite {name} value at row {row}")
        if self.normalized and n:
            norms = np.linalg.norm(self.proxies, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise SchemaError("normalized flag set but proxy rows are not unit norm")

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.splits == other.splits
            and self.num_classes == other.num_classes
            and self.identities == other.identities
            and self.groups == other.groups
            and self.normalized == other.normalized
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.proxies.shape == other.proxies.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.proxies, other.proxies)
        )

    __hash__ = None

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def subset(self, rows: Sequence[int]) -> "EmbeddingDataset":
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda seq: None if seq is None else tuple(seq[i] for i in rows)
        return replace(
            self,
            sample_ids=pick(self.sample_ids),
            features=self.features[rows],
            proxies=self.proxies[rows],
            labels=self.labels[rows],
            splits=pick(self.splits),
            identities=pick(self.identities),
            groups=pick(self.groups),
        )


def _as_matrix(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise SchemaError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def normalize_proxies(dataset: EmbeddingDataset) -> EmbeddingDataset:
    norms = np.linalg.norm(dataset.proxies, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError(f"proxy row {int(zero[0])} has zero norm")
    return replace(
        dataset,
        proxies=dataset.proxies / norms[:, None],
        normalized=True,
        proxies_alias_features=False,
    )


# --- CSV I/O -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def _matrix_csv(ids, mat: np.ndarray, prefix: str) -> str:
    lines = [",".join(["sample_id"] + [f"{prefix}{j}" for j in range(mat.shape[1])])]
    for sid, row in zip(ids, mat):
        lines.append(",".join([sid] + [_fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: EmbeddingDataset, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(f"cannot create {directory}: {exc}") from exc

    lines = [",".join(META_HEADER)]
    for i, sid in enumerate(dataset.sample_ids):
        ident = dataset.identities[i] if dataset.identities is not None else ""
        grp = dataset.groups[i] if dataset.groups is not None else ""
        lines.append(",".join([sid, dataset.splits[i], str(int(dataset.labels[i])), ident, grp]))
    atomic_write_text(directory / "meta.csv", "\n".join(lines) + "\n")
    atomic_write_text(directory / "features.csv", _matrix_csv(dataset.sample_ids, dataset.features, "f"))
    if dataset.proxies_alias_features:
        stale = directory / "proxies.csv"
        if stale.exists():
            stale.unlink()
    else:
        atomic_write_text(directory / "proxies.csv", _matrix_csv(dataset.sample_ids, dataset.proxies, "z"))
    info = {
        "num_classes": dataset.num_classes,
        "normalized": dataset.normalized,
        "proxies": "features" if dataset.proxies_alias_features else "file",
        "has_identities": dataset.identities is not None,
        "has_groups": dataset.groups is not None,
        "feature_dim": int(dataset.features.shape[1]),
        "proxy_dim": int(dataset.proxies.shape[1]),
    }
    atomic_write_text(directory / "dataset.json", json.dumps(info, indent=2, sort_keys=True) + "\n")


def _read_csv(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DatasetLoadError(f"missing file: {path.name} (in {path.parent})")
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def _read_matrix(path: Path, prefix: str, ids: list[str]) -> np.ndarray:
    rows = _read_csv(path)
    if not rows:
        raise SchemaError(f"{path.name}: missing header")
    header = rows[0]
    expected = ["sample_id"] + [f"{prefix}{j}" for j in range(len(header) - 1)]
    if header != expected:
        raise SchemaError(f"{path.name}: bad header {header[:4]}...")
    body = rows[1:]
    if len(body) != len(ids):
        raise SchemaError(f"{path.name} has {len(body)} rows but meta.csv has {len(ids)}")
    d = len(header) - 1
    mat = np.empty((len(body), d), dtype=np.float64)
    for i, row in enumerate(body):
        if len(row) != d + 1:
            raise SchemaError(f"{path.name} row {i}: expected {d + 1} columns, got {len(row)}")
        if row[0] != ids[i]:
            raise SchemaError(f"{path.name} row {i}: sample_id {row[0]!r} does not match meta.csv {ids[i]!r}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ParseError(f"{path.name} row {i}: {exc}") from exc
        if not all(np.isfinite(vals)):
            raise ParseError(f"{path.name} row {i}: non-finite value")
        mat[i] = vals
    return mat


def load_dataset(directory, proxies_from_features: bool = False, num_classes: Optional[int] = None) -> EmbeddingDataset:
    """Read a dataset directory; row order follows ``meta.csv``.

    ``proxies_from_features`` makes a missing ``proxies.csv`` alias the
    feature matrix. Without a ``dataset.json`` the class count defaults to
    ``max(label) + 1`` (at least 2).
    """
    directory = Path(directory)
    info = {}
    info_path = directory / "dataset.json"
    if info_path.exists():
        info = json.loads(info_path.read_text(encoding="utf-8"))

    rows = _read_csv(directory / "meta.csv")
    if not rows or rows[0] != META_HEADER:
        raise SchemaError(f"meta.csv: header must be {','.join(META_HEADER)}")
    ids, splits, labels, idents, groups = [], [], [], [], []
    for i, row in enumerate(rows[1:]):
        if len(row) != 5:
            raise SchemaError(f"meta.csv row {i}: expected 5 columns, got {len(row)}")
        sid, split, label, ident, grp = row
        try:
            labels.append(int(label))
        except ValueError as exc:
            raise ParseError(f"meta.csv row {i}: bad label {label!r}") from exc
        ids.append(sid)
        splits.append(split)
        idents.append(ident)
        groups.append(grp)

    has_ident = info.get("has_identities", any(idents))
    has_groups = info.get("has_groups", any(groups))
    features = _read_matrix(directory / "features.csv", "f", ids)
    if info.get("feature_dim") is not None and not ids:
        features = np.zeros((0, info["feature_dim"]))

    alias = info.get("proxies") == "features"
    proxy_path = directory / "proxies.csv"
    if alias or (proxies_from_features and not proxy_path.exists()):
        proxies = features
        alias = True
    else:
        proxies = _read_matrix(proxy_path, "z", ids)
        if info.get("proxy_dim") is not None and not ids:
            proxies = np.zeros((0, info["proxy_dim"]))

    if num_classes is None:
        num_classes = info.get("num_classes")
    if num_classes is None:
        num_classes = max(2, max(labels) + 1 if labels else 2)

    return EmbeddingDataset(
        sample_ids=ids,
        features=features,
        proxies=proxies,
        labels=np.array(labels, dtype=np.int64),
        splits=splits,
        num_classes=int(num_classes),
        identities=tuple(idents) if has_ident else None,
        groups=tuple(groups) if has_groups else None,
        normalized=bool(info.get("normalized", False)),
        proxies_alias_features=alias,
    )
