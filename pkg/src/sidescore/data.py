"""Dataset containers, loaders and side-information maps."""

from __future__ import annotations

import contextlib
import contextvars
import csv
import gzip
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

ROLES = ("feature", "side", "eval_label", "drop")


class DataError(Exception):
    """Problem with input data (missing file, bad format, bad values)."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class LabelAccessError(RuntimeError):
    """Evaluation labels were read while a training flow was active."""


_training_flow = contextvars.ContextVar("training_flow", default=False)


@contextlib.contextmanager
def training_flow() -> Iterator[None]:
    """Mark the enclosed code as training; evaluation labels become unreadable."""
    token = _training_flow.set(True)
    try:
        yield
    finally:
        _training_flow.reset(token)


@dataclass(frozen=True)
class SideInfo:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ValueError(f"unknown side-information kind {self.kind!r}")
        values = np.asarray(self.values)
        if self.kind == CATEGORICAL:
            if values.size and (not np.all(np.isfinite(values)) or np.any(values < 0)
                                or np.any(values != np.round(values))):
                raise ValueError("categorical side information must be nonnegative integers")
            values = values.astype(np.int64)
        else:
            values = values.astype(np.float64)
            if not np.all(np.isfinite(values)):
                raise ValueError("continuous side information must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n_classes(self) -> int:
        if self.kind != CATEGORICAL:
            raise ValueError("continuous side information has no class count")
        return int(self.values.max()) + 1 if self.values.size else 0

    def __len__(self) -> int:
        return len(self.values)

    def take(self, idx) -> "SideInfo":
        return SideInfo(self.kind, self.values[idx])


@dataclass(frozen=True)
class Dataset:
    """Features, optional side information and held-out evaluation labels.

    Evaluation labels are stored privately. Reading them through
    ``eval_labels`` inside a ``training_flow()`` block raises
    ``LabelAccessError``; only the evaluation path reads them.
    """

    features: np.ndarray
    side: SideInfo | None = None
    _eval_labels: np.ndarray | None = field(default=None, repr=False)
    split_tag: str = "all"
    input_kind: str = "tabular"
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.features)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if x.ndim != 2:
            raise ValueError("features must be an N x D matrix")
        object.__setattr__(self, "features", x)
        n = x.shape[0]
        if self.side is not None and len(self.side) != n:
            raise ValueError("side information row count differs from features")
        if self._eval_labels is not None:
            labels = np.asarray(self._eval_labels)
            if len(labels) != n:
                raise ValueError("evaluation label row count differs from features")
            object.__setattr__(self, "_eval_labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def has_eval_labels(self) -> bool:
        return self._eval_labels is not None

    @property
    def eval_labels(self) -> np.ndarray | None:
        if _training_flow.get():
            raise LabelAccessError("evaluation labels are not visible to training")
        return self._eval_labels

    def take(self, idx, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            None if self.side is None else self.side.take(idx),
            None if self._eval_labels is None else self._eval_labels[idx],
            split_tag or self.split_tag,
            self.input_kind,
            self.feature_names,
        )

    def with_features(self, features: np.ndarray) -> "Dataset":
        return replace(self, features=features)


# -- IDX ---------------------------------------------------------------------

def _open_maybe_gz(path: Path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: header truncated")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(blob) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    payload = blob[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D label and 3-D image arrays")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path, checksums: dict | None = None) -> Dataset:
    """Load an IDX image/label pair (e.g. MNIST) with pixels scaled to [0, 1].

    The labels are kept as evaluation material only; build side information
    from them explicitly with ``side_map``. ``checksums`` optionally maps a
    path to its expected sha256 hex digest.
    """
    for p in (images_path, labels_path):
        if checksums and str(p) in checksums:
            digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()
            if digest != checksums[str(p)]:
                raise DataError(f"{p}: checksum mismatch")
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n = images.shape[0]
    features = images.reshape(n, -1).astype(np.float32) / np.float32(255.0)
    return Dataset(features, None, labels.astype(np.int64), "all", "image_28x28")


def load_mnist_dir(root, split: str = "train") -> Dataset:
    """Load the standard MNIST file pair for ``split`` from ``root``."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return load_idx(img, lab)
    raise DataError(f"no MNIST {split} files under {root}")


# -- side-information maps -----------------------------------------------------

_HETEROGENEOUS = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2, 3])


def side_map(labels, mapping="pure") -> SideInfo:
    """Derive categorical side information from class labels.

    ``pure`` keeps the labels, ``pairs`` merges {0,1}, {2,3}, ...,
    ``heterogeneous`` merges {0..3}, {4,5,6}, {7,8}, {9}. A dict or
    sequence is used as a lookup table.
    """
    labels = np.asarray(labels)
    if isinstance(mapping, str):
        if labels.size and (labels.min() < 0 or labels.max() > 9 or np.any(labels != np.round(labels))):
            raise ValueError("built-in maps are defined for labels 0..9")
        labels = labels.astype(np.int64)
        if mapping == "pure":
            return SideInfo(CATEGORICAL, labels.copy())
        if mapping == "pairs":
            return SideInfo(CATEGORICAL, labels // 2)
        if mapping == "heterogeneous":
            return SideInfo(CATEGORICAL, _HETEROGENEOUS[labels])
        raise ValueError(f"unknown side map {mapping!r}")
    table = dict(mapping) if isinstance(mapping, dict) else dict(enumerate(mapping))
    try:
        return SideInfo(CATEGORICAL, np.array([table[int(v)] for v in labels], dtype=np.int64))
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} outside the custom map") from None


# -- tabular -----------------------------------------------------------------

PARKINSON_SCHEMA = {
    "subject#": "drop",
    "age": "feature",
    "sex": "feature",
    "test_time": "drop",
    "motor_UPDRS": "side",
    "total_UPDRS": "eval_label",
    **{c: "feature" for c in (
        "Jitter(%)", "Jitter(Abs)", "Jitter:RAP", "Jitter:PPQ5", "Jitter:DDP",
        "Shimmer", "Shimmer(dB)", "Shimmer:APQ3", "Shimmer:APQ5", "Shimmer:APQ11",
        "Shimmer:DDA", "NHR", "HNR", "RPDE", "DFA", "PPE")},
}

STUDENT_SCHEMA = {
    "G3_por": "side",
    "G3_mat": "eval_label",
    "G1_mat": "drop", "G2_mat": "drop", "G1_por": "drop", "G2_por": "drop",
    "*": "feature",
}


def read_schema(path) -> dict:
    """Parse a ``column = role`` schema file. ``*`` sets the default role."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"schema file not found: {path}")
    schema = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        # whole-line comments only: column names may contain '#'
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'column = role'")
        name, role = (s.strip() for s in line.rsplit("=", 1))
        if role not in ROLES:
            raise DataError(f"{path}:{lineno}: unknown role {role!r}")
        schema[name] = role
    return schema


def standardize(train: np.ndarray, *others: np.ndarray):
    """Standardize with statistics from ``train`` only.

    Zero-variance columns are only centred.
    """
    mean = train.mean(0)
    std = train.std(0)
    std = np.where(std > 0, std, 1.0)
    z = (train - mean) / std
    # second centring pass removes the rounding residue of the first
    resid = z.mean(0)
    z = z - resid
    out = [z] + [(o - mean) / std - resid for o in others]
    return out if others else z


def _parse_float(cell: str, path, lineno: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        value = math.nan
    if not math.isfinite(value):
        raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {column!r}")
    return value


def load_tabular_csv(path, schema: dict, *, standardize_features: bool = True,
                     side_kind: str = CONTINUOUS) -> Dataset:
    """Load a CSV with a header row, assigning columns by ``schema`` role.

    Empty cells mark missing values; such rows are dropped and counted in
    the log. Constant feature columns are dropped with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    text = path.read_text()
    if not text.strip():
        raise DataError(f"{path}: empty file")
    dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t")
    rows = list(csv.reader(text.splitlines(), dialect))
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise DataError(f"{path}: no data rows")

    default = schema.get("*")
    roles = {}
    for name in header:
        role = schema.get(name, default)
        if role is None:
            raise DataError(f"{path}: column {name!r} has no role in the schema")
        roles[name] = role
    for name in schema:
        if name != "*" and name not in header:
            raise DataError(f"{path}: schema column {name!r} missing from header")
    by_role = {r: [h for h in header if roles[h] == r] for r in ROLES}
    if len(by_role["side"]) > 1 or len(by_role["eval_label"]) > 1:
        raise DataError("at most one side and one eval_label column are supported")
    if not by_role["feature"]:
        raise DataError("schema assigns no feature columns")

    col = {h: i for i, h in enumerate(header)}
    wanted = by_role["feature"] + by_role["side"] + by_role["eval_label"]
    parsed, dropped = [], 0
    for lineno, r in enumerate(body, 2):
        cells = [r[col[h]].strip() if col[h] < len(r) else "" for h in wanted]
        if any(c == "" or c.upper() == "NA" for c in cells):
            dropped += 1
            continue
        parsed.append([_parse_float(c, path, lineno, h) for c, h in zip(cells, wanted)])
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    if not parsed:
        raise DataError(f"{path}: every row has missing values")
    table = np.array(parsed, dtype=np.float64)
    nf = len(by_role["feature"])
    features = table[:, :nf]
    names = list(by_role["feature"])
    std = features.std(0)
    constant = std == 0
    if constant.any():
        gone = [n for n, c in zip(names, constant) if c]
        log.warning("%s: dropping constant feature columns %s", path, gone)
        features = features[:, ~constant]
        names = [n for n, c in zip(names, constant) if not c]
    if standardize_features:
        features = standardize(features)
    side = None
    pos = nf
    if by_role["side"]:
        side = SideInfo(side_kind, table[:, pos])
        pos += 1
    labels = table[:, pos] if by_role["eval_label"] else None
    return Dataset(features, side, labels, "all", "tabular", tuple(names))


STUDENT_JOIN_KEYS = ("school", "sex", "age", "address", "famsize", "Pstatus", "Medu",
                     "Fedu", "Mjob", "Fjob", "reason", "nursery", "internet")


def merge_student_tables(mat_path, por_path, out_path) -> int:
    """Join the Mathematics and Portuguese student tables into one numeric CSV.

    Students are matched on the usual identifying attributes. String columns
    are encoded as integer codes (sorted category order), the grade columns
    get ``_mat``/``_por`` suffixes, and the attributes of the Portuguese
    table are kept. Returns the number of joined rows.
    """
    def read(p):
        p = Path(p)
        if not p.exists():
            raise DataError(f"file not found: {p}")
        with open(p, newline="") as fh:
            return list(csv.DictReader(fh, delimiter=";"))

    mat, por = read(mat_path), read(por_path)
    grades = ("G1", "G2", "G3")
    index = {}
    for r in mat:
        index.setdefault(tuple(r[k] for k in STUDENT_JOIN_KEYS), r)
    joined = []
    for r in por:
        m = index.get(tuple(r[k] for k in STUDENT_JOIN_KEYS))
        if m is None:
            continue
        row = {k: v for k, v in r.items() if k not in grades}
        for g in grades:
            row[f"{g}_por"] = r[g]
            row[f"{g}_mat"] = m[g]
        joined.append(row)
    if not joined:
        raise DataError("no students present in both tables")
    columns = list(joined[0])
    codes = {}
    for c in columns:
        vals = [row[c] for row in joined]
        try:
            [float(v) for v in vals]
        except ValueError:
            codes[c] = {v: i for i, v in enumerate(sorted(set(vals)))}
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in joined:
            w.writerow([codes[c][row[c]] if c in codes else row[c] for c in columns])
    return len(joined)


# -- synthetic fixture -------------------------------------------------------------

def make_blobs(n_per_class: int = 100, n_classes: int = 4, dim: int = 2,
               spread: float = 0.5, seed: int = 0, center_scale: float = 4.0) -> Dataset:
    """Isotropic Gaussian clusters. Class ids are both side info and labels.

    Centres sit on a circle (dim >= 2) of radius ``center_scale`` padded
    with zeros, so classes are well separated for small ``spread``.
    """
    if min(n_per_class, n_classes, dim) < 1:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    if dim >= 2:
        centers[:, 0] = center_scale * np.cos(angles)
        centers[:, 1] = center_scale * np.sin(angles)
    else:
        centers[:, 0] = center_scale * np.arange(n_classes)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    perm = rng.permutation(labels.size)
    x, labels = x[perm], labels[perm]
    return Dataset(x, SideInfo(CATEGORICAL, labels), labels.copy(), "all", "tabular",
                   tuple(f"x{i}" for i in range(dim)))


def split(dataset: Dataset, fractions=(0.8,), seed: int = 0,
          standardize_features: bool | None = None) -> list[Dataset]:
    """Random disjoint row partition.

    ``fractions`` lists the sizes of the leading parts; whatever is left
    forms a final part, so ``(0.8,)`` yields train/test and ``(1.0,)``
    yields an empty test part. Tabular features are re-standardized with
    statistics from the first part only.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError("fractions must be positive and sum to at most 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    bounds = np.minimum(bounds, n)
    pieces = np.split(perm, bounds)
    tags = ["train", "test"] + [f"part{i}" for i in range(2, len(pieces))]
    parts = [dataset.take(np.sort(p), tags[i]) for i, p in enumerate(pieces)]
    for i, p in enumerate(parts[:-1]):
        if len(p) == 0:
            raise ValueError(f"split part {i} is empty")
    if standardize_features is None:
        standardize_features = dataset.input_kind == "tabular"
    if standardize_features and len(parts[0]):
        scaled = standardize(parts[0].features, *[p.features for p in parts[1:]])
        parts = [p.with_features(s) for p, s in zip(parts, scaled)]
    return parts
