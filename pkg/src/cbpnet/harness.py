"""Datasets, class-incremental splitting, metrics, and results persistence.

The dataset container is a tiny self-describing binary format so runs are
bit-exact and dependency-free; metrics are pure functions of the accuracy
matrix; reports land on disk as JSON + CSV + SVG.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    StateError,
)

CONTAINER_MAGIC = b"CLDS"
CONTAINER_VERSION = 1


@dataclass
class DatasetContainer:
    images: np.ndarray  # count x H x W x C, uint8
    labels: np.ndarray  # count, uint16
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4:
            raise DataError(f"images must be count x H x W x C, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")
        if len(self.images) < 1:
            raise DataError("container must hold at least one sample")
        bad = np.flatnonzero(self.labels >= self.class_count)
        if bad.size:
            raise DataError(
                f"record {bad[0]}: label {self.labels[bad[0]]} >= class_count {self.class_count}"
            )

    def subset(self, idx) -> "DatasetContainer":
        return DatasetContainer(self.images[idx], self.labels[idx], self.class_count)


def save_container(ds: DatasetContainer, path):
    count, h, w, c = ds.images.shape
    body = bytearray()
    body += CONTAINER_MAGIC
    body += struct.pack("<H", CONTAINER_VERSION)
    body += struct.pack("<IHHBH", count, h, w, c, ds.class_count)
    body += ds.images.tobytes()
    body += ds.labels.astype("<u2").tobytes()
    body += struct.pack("<Q", zlib.crc32(bytes(body)))
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_container(path) -> DatasetContainer:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 6:
        raise CorruptionError("container truncated before header")
    if blob[:4] != CONTAINER_MAGIC:
        raise FormatError(f"bad container magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    try:
        count, h, w, c, class_count = struct.unpack_from("<IHHBH", blob, 6)
    except struct.error as exc:
        raise CorruptionError("container header truncated") from exc
    pix_off = 6 + struct.calcsize("<IHHBH")
    pix_len = count * h * w * c
    lab_len = count * 2
    expected = pix_off + pix_len + lab_len + 8
    if len(blob) != expected:
        raise CorruptionError(
            f"container length {len(blob)} != expected {expected}"
        )
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if stored != zlib.crc32(blob[:-8]):
        raise CorruptionError("container checksum mismatch")
    images = np.frombuffer(blob, dtype=np.uint8, count=pix_len,
                           offset=pix_off).reshape(count, h, w, c)
    labels = np.frombuffer(blob, dtype="<u2", count=count, offset=pix_off + pix_len)
    return DatasetContainer(images.copy(), labels.copy(), class_count)


def generate_synthetic(classes: int, per_class: int, dim, seed: int,
                       noise: float = 40.0) -> DatasetContainer:
    """Class-conditional blob images: one random mean pattern per class plus
    shared Gaussian pixel noise, quantized to uint8."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    h, w, c = dim
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    means = gen.uniform(0.0, 255.0, size=(classes, h, w, c))
    images = np.empty((classes * per_class, h, w, c), dtype=np.uint8)
    labels = np.empty(classes * per_class, dtype=np.uint16)
    for k in range(classes):
        block = means[k] + gen.normal(0.0, noise, size=(per_class, h, w, c))
        sl = slice(k * per_class, (k + 1) * per_class)
        images[sl] = np.clip(block, 0, 255).astype(np.uint8)
        labels[sl] = k
    return DatasetContainer(images, labels, classes)


# --- class-incremental splitting ------------------------------------------------


@dataclass
class SplitSpec:
    base_classes: list
    task_classes: list  # T disjoint lists
    seed: int


@dataclass
class SplitResult:
    spec: SplitSpec
    base_train: tuple | None  # (images, labels) with original class ids
    base_test: tuple | None
    tasks: list  # [( (train_images, train_labels), (test_images, test_labels) ), ...]


def split_class_incremental(ds: DatasetContainer, base: int, t_count: int,
                            seed: int) -> SplitResult:
    """Permute classes by seed; first `base` go to pretraining, the rest form
    T equal disjoint tasks. Within each class the split is a seeded 80/20."""
    k = (ds.class_count - base) // t_count
    if k < 1:
        raise ConfigError(
            f"{ds.class_count} classes cannot cover base={base} plus {t_count} tasks"
        )
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    perm = gen.permutation(ds.class_count)
    base_classes = [int(x) for x in perm[:base]]
    task_classes = [
        [int(x) for x in perm[base + i * k: base + (i + 1) * k]]
        for i in range(t_count)
    ]

    train_idx: dict = {}
    test_idx: dict = {}
    for cls in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[gen.permutation(len(idx))]
        n_test = max(1, len(idx) // 5)
        test_idx[cls] = idx[:n_test]
        train_idx[cls] = idx[n_test:]

    def gather(classes, table):
        sel = np.concatenate([table[c] for c in classes]) if classes else np.array([], int)
        return ds.images[sel], ds.labels[sel].astype(np.int64)

    base_train = gather(base_classes, train_idx) if base else None
    base_test = gather(base_classes, test_idx) if base else None
    tasks = [
        (gather(classes, train_idx), gather(classes, test_idx))
        for classes in task_classes
    ]
    return SplitResult(SplitSpec(base_classes, task_classes, int(seed)),
                       base_train, base_test, tasks)


# --- accuracy matrix and metrics -------------------------------------------------


class AccuracyMatrix:
    """a[i][t]: accuracy on task t after training task i, filled for t <= i."""

    def __init__(self, size: int):
        if size < 1:
            raise ConfigError("matrix needs at least one task")
        self.size = size
        self.values = np.full((size, size), np.nan)

    def set(self, i: int, t: int, acc: float):
        if t > i:
            raise StateError(f"cell ({i}, {t}) is above the diagonal")
        if not (0.0 <= acc <= 1.0):
            raise DataError(f"accuracy {acc} outside [0, 1]")
        self.values[i, t] = acc

    def get(self, i: int, t: int) -> float:
        v = self.values[i, t]
        if np.isnan(v):
            raise StateError(f"cell ({i}, {t}) not filled")
        return float(v)

    def filled_cells(self):
        for i in range(self.size):
            for t in range(i + 1):
                if not np.isnan(self.values[i, t]):
                    yield i, t, float(self.values[i, t])

    def just_learned(self) -> list:
        return [self.get(i, i) for i in range(self.size)]

    def final_row(self) -> list:
        return [self.get(self.size - 1, t) for t in range(self.size)]


def avg_accuracy(mx: AccuracyMatrix) -> float:
    """Mean of the final row: accuracy over all tasks after the last one."""
    return float(np.mean(mx.final_row()))


def forgetting(mx: AccuracyMatrix) -> float:
    """Average drop from each task's best earlier accuracy to its final one."""
    if mx.size < 2:
        raise StateError("forgetting needs at least two tasks")
    last = mx.size - 1
    drops = []
    for t in range(last):
        best = max(mx.get(i, t) for i in range(t, last))
        drops.append(best - mx.get(last, t))
    return float(np.mean(drops))


# --- reports ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    matrix: AccuracyMatrix
    config: dict
    seed: int
    variant: str
    wall_clock: float = 0.0
    curves: dict = field(default_factory=dict)  # variant/name -> a[i][i] list

    @property
    def average_accuracy(self) -> float:
        return avg_accuracy(self.matrix)

    @property
    def forgetting_rate(self):
        return forgetting(self.matrix) if self.matrix.size >= 2 else None

    def to_json(self) -> dict:
        return {
            "average_accuracy": self.average_accuracy,
            "forgetting": self.forgetting_rate,
            "just_learned": self.matrix.just_learned(),
            "final_row": self.matrix.final_row(),
            "matrix": [[None if np.isnan(v) else float(v) for v in row]
                       for row in self.matrix.values],
            "tasks": self.matrix.size,
            "config": self.config,
            "seed": self.seed,
            "variant": self.variant,
            "wall_clock_s": self.wall_clock,
        }


def write_matrix_csv(mx: AccuracyMatrix, path):
    lines = ["after_task,task,accuracy"]
    for i, t, v in mx.filled_cells():
        lines.append(f"{i + 1},{t + 1},{v!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != "after_task,task,accuracy":
        raise FormatError("matrix.csv header missing or malformed")
    cells = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise FormatError(f"malformed matrix.csv row: {ln!r}")
        cells.append((int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])))
    size = max(i for i, _, _ in cells) + 1
    mx = AccuracyMatrix(size)
    for i, t, v in cells:
        mx.set(i, t, v)
    return mx


_SVG_COLORS = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"]


def curves_svg(curves: dict) -> str:
    """Accuracy-vs-task polylines, one per named curve."""
    width, height, pad = 520, 340, 48
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
        'text-anchor="middle">task</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">accuracy</text>',
    ]
    max_len = max((len(v) for v in curves.values()), default=1)
    span_x = width - 2 * pad
    span_y = height - 2 * pad
    for ci, (name, values) in enumerate(sorted(curves.items())):
        color = _SVG_COLORS[ci % len(_SVG_COLORS)]
        pts = []
        for i, v in enumerate(values):
            x = pad + (span_x * i / max(1, max_len - 1))
            y = height - pad - span_y * float(v)
            pts.append(f"{x:.2f},{y:.2f}")
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" '
            f'points="{" ".join(pts)}"/>'
        )
        parts.append(
            f'<text x="{width - pad - 150}" y="{pad + 16 * ci + 4}" font-size="12" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(report: MetricsReport, out_dir):
    """Write metrics.json, matrix.csv, and curves.svg into out_dir."""
    import os

    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        write_matrix_csv(report.matrix, os.path.join(out_dir, "matrix.csv"))
        curves = report.curves or {report.variant: report.matrix.just_learned()}
        with open(os.path.join(out_dir, "curves.svg"), "w") as f:
            f.write(curves_svg(curves) + "\n")
    except OSError as exc:
        from .errors import IoError

        raise IoError(f"cannot write report to {out_dir}: {exc}") from exc
