"""Plain-text point files, dataset manifests and error tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..geometry import DegenerateCloudError, PointCloud
from .synthetic import Dataset


class XYZParseError(IOError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def load_xyz(path) -> PointCloud:
    """One point per line: x y z [extra columns...]. Blank and ``#`` lines are skipped."""
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < 3:
                raise XYZParseError(path, line_no, f"expected at least 3 columns, got {len(parts)}")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise XYZParseError(path, line_no, f"expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise XYZParseError(path, line_no, f"not a number in {s!r}") from None
    if not rows:
        raise DegenerateCloudError(f"{path}: no points")
    arr = np.asarray(rows)
    if not np.all(np.isfinite(arr[:, :3])):
        raise XYZParseError(path, 0, "non-finite coordinate")
    return PointCloud(arr[:, :3], arr[:, 3:] if arr.shape[1] > 3 else None)


def save_xyz(path, cloud, extra_columns=None) -> None:
    """Write coordinates with 6 decimals; integer extra columns are written as integers."""
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud)
    cols = [np.asarray(coords, dtype=np.float64)]
    fmt = ["%.6f"] * 3
    if extra_columns is not None:
        extra = np.asarray(extra_columns)
        if extra.ndim == 1:
            extra = extra[:, None]
        if extra.shape[0] != coords.shape[0]:
            raise ValueError(f"{extra.shape[0]} extra rows for {coords.shape[0]} points")
        is_int = np.issubdtype(extra.dtype, np.integer)
        cols.append(extra.astype(np.float64))
        fmt += ["%d" if is_int else "%.6f"] * extra.shape[1]
    np.savetxt(path, np.concatenate(cols, axis=1), fmt=fmt)


# --- datasets -----------------------------------------------------------------


def save_dataset(root, ds: Dataset, split: str) -> Path:
    """Write each cloud as ``<split>/<index>.xyz`` plus ``<split>.csv`` (path,label)."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    manifest = root / f"{split}.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for i, (c, y) in enumerate(zip(ds.coords, ds.labels)):
            rel = f"{split}/{i:05d}.xyz"
            save_xyz(root / rel, c)
            w.writerow([rel, int(y)])
    (root / "classes.txt").write_text("\n".join(ds.class_names) + "\n", encoding="utf-8")
    return manifest


def load_dataset(root, split: str) -> Dataset:
    root = Path(root)
    manifest = root / f"{split}.csv"
    names_file = root / "classes.txt"
    coords, labels = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            coords.append(load_xyz(root / row["path"]).coords)
            labels.append(int(row["label"]))
    if not coords:
        raise DegenerateCloudError(f"{manifest}: empty dataset")
    sizes = {len(c) for c in coords}
    if len(sizes) != 1:
        raise ValueError(f"{manifest}: clouds differ in size {sorted(sizes)}")
    if names_file.exists():
        names = names_file.read_text(encoding="utf-8").split()
    else:
        names = [str(i) for i in range(max(labels) + 1)]
    return Dataset(np.stack(coords).astype(np.float32), np.asarray(labels, dtype=np.int64), names)


# --- error tables -------------------------------------------------------------


def write_error_table(path, table: dict[str, dict[int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corruption", "severity", "error"])
        for kind, per_sev in table.items():
            for sev in sorted(per_sev):
                w.writerow([kind, sev, repr(float(per_sev[sev]))])


def read_error_table(path) -> dict[str, list[float]]:
    """corruption -> errors ordered by severity."""
    raw: dict[str, dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"corruption", "severity", "error"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                raw.setdefault(row["corruption"], {})[int(row["severity"])] = float(row["error"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line_no}: bad row {row}") from None
    return {k: [v[s] for s in sorted(v)] for k, v in raw.items()}
