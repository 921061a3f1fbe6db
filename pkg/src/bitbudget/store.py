"""File-backed weight store: manifest + raw tensors, column-chunk units, unit stats."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

MANIFEST_NAME = "manifest.json"

_LAYER_RE = re.compile(r"^layers\.(\d+)\.")


class StoreError(Exception):
    """Raised when a model store is missing, malformed, or inconsistent."""


@dataclass
class ManifestEntry:
    name: str
    rows: int
    cols: int
    file: str
    dtype: str = "f32"


@dataclass
class ModelStore:
    """Ordered set of named dense f32 matrices. Read-only after load."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.tensors:
            raise StoreError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            raise StoreError(f"tensor {name!r} must be a non-empty 2-D matrix")
        self.tensors[name] = arr

    def copy(self) -> "ModelStore":
        out = ModelStore()
        for name, arr in self.tensors.items():
            out.tensors[name] = arr.copy()
        return out


def _tensor_filename(name: str) -> str:
    return name + ".bin"


def save_model(store: ModelStore, store_dir: str) -> None:
    """Write manifest.json plus one little-endian f32 row-major .bin per tensor."""
    os.makedirs(store_dir, exist_ok=True)
    entries = []
    for name, arr in store.tensors.items():
        fname = _tensor_filename(name)
        arr.astype("<f4", copy=False).tofile(os.path.join(store_dir, fname))
        entries.append(
            {"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]),
             "file": fname, "dtype": "f32"}
        )
    manifest = {"version": 1, "entries": entries}
    with open(os.path.join(store_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_model(store_dir: str) -> ModelStore:
    """Load a store directory; validates names, shapes, and file sizes."""
    mpath = os.path.join(store_dir, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise StoreError(f"no {MANIFEST_NAME} in {store_dir}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    store = ModelStore()
    seen: set[str] = set()
    for entry in manifest.get("entries", []):
        name = entry["name"]
        if name in seen:
            raise StoreError(f"duplicate tensor name {name!r} in manifest")
        seen.add(name)
        rows, cols = int(entry["rows"]), int(entry["cols"])
        if rows <= 0 or cols <= 0:
            raise StoreError(f"tensor {name!r} has empty shape {rows}x{cols}")
        if entry.get("dtype", "f32") != "f32":
            raise StoreError(f"tensor {name!r}: unsupported dtype {entry['dtype']!r}")
        path = os.path.join(store_dir, entry["file"])
        if not os.path.isfile(path):
            raise StoreError(f"tensor {name!r}: missing file {entry['file']}")
        expect = rows * cols * 4
        actual = os.path.getsize(path)
        if actual != expect:
            raise StoreError(
                f"tensor {name!r}: file {entry['file']} has {actual} bytes, expected {expect}"
            )
        data = np.fromfile(path, dtype="<f4").reshape(rows, cols)
        store.tensors[name] = data
    return store


def store_hash(store: ModelStore) -> str:
    """64-bit FNV-1a over concatenated tensor bytes in manifest order, as hex."""
    h = 0xCBF29CE484222325
    for arr in store.tensors.values():
        for b in arr.astype("<f4", copy=False).tobytes():
            h ^= b
            h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def parse_structure(name: str) -> tuple[int, bool, bool]:
    """(layer_index, is_attention, is_mlp) from a tensor name.

    Names of the form ``layers.{i}.{attn|mlp}.{proj}`` carry a layer index;
    anything else gets index 0 and both flags false.
    """
    m = _LAYER_RE.match(name)
    if m is None:
        return 0, False, False
    return int(m.group(1)), "attn" in name, "mlp" in name


def is_quantizable(name: str) -> bool:
    """Projection matrices inside transformer blocks; embeddings and heads are not."""
    layer, attn, mlp = parse_structure(name)
    return attn or mlp


@dataclass
class WeightUnit:
    """One column chunk of one weight matrix; the atomic allocation target."""

    tensor_name: str
    layer_index: int
    is_attention: bool
    is_mlp: bool
    chunk_index: int
    col_start: int
    col_end: int
    weights: np.ndarray  # (rows, col_end - col_start) view into the store tensor

    @property
    def n(self) -> int:
        return int(self.weights.size)

    @property
    def uid(self) -> str:
        return f"{self.tensor_name}:{self.chunk_index}"


def partition_units(
    store: ModelStore, chunk_size: int, names: list[str] | None = None
) -> list[WeightUnit]:
    """Tile each tensor's columns into chunks of width `chunk_size` (last may be short).

    Units are ordered by (layer_index, tensor_name, chunk_index).
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    selected = store.names if names is None else list(names)
    keyed = sorted(selected, key=lambda nm: (parse_structure(nm)[0], nm))
    units: list[WeightUnit] = []
    for name in keyed:
        arr = store.tensors[name]
        layer, attn, mlp = parse_structure(name)
        cols = arr.shape[1]
        for ci, start in enumerate(range(0, cols, chunk_size)):
            end = min(start + chunk_size, cols)
            units.append(
                WeightUnit(
                    tensor_name=name,
                    layer_index=layer,
                    is_attention=attn,
                    is_mlp=mlp,
                    chunk_index=ci,
                    col_start=start,
                    col_end=end,
                    weights=arr[:, start:end],
                )
            )
    return units


@dataclass
class WeightStats:
    mean: float
    std: float
    abs_mean: float
    sparsity: float
    outlier_frac: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.mean, self.std, self.abs_mean, self.sparsity, self.outlier_frac]
        )


def unit_stats(unit: WeightUnit) -> WeightStats:
    """Distributional features of one unit.

    std is the population standard deviation; sparsity counts |w| < 1e-6;
    outlier_frac counts |w| > 0.5 * P99 where P99 is the nearest-rank 99th
    percentile of |w|.
    """
    w = unit.weights.astype(np.float64).ravel()
    n = w.size
    mean = float(w.mean())
    std = float(np.sqrt(np.maximum(np.mean(w * w) - mean * mean, 0.0)))
    aw = np.abs(w)
    abs_mean = float(aw.mean())
    sparsity = float(np.count_nonzero(aw < 1e-6) / n)
    rank = int(np.ceil(0.99 * n))  # nearest-rank, 1-based
    p99 = float(np.sort(aw)[rank - 1])
    outlier_frac = float(np.count_nonzero(aw > 0.5 * p99) / n)
    return WeightStats(mean, std, abs_mean, sparsity, outlier_frac)
