"""On-disk formats: grid text files, P6 heatmaps, checkpoints and metric CSVs.

Grid file::

    # axis1 <lo> <hi> <n>
    # axis2 <lo> <hi> <n>
    v,v,v,...          one row per axis1 index, axis2 varying fastest

A third axis, when present, is declared the same way and the rows then run
over (axis1, axis2) with axis3 varying fastest. Numbers use 17 significant
digits so parsing returns the exact doubles written.

Checkpoint container (all integers little-endian)::

    b"NARGCKPT\\n"            9-byte magic
    u64                       header length in bytes
    header                    UTF-8 JSON, sorted keys, no whitespace
    payload                   float64 LE arrays back to back, in key-table order

The header's ``keys`` entry is the fixed-order key table: ``[name, shape,
offset]`` triples, offsets counted in float64 elements from the payload start.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"NARGCKPT\n"


def fmt(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# grids


@dataclass
class GridFile:
    axes: list[tuple[float, float, int]]  # (lo, hi, n) per axis
    values: np.ndarray  # shape (n1, n2[, n3])

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        shape = tuple(a[2] for a in self.axes)
        if self.values.shape != shape:
            raise ValueError(f"grid values shape {self.values.shape} does not match axes {shape}")

    @classmethod
    def from_bounds(cls, bounds, values) -> "GridFile":
        values = np.asarray(values, dtype=np.float64)
        axes = [(float(lo), float(hi), int(n)) for (lo, hi), n in zip(bounds, values.shape)]
        return cls(axes, values)

    def dumps(self) -> str:
        lines = [f"# axis{i + 1} {fmt(lo)} {fmt(hi)} {n}" for i, (lo, hi, n) in enumerate(self.axes)]
        rows = self.values.reshape(-1, self.values.shape[-1])
        lines.extend(",".join(fmt(v) for v in row) for row in rows)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "GridFile":
        axes, rows = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) != 4 or not parts[0].startswith("axis"):
                    raise ValueError(f"bad grid header line: {line!r}")
                axes.append((float(parts[1]), float(parts[2]), int(parts[3])))
            else:
                rows.append([float(v) for v in line.split(",")])
        shape = tuple(a[2] for a in axes)
        expect_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        if len(rows) != expect_rows or any(len(r) != shape[-1] for r in rows):
            raise ValueError(f"grid body does not match declared dimensions {shape}")
        return cls(axes, np.asarray(rows, dtype=np.float64).reshape(shape))

    @classmethod
    def read(cls, path) -> "GridFile":
        return cls.loads(Path(path).read_text(encoding="ascii"))


# ---------------------------------------------------------------------------
# heatmaps

_RED = np.array([178.0, 24.0, 43.0])
_BLUE = np.array([33.0, 102.0, 172.0])
_WHITE = np.array([255.0, 255.0, 255.0])
MASK_GRAY = (128, 128, 128)


def diverging_palette() -> np.ndarray:
    """256 RGB entries: red (0) -> white (127, 128) -> blue (255)."""
    pal = np.empty((256, 3))
    for i in range(128):
        t = (127 - i) / 127.0
        pal[i] = _WHITE * (1 - t) + _RED * t
    for i in range(128, 256):
        t = (i - 128) / 127.0
        pal[i] = _WHITE * (1 - t) + _BLUE * t
    return np.rint(pal).astype(np.uint8)


PALETTE = diverging_palette()


def render_heatmap(values: np.ndarray, mask: np.ndarray | None = None, vmax: float | None = None) -> bytes:
    """P6 image of a 2-D grid: axis1 runs left to right, axis2 bottom to top.

    Values are scaled symmetrically by ``vmax`` (default: largest in-mask
    magnitude) so zero is white; negative is red, positive blue. Cells outside
    ``mask`` are mid-gray.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("heatmaps need a 2-D grid")
    inside = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if vmax is None:
        vmax = float(np.abs(v[inside]).max()) if inside.any() else 0.0
    scaled = np.zeros_like(v) if vmax == 0 else np.clip(v / vmax, -1.0, 1.0)
    idx = np.rint((scaled + 1.0) * 127.5).astype(np.int64)
    rgb = PALETTE[idx]
    rgb[~inside] = MASK_GRAY
    img = rgb.transpose(1, 0, 2)[::-1]  # rows: axis2 descending; columns: axis1
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_heatmap(path, values, mask=None, vmax=None) -> None:
    Path(path).write_bytes(render_heatmap(values, mask, vmax))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    run_id: str
    session: str
    epoch: int
    config_digest: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def dumps(self) -> bytes:
        keys, chunks, offset = [], [], 0
        for name, arr in self.arrays.items():
            a = np.asarray(arr, dtype="<f8")
            keys.append([name, list(a.shape), offset])
            chunks.append(a.tobytes())
            offset += a.size
        header = {
            "format": 1,
            "run_id": self.run_id,
            "session": self.session,
            "epoch": self.epoch,
            "config_digest": self.config_digest,
            "meta": self.meta,
            "keys": keys,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def loads(cls, raw: bytes) -> "Checkpoint":
        if not raw.startswith(CKPT_MAGIC):
            raise ValueError("not a checkpoint file (bad magic)")
        pos = len(CKPT_MAGIC)
        (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
        pos += 8
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        payload = np.frombuffer(raw[pos + hlen :], dtype="<f8")
        arrays = {}
        for name, shape, offset in header["keys"]:
            size = int(np.prod(shape))
            if offset + size > payload.size:
                raise ValueError(f"checkpoint payload truncated at key {name!r}")
            arrays[name] = payload[offset : offset + size].reshape(shape).astype(np.float64)
        return cls(header["run_id"], header["session"], header["epoch"], header["config_digest"], arrays, header["meta"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# metric logs

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "test_acc")


@dataclass
class MetricLog:
    rows: list[dict] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def append(self, row: dict, wall_time: float = 0.0) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("metric rows must have strictly increasing epochs")
        for k in ("train_acc", "val_acc", "test_acc"):
            if not 0.0 <= row[k] <= 1.0:
                raise ValueError(f"{k}={row[k]} outside [0, 1]")
        self.rows.append({k: row[k] for k in METRIC_COLUMNS})
        self.wall_time.append(wall_time)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def dumps(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [fmt(r[k]) for k in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    def write_timing(self, path) -> None:
        lines = ["epoch,wall_time"] + [f"{r['epoch']},{t:.3f}" for r, t in zip(self.rows, self.wall_time)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "MetricLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metric header {reader.fieldnames}")
        log = cls()
        for r in reader:
            log.append({k: int(v) if k == "epoch" else float(v) for k, v in r.items()})
        return log

    @classmethod
    def read(cls, path) -> "MetricLog":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="ascii")
