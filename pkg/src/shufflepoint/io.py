"""Point-cloud and checkpoint file formats.

Binary cloud (``.spnc``)::

    b"SPNC" | u32 version=1 | u32 N | u32 F | u8 label_mode (0 none, 1 cloud, 2 point)
    | f64[N*F] row-major | i64 labels (0, 1 or N of them)

Checkpoint (``.spnm``)::

    b"SPNM" | u32 version | u32 len | UTF-8 JSON header (keys sorted)
    | repeated: u32 name_len | name | u32 rank | u32 dims[rank] | f64 payload

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import PointCloud

CLOUD_MAGIC = b"SPNC"
CLOUD_VERSION = 1
MODEL_MAGIC = b"SPNM"
MODEL_VERSION = 1
_LABEL_MODES = {"none": 0, "cloud": 1, "point": 2}


def read_text_cloud(path, labels: str = "none") -> PointCloud:
    """Whitespace-separated ``x y z [extra...] [label]`` rows; ``#`` starts a comment.

    ``labels="point"`` takes the last column as per-point labels, ``"cloud"``
    takes it as a per-cloud label (it must then be constant).
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise InputError(f"{path}: no points")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InputError(f"{path}: rows have differing column counts")
    arr = np.array(rows, dtype=np.float64)
    if labels == "none":
        return PointCloud(arr)
    lab = arr[:, -1]
    if not np.array_equal(lab, np.round(lab)):
        raise InputError(f"{path}: label column is not integral")
    lab = lab.astype(np.int64)
    if labels == "point":
        return PointCloud(arr[:, :-1], lab)
    if labels == "cloud":
        if (lab != lab[0]).any():
            raise InputError(f"{path}: per-cloud label column is not constant")
        return PointCloud(arr[:, :-1], int(lab[0]))
    raise ValueError(f"unknown label mode {labels!r}")


def write_text_cloud(path, cloud: PointCloud) -> None:
    cols = [cloud.data]
    if cloud.label_mode == "point":
        cols.append(cloud.labels[:, None].astype(np.float64))
    elif cloud.label_mode == "cloud":
        cols.append(np.full((cloud.n_points, 1), float(cloud.labels)))
    arr = np.hstack(cols)
    n_lab = 0 if cloud.label_mode == "none" else 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {cloud.n_points} points, {cloud.n_channels} channels, labels={cloud.label_mode}\n")
        for row in arr:
            vals = [repr(float(v)) for v in row[:arr.shape[1] - n_lab]]
            if n_lab:
                vals.append(str(int(row[-1])))
            fh.write(" ".join(vals) + "\n")


def encode_cloud(cloud: PointCloud) -> bytes:
    mode = _LABEL_MODES[cloud.label_mode]
    n, f = cloud.data.shape
    parts = [CLOUD_MAGIC, struct.pack("<IIIB", CLOUD_VERSION, n, f, mode),
             np.ascontiguousarray(cloud.data, dtype="<f8").tobytes()]
    if mode == 1:
        parts.append(struct.pack("<q", cloud.labels))
    elif mode == 2:
        parts.append(np.ascontiguousarray(cloud.labels, dtype="<i8").tobytes())
    return b"".join(parts)


def decode_cloud(buf: bytes, source: str = "<bytes>") -> PointCloud:
    if buf[:4] != CLOUD_MAGIC:
        raise InputError(f"{source}: not a binary point cloud (bad magic)")
    if len(buf) < 17:
        raise InputError(f"{source}: truncated header")
    version, n, f, mode = struct.unpack_from("<IIIB", buf, 4)
    if version != CLOUD_VERSION:
        raise InputError(f"{source}: unsupported version {version}")
    if mode not in (0, 1, 2):
        raise InputError(f"{source}: bad label mode {mode}")
    off = 17
    n_lab = {0: 0, 1: 1, 2: n}[mode]
    if len(buf) != off + 8 * n * f + 8 * n_lab:
        raise InputError(f"{source}: size {len(buf)} does not match header (N={n}, F={f})")
    data = np.frombuffer(buf, dtype="<f8", count=n * f, offset=off).reshape(n, f).astype(np.float64)
    off += 8 * n * f
    labels = None
    if mode:
        lab = np.frombuffer(buf, dtype="<i8", count=n_lab, offset=off).astype(np.int64)
        labels = int(lab[0]) if mode == 1 else lab
    return PointCloud(data, labels)


def write_binary_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_cloud(cloud))


def read_binary_cloud(path) -> PointCloud:
    return decode_cloud(Path(path).read_bytes(), str(path))


def read_cloud(path, labels: str = "cloud") -> PointCloud:
    """Dispatch on content: binary clouds carry their own label mode."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == CLOUD_MAGIC:
        return read_binary_cloud(path)
    return read_text_cloud(path, labels)


def read_cloud_dir(path, labels: str = "cloud") -> list[PointCloud]:
    """All ``.spnc`` / ``.txt`` / ``.xyz`` clouds in a directory, sorted by name."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if path.is_file():
        return [read_cloud(path, labels)]
    files = sorted(p for p in path.iterdir() if p.suffix in (".spnc", ".txt", ".xyz"))
    if not files:
        raise InputError(f"{path}: no point-cloud files found")
    return [read_cloud(p, labels) for p in files]


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(text)), text]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MODEL_MAGIC:
        raise InputError(f"{source}: not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise InputError(f"{source}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    tensors: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off) \
                .reshape(dims).astype(np.float64)
            off += 8 * count
    except (struct.error, ValueError) as exc:
        raise InputError(f"{source}: truncated checkpoint ({exc})") from None
    return header, tensors


def save_checkpoint(path, model) -> None:
    """Write ``model`` (config, kind, seed, parameters and BN statistics)."""
    header = {"kind": model.kind, "config": model.cfg.to_dict(), "seed": model.seed,
              "dtype": model.dtype.name}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(header, model.state_dict()))
    os.replace(tmp, path)


def load_checkpoint(path):
    from .model import ModelConfig, build_model

    header, tensors = decode_checkpoint(Path(path).read_bytes(), str(path))
    model = build_model(header["kind"], ModelConfig.from_dict(header["config"]), header["seed"])
    model.astype(header.get("dtype", "float64"))
    model.load_state_dict(tensors)
    return model
