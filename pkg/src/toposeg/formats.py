"""File formats: images, flat key/value configs, CSV/JSON artifacts, checkpoints.

Byte layouts are documented in FORMATS.md at the repository root.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidConfig

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


# -- images -----------------------------------------------------------------


def read_rgb(path) -> np.ndarray:
    """Read a PNG or PPM file as an ``(H, W, 3)`` uint8 array."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    fmt = "PPM" if Path(path).suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(img, "RGB").save(path, format=fmt)


def read_gray(path) -> np.ndarray:
    """Read a single-channel PGM (8/16-bit) or PNG as an integer array."""
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            raise ValueError(f"{path}: expected a single-channel image, got mode {im.mode}")
        return np.array(im).astype(np.int64)


def write_gray(path, img: np.ndarray, bits: int = 8) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {img.shape}")
    top = (1 << bits) - 1
    if img.min(initial=0) < 0 or img.max(initial=0) > top:
        raise ValueError(f"values outside 0..{top}")
    fmt = "PNG" if Path(path).suffix.lower() == ".png" else "PPM"
    if bits == 8:
        Image.fromarray(img.astype(np.uint8), "L").save(path, format=fmt)
    elif bits == 16:
        Image.fromarray(img.astype(np.uint16)).save(path, format=fmt)
    else:
        raise ValueError("bits must be 8 or 16")


# -- flat key/value config ----------------------------------------------------


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"line {lineno}: empty key")
        if key in out:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_flat_config(values: Mapping[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(_fmt_scalar(v) for v in value)
        else:
            value = _fmt_scalar(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_floats(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise InvalidConfig(f"{key}: expected comma-separated numbers, got {raw!r}") from None


def config_ints(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise InvalidConfig(f"{key}: expected comma-separated integers, got {raw!r}") from None


def config_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise InvalidConfig(f"{key}: expected a number, got {raw!r}") from None


def config_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"{key}: expected an integer, got {raw!r}") from None


def config_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise InvalidConfig(f"{key}: expected true/false, got {raw!r}")


# -- CSV / JSON ------------------------------------------------------------------


def csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays in the versioned flat binary layout."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    try:
        return _parse_checkpoint(blob, path)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(blob: bytes, path) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated data for tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
