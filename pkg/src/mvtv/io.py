"""Bit-exact persistence of measure-valued images (.mvi container).

Layout: magic line ``MVI1``, a 4-byte little-endian header length, the JSON
header, then the raw float64 little-endian payload (voxel-major, cell index
fastest).  The metric space is stored as its construction tag and rebuilt
deterministically on read; finite spaces keep their distance matrix in the
tag.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .image_grid import GridSpec
from .metric_space import space_from_tag
from .models import MeasureImage

__all__ = ["MviError", "write_mvi", "read_mvi", "write_gt", "read_gt"]

MAGIC = b"MVI1\n"
FORMAT_VERSION = 1
SIMPLEX_TOL = 1e-6


class MviError(Exception):
    """Malformed, truncated or otherwise unreadable .mvi content."""


def write_mvi(img: MeasureImage, path) -> None:
    """Serialize an image; write followed by read is bitwise exact."""
    header = {
        "format_version": FORMAT_VERSION,
        "shape": list(img.grid.shape),
        "spacing": img.grid.spacing,
        "space": img.space.tag(),
        "l": img.space.l,
        "endianness": "little",
        "dtype": "f64",
    }
    payload = np.ascontiguousarray(img.values, dtype="<f8").tobytes()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(payload)
    except OSError as exc:
        raise MviError(f"{path}: {exc}") from exc


def read_mvi(path) -> MeasureImage:
    """Read and validate an image; the space is rebuilt from its tag."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MviError(f"{path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise MviError(f"{path}: not an MVI container (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise MviError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise MviError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MviError(f"{path}: malformed header: {exc}") from exc
    off += hlen

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise MviError(f"{path}: unsupported format_version {version!r}")
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = float(header.get("spacing", 1.0))
        l = int(header["l"])
        space = space_from_tag(header["space"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MviError(f"{path}: invalid header field: {exc}") from exc
    if space.l != l:
        raise MviError(f"{path}: header l={l} does not match the space (l={space.l})")

    grid = GridSpec(shape, spacing)
    expect = 8 * grid.n * l
    payload = blob[off:]
    if len(payload) != expect:
        raise MviError(
            f"{path}: payload holds {len(payload)} bytes, expected {expect}")
    values = np.frombuffer(payload, dtype="<f8").astype(float).reshape(shape + (l,))

    img = MeasureImage(values, grid, space)
    try:
        img.validate(tol=SIMPLEX_TOL)
    except ValueError as exc:
        raise MviError(f"{path}: {exc}") from exc
    return img


def write_gt(gt, info: dict, path) -> None:
    """Ground-truth sidecar: per-voxel unit vectors plus phantom metadata."""
    doc = {
        "peaks": [[list(map(float, d)) for d in dirs] for dirs in gt],
        "info": info,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise MviError(f"{path}: {exc}") from exc


def read_gt(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise MviError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MviError(f"{path}: malformed ground truth: {exc}") from exc
    gt = [[np.asarray(d, dtype=float) for d in dirs] for dirs in doc["peaks"]]
    return gt, doc.get("info", {})
