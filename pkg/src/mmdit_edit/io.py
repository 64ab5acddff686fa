"""Binary and image formats used for fixtures, dumps and checkpoints.

* Matrix blob: ``<u4 rows><u4 cols>`` then ``rows*cols`` little-endian float64, row-major.
* Spatial maps: binary 16-bit PGM (``P5``, maxval 65535, big-endian samples).
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError

_HEADER = struct.Struct("<II")


def matrix_to_bytes(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"matrix blob needs a 2-D array, got {m.shape}")
    return _HEADER.pack(*m.shape) + m.astype("<f8").tobytes(order="C")


def matrix_from_bytes(buf, offset=0):
    """Decode one blob starting at ``offset``; returns ``(matrix, next_offset)``."""
    rows, cols = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    n = rows * cols
    end = offset + 8 * n
    if end > len(buf):
        raise ShapeError(f"truncated matrix blob: need {end} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset)
    return data.reshape(rows, cols).astype(np.float64), end


def write_matrix(path, m):
    Path(path).write_bytes(matrix_to_bytes(m))


def read_matrix(path):
    buf = Path(path).read_bytes()
    m, end = matrix_from_bytes(buf)
    if end != len(buf):
        raise ShapeError(f"{path}: {len(buf) - end} trailing bytes after matrix blob")
    return m


def write_pgm(path, spatial, max_value):
    """Write a 16-bit PGM; values are divided by ``max_value`` and clipped to [0, 1]."""
    spatial = np.asarray(spatial, dtype=np.float64)
    if spatial.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D map, got {spatial.shape}")
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    h, w = spatial.shape
    scaled = np.rint(np.clip(spatial / max_value, 0.0, 1.0) * 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + scaled.tobytes())


def read_pgm(path, max_value=1.0):
    """Inverse of :func:`write_pgm` (up to 16-bit quantisation)."""
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval * max_value


def dump_json(obj):
    """Canonical JSON text (sorted keys, fixed separators) so reports compare byte-for-byte."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).write_text(dump_json(obj))


def write_trajectory(directory, states, meta=None):
    """Dump a trajectory as ``state_XXXX.bin`` blobs plus ``manifest.json``.

    ``states`` is a sequence of objects with ``latent`` and ``t`` attributes.
    ``meta`` carries run parameters (seeds, gamma, eta_rev) into the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, state in enumerate(states):
        name = f"state_{i:04d}.bin"
        write_matrix(directory / name, state.latent)
        files.append(name)
    manifest = {"knots": [float(s.t) for s in states], "files": files}
    manifest.update(meta or {})
    write_json(directory / "manifest.json", manifest)
    return manifest


def read_trajectory(directory):
    """Return ``(knots, latents, manifest)`` from a directory written by :func:`write_trajectory`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    latents = [read_matrix(directory / f) for f in manifest["files"]]
    return manifest["knots"], latents, manifest
