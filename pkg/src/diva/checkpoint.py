"""Binary checkpoint format.

Layout (all integers little-endian unsigned 32-bit):
  magic "DIVA" | format version | tensor count |
  per tensor: name length | UTF-8 name | rank | dims... | float32 LE values

Values are stored at 32-bit precision; save/load/save round-trips are
byte-identical. The experiment config fingerprint rides along as a small
tensor of SHA-256 prefix bytes.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"DIVA"
VERSION = 1
FINGERPRINT_NAME = "config.fingerprint"


class CheckpointError(IOError):
    pass


def config_fingerprint(text):
    """First 8 SHA-256 bytes of the config description, as float32 values."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()[:8]
    return np.array([float(b) for b in digest], dtype=np.float64)


def save_checkpoint(path, arrays, fingerprint=None):
    """Write named float arrays; iteration order is sorted by name so the
    file bytes are a pure function of the contents."""
    items = dict(arrays)
    if fingerprint is not None:
        items[FINGERPRINT_NAME] = np.asarray(fingerprint, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(items)))
        for name in sorted(items):
            arr = np.ascontiguousarray(items[name], dtype=np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path, expected_names=None):
    """Load named arrays (as float64); optionally validate the name set.

    Returns (arrays, fingerprint or None).
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"format version {version}; expected {VERSION}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * size, f"values of {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    fingerprint = arrays.pop(FINGERPRINT_NAME, None)
    if expected_names is not None:
        expected = set(expected_names)
        got = set(arrays)
        if got != expected:
            raise CheckpointError(
                f"tensor names do not match: unexpected={sorted(got - expected)}, "
                f"missing={sorted(expected - got)}; expected names: {sorted(expected)}"
            )
    return arrays, fingerprint
