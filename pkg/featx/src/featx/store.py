"""Writer for the consumer's binary feature-store format.

Layout (little-endian): magic MP4SRFS1, u32 version=1, u32 item_count,
u32 d, then per item: u16 id_len, UTF-8 id, u8 n_text (1..10), u8 n_image
(1..10), n_text*d float32 rows, n_image*d float32 rows. Items are written
in sorted id order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MP4SRFS1"
VERSION = 1
MAX_ROWS = 10


class StoreFormatError(Exception):
    pass


def item_payload_bytes(id_len: int, d: int, n_text: int, n_image: int) -> int:
    return 2 + id_len + 2 + 4 * d * (n_text + n_image)


def write_store(path, d: int, text: dict[str, np.ndarray], image: dict[str, np.ndarray]) -> int:
    """Write the store; returns the file size in bytes."""
    if set(text) != set(image):
        raise StoreFormatError("every item needs both modalities")
    size = 8 + 12
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(text), d))
        for iid in sorted(text):
            t = np.ascontiguousarray(text[iid], dtype="<f4")
            v = np.ascontiguousarray(image[iid], dtype="<f4")
            for name, m in (("text", t), ("image", v)):
                if m.ndim != 2 or m.shape[1] != d:
                    raise StoreFormatError(f"item {iid!r}: {name} matrix must be (rows, {d})")
                if not 1 <= m.shape[0] <= MAX_ROWS:
                    raise StoreFormatError(f"item {iid!r}: {name} needs 1..{MAX_ROWS} rows")
                if not np.isfinite(m).all():
                    raise StoreFormatError(f"item {iid!r}: non-finite {name} features")
            raw = iid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", t.shape[0], v.shape[0]))
            fh.write(t.tobytes())
            fh.write(v.tobytes())
            size += item_payload_bytes(len(raw), d, t.shape[0], v.shape[0])
    return size
