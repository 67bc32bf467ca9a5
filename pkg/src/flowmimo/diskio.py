"""Single-file binary serialization: one JSON header line + raw array bytes.

Layout: utf-8 JSON dict on the first line (ending with \\n), containing an
``__arrays__`` manifest of (name, dtype, shape) entries, followed by the
concatenated C-order bytes of each array in manifest order.  Headers are
written with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json

import numpy as np


def write_blob(path, header: dict, arrays: dict) -> None:
    """Write a header dict plus named arrays to ``path``.

    Header values must be JSON-serializable; array names must not collide
    with the reserved ``__arrays__`` key.
    """
    manifest = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        manifest.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
    head = dict(header)
    head["__arrays__"] = manifest
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8") + b"\n")
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_blob(path):
    """Read back (header, arrays) written by write_blob."""
    with open(path, "rb") as fh:
        head = json.loads(fh.readline().decode("utf-8"))
        manifest = head.pop("__arrays__")
        arrays = {}
        for entry in manifest:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"truncated array {entry['name']} in {path}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return head, arrays
