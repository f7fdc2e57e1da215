"""Bit-exact checkpoint container.

One file holds a JSON metadata line plus named float64/int64 arrays with
shape headers. The layout is deterministic (no timestamps, fixed key
order), so re-running a pipeline from the same seed reproduces checkpoint
files byte for byte.

Format:
    line 1: b"CAULIFLOW-TENSORS 1\n"
    line 2: b"meta <compact JSON>\n"
    line 3: b"count <n>\n"
    per array: b"array <name> <dtype> <ndim> <d0> <d1> ...\n" then raw
    little-endian bytes, then b"\n".
"""

import json

import numpy as np

MAGIC = b"CAULIFLOW-TENSORS 1"

_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_arrays(path, arrays, meta=None):
    """Write named arrays (dict, insertion-ordered) plus a metadata dict."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(b"meta " + json.dumps(meta or {}, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(f"count {len(arrays)}\n".encode("ascii"))
        for name, arr in arrays.items():
            if " " in name or "\n" in name:
                raise ValueError(f"array name may not contain whitespace: {name!r}")
            arr = np.asarray(arr)
            if arr.dtype == np.float64:
                kind = "float64"
            elif arr.dtype == np.int64:
                kind = "int64"
            else:
                raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"array {name} {kind} {arr.ndim}{' ' if dims else ''}{dims}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes())
            fh.write(b"\n")


def load_arrays(path):
    """Read a checkpoint back as (meta dict, name -> array dict)."""
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        meta_line = fh.readline().rstrip(b"\n")
        if not meta_line.startswith(b"meta "):
            raise ValueError(f"{path}: missing meta line")
        meta = json.loads(meta_line[5:].decode("utf-8"))
        count_line = fh.readline().rstrip(b"\n")
        if not count_line.startswith(b"count "):
            raise ValueError(f"{path}: missing count line")
        count = int(count_line[6:])
        arrays = {}
        for _ in range(count):
            header = fh.readline().rstrip(b"\n").decode("ascii").split(" ")
            if header[0] != "array":
                raise ValueError(f"{path}: corrupt array header {header!r}")
            name, kind, ndim = header[1], header[2], int(header[3])
            shape = tuple(int(d) for d in header[4:4 + ndim])
            dtype = np.dtype(_DTYPES[kind])
            n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"{path}: truncated data for {name!r}")
            if fh.read(1) != b"\n":
                raise ValueError(f"{path}: missing separator after {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return meta, arrays
