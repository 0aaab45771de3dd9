"""Named-array container: magic 'NAR1', JSON manifest, 64-byte-aligned arrays.

Little-endian throughout. The manifest's "meta" field is caller-defined JSON;
"arrays" lists name/dtype/shape/offset for every stored array in file order.
"""

import json

import numpy as np

MAGIC = b"NAR1"
ALIGN = 64


def _pad(n):
    return (-n) % ALIGN


def save_nar(path, arrays, meta=None):
    """arrays: dict name -> ndarray (insertion order preserved on disk)."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        shape = list(np.shape(arr))  # before ascontiguousarray, which promotes 0-d
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": shape, "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob) + _pad(len(blob))
    manifest = json.dumps(
        {"format_version": 1, "meta": meta or {}, "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(manifest)).tobytes())
        f.write(manifest)
        f.write(b"\0" * _pad(4 + 8 + len(manifest)))
        for blob in blobs:
            f.write(blob)
            f.write(b"\0" * _pad(len(blob)))


def load_nar(path):
    """Returns (arrays: dict name -> ndarray, meta: dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a NAR1 container")
    mlen = int(np.frombuffer(raw[4:12], dtype="<u8")[0])
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    if manifest.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported container version")
    base = 12 + mlen + _pad(12 + mlen)
    arrays = {}
    for ent in manifest["arrays"]:
        dt = np.dtype(ent["dtype"])
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(shape)
        arrays[ent["name"]] = arr.copy()
    return arrays, manifest.get("meta", {})
