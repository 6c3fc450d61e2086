"""Weight files: a JSON manifest followed by little-endian float32 data.

Layout::

    b"AIFW" | u32 manifest length | manifest (UTF-8 JSON) | float32 LE blob

The manifest maps every parameter name to its shape and byte offset into
the blob and carries the codec config the weights were trained with.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"AIFW"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def encode_weights(params: dict[str, np.ndarray], config: Optional[dict] = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"format": FORMAT_VERSION, "dtype": "float32-le",
                "config": config, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def decode_weights(raw: bytes) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    if 8 + mlen > len(raw):
        raise WeightFileError("truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen])
    except ValueError as exc:
        raise WeightFileError("unreadable manifest") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise WeightFileError(f"unsupported weight format {manifest.get('format')}")
    blob = raw[8 + mlen :]
    params = {}
    for e in manifest["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(blob) or n != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise WeightFileError(f"tensor {e['name']} out of bounds")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, manifest.get("config")


def save_weights(path: Union[str, Path], params: dict[str, np.ndarray],
                 config: Optional[dict] = None):
    Path(path).write_bytes(encode_weights(params, config))


def load_weights(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    return decode_weights(Path(path).read_bytes())


def weights_digest(params: dict[str, np.ndarray]) -> bytes:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.digest()
