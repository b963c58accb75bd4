"""Binary checkpoint files.

Layout: ``b"ADNN"``, u32 format version, u32 header length, UTF-8 JSON
header, then little-endian float64 blocks (standardiser mean, std, and each
layer's weights and biases in declared order), then a u32 CRC-32 of every
preceding byte.
"""
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ArchitectureSpec, NetworkError, NetworkParams, Standardizer, param_shapes

MAGIC = b"ADNN"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(NetworkError):
    pass


def checkpoint_bytes(params: NetworkParams) -> bytes:
    header = {
        "spec": params.spec.to_dict(),
        "n_classes": params.n_classes,
        "label_names": list(params.label_names),
        "standardizer_shape": list(params.standardizer.mean.shape),
        "blocks": [list(a.shape) for a in params.arrays()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    for arr in (params.standardizer.mean, params.standardizer.std, *params.arrays()):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: NetworkParams, path) -> None:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    tmp.replace(path)


def load_checkpoint(path) -> NetworkParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["spec"])
        names = header["label_names"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    if header.get("n_classes") != len(names):
        raise CheckpointError(f"{path}: class count does not match label names")
    expected = [s for pair in param_shapes(spec, len(names)) for s in pair]
    if [tuple(b) for b in header["blocks"]] != [tuple(s) for s in expected]:
        raise CheckpointError(f"{path}: parameter shapes inconsistent with architecture")
    shapes = [spec.input_shape, spec.input_shape, *expected]
    offset = _PREFIX.size + head_len
    payload_end = len(data) - 4
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if offset + 8 * n > payload_end:
            raise CheckpointError(f"{path}: truncated parameter block")
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += 8 * n
    if offset != payload_end:
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise CheckpointError(f"{path}: non-finite parameters")
    mean, std, *rest = arrays
    return NetworkParams(spec, Standardizer(mean, std), rest[0::2], rest[1::2], names)
