"""Bit-exact, integrity-checked files for weight bundles (.stw), masks (.stm)
and score maps (.sts).

Layout of every file::

    SHPEFT-CKPT\\n                 magic line
    {...}\\n                        one-line JSON header (sorted keys)
    <64 hex chars>\\n               sha256 of the JSON header line
    <payload>                      little-endian raw bytes

The header records ``payload_bytes`` and ``payload_sha256``; any flipped or
missing byte is therefore detected before data is returned.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .importance import ScoreMap
from .masking import Mask
from .models import ParameterRegistry, WeightBundle

MAGIC = b"SHPEFT-CKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class CorruptionError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class LengthError(CheckpointError):
    pass


class ConsistencyError(CheckpointError):
    pass


def _atomic_write(path: Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def encode(kind: str, header: dict, payload: bytes) -> bytes:
    header = dict(header, kind=kind, format_version=FORMAT_VERSION,
                  payload_bytes=len(payload), payload_sha256=hashlib.sha256(payload).hexdigest())
    line = json.dumps(_jsonable(header), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return MAGIC + line + b"\n" + hashlib.sha256(line).hexdigest().encode() + b"\n" + payload


def decode(blob: bytes, kind: str) -> tuple[dict, bytes]:
    if not blob.startswith(MAGIC):
        if len(blob) < len(MAGIC) and MAGIC.startswith(blob):
            raise LengthError("file truncated inside the magic line")
        raise CorruptionError(f"bad magic {blob[:len(MAGIC)]!r}")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise LengthError("file truncated inside the header")
    line = rest[:nl]
    digest_end = nl + 1 + 64
    if len(rest) < digest_end + 1:
        raise LengthError("file truncated inside the header digest")
    digest = rest[nl + 1:digest_end]
    if rest[digest_end:digest_end + 1] != b"\n":
        raise CorruptionError("malformed header digest line")
    if hashlib.sha256(line).hexdigest().encode() != digest:
        raise CorruptionError("header digest mismatch")
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise CorruptionError(f"unparseable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {header.get('format_version')!r}")
    if header.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} file, found {header.get('kind')!r}")
    payload = rest[digest_end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise LengthError(f"payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptionError("payload digest mismatch")
    return header, payload


def _read(path) -> bytes:
    return Path(path).read_bytes()


# -- weights -----------------------------------------------------------------


def save_bundle(bundle: WeightBundle, path) -> None:
    code = bundle.flat.dtype.str[1:]
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {bundle.flat.dtype}")
    item = _DTYPES[code].itemsize
    entries = [{"name": e.name, "shape": list(e.shape), "role": e.role, "dtype": code,
                "byte_offset": e.offset * item, "byte_length": e.size * item}
               for e in bundle.registry]
    payload = bundle.flat.astype(_DTYPES[code]).tobytes()
    _atomic_write(path, encode("weights", {"signature": bundle.signature, "entries": entries}, payload))


def load_bundle(path) -> WeightBundle:
    header, payload = decode(_read(path), "weights")
    entries = header["entries"]
    codes = {e["dtype"] for e in entries}
    if len(codes) != 1 or not codes <= set(_DTYPES):
        raise CheckpointError(f"unsupported or mixed dtypes {sorted(codes)}")
    dt = _DTYPES[codes.pop()]
    registry = ParameterRegistry.from_layout((e["name"], e["shape"], e["role"]) for e in entries)
    pos = 0
    for e, r in zip(entries, registry):
        if e["byte_offset"] != pos or e["byte_length"] != r.size * dt.itemsize:
            raise ConsistencyError(f"entry {e['name']} has non-contiguous byte range")
        pos += e["byte_length"]
    if pos != len(payload):
        raise LengthError(f"entry table covers {pos} bytes, payload has {len(payload)}")
    flat = np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("="))
    return WeightBundle(registry, flat, header.get("signature", ""))


# -- masks -------------------------------------------------------------------


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(bool), bitorder="little").tobytes()


def _unpack(raw: bytes, n: int) -> np.ndarray:
    arr = np.frombuffer(raw, dtype=np.uint8)
    bits = np.unpackbits(arr, bitorder="little")
    if bits[n:].any():
        raise ConsistencyError("non-zero pad bits")
    return bits[:n].astype(bool)


def save_mask(mask: Mask, path, signature: str = "") -> None:
    n = len(mask)
    header = {
        "n": n,
        "budget": mask.budget,
        "tau": mask.tau,
        "selected": mask.selected,
        "trainable": mask.trainable,
        "signature": signature,
        "meta": mask.meta,
    }
    _atomic_write(path, encode("mask", header, _pack(mask.bits) + _pack(mask.scope)))


def load_mask(path) -> Mask:
    header, payload = decode(_read(path), "mask")
    n = header["n"]
    nb = (n + 7) // 8
    if len(payload) != 2 * nb:
        raise LengthError(f"mask payload has {len(payload)} bytes, expected {2 * nb}")
    bits = _unpack(payload[:nb], n)
    scope = _unpack(payload[nb:], n)
    tau = header["tau"]
    mask = Mask(bits, header["budget"], float("nan") if tau is None else tau, scope, header.get("meta") or {})
    if mask.selected != header["selected"] or mask.trainable != header["trainable"]:
        raise ConsistencyError(
            f"header selected={header['selected']} but payload popcount={mask.selected}"
        )
    return mask


# -- scores ------------------------------------------------------------------


def save_scores(scores: ScoreMap, path, signature: str = "") -> None:
    header = {"n": len(scores), "score_kind": scores.kind, "meta": scores.meta, "signature": signature}
    _atomic_write(path, encode("scores", header, scores.values.astype("<f8").tobytes()))


def load_scores(path) -> ScoreMap:
    header, payload = decode(_read(path), "scores")
    if len(payload) != 8 * header["n"]:
        raise LengthError(f"scores payload has {len(payload)} bytes, expected {8 * header['n']}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ScoreMap(values, header["score_kind"], header.get("meta") or {})


def file_digest(path) -> str:
    return hashlib.sha256(_read(path)).hexdigest()


def verify(path) -> None:
    """Integrity-check any checkpoint file; raises :class:`CheckpointError`."""
    blob = _read(path)
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        kind = json.loads(rest[:nl]).get("kind") if nl > 0 else None
    except ValueError:
        kind = None
    decode(blob, kind if kind in ("weights", "mask", "scores") else "weights")
