"""Bit-exact float I/O and 8-bit PNG helpers.

PFM layout: magic line (``Pf`` single channel, ``PF`` three channels),
dimensions line ``<width> <height>``, scale line whose sign encodes
endianness (negative = little-endian), then height rows of float32
pixels stored bottom row first.

Activation-record container: magic ``DHAR``, u32 version (=1), u32
entry count, then per entry u32 layer, step, channels, width, height
followed by the float32 payload (little-endian, channel-major,
row-major).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ActivationRecord, FeatureMap, Mask, ScalarField
from .errors import (
    DuplicateKeyError,
    HeaderError,
    TruncatedError,
    ValidationError,
)

_RECORD_MAGIC = b"DHAR"
_RECORD_VERSION = 1


# ---------------------------------------------------------------------------
# PFM


def parse_pfm_header(blob: bytes):
    """Parse a PFM header; returns (channels, width, height, little_endian, offset)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise HeaderError("PFM header truncated")
        line = blob[pos:end]
        pos = end + 1
        tokens.extend(line.split())
        if len(tokens) > 4:
            raise HeaderError("malformed PFM header")
    magic, w_tok, h_tok, scale_tok = tokens
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise HeaderError(f"not a PFM file (magic {magic!r})")
    try:
        width, height = int(w_tok), int(h_tok)
        scale = float(scale_tok)
    except ValueError as exc:
        raise HeaderError(f"malformed PFM header: {exc}") from exc
    if width < 1 or height < 1:
        raise HeaderError(f"invalid PFM dimensions {width}x{height}")
    if scale == 0.0:
        raise HeaderError("PFM scale must be nonzero")
    return channels, width, height, scale < 0, pos


def read_pfm(path) -> ScalarField:
    """Read a single-channel PFM file."""
    blob = Path(path).read_bytes()
    channels, width, height, little, offset = parse_pfm_header(blob)
    if channels != 1:
        raise HeaderError("expected single-channel PFM ('Pf'), got 'PF'")
    expected = width * height * 4
    payload = blob[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedError(
            f"PFM payload truncated: expected {expected} bytes, got {len(payload)}"
        )
    dtype = "<f4" if little else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if not np.isfinite(data).all():
        raise ValidationError(f"PFM payload of {path} contains non-finite values")
    return ScalarField(np.flipud(data.astype(np.float32)))


def write_pfm(field: ScalarField, path) -> None:
    """Write a single-channel little-endian PFM file (bottom row first)."""
    data = field.data
    if not np.isfinite(data).all():
        raise ValidationError("refusing to write non-finite values to PFM")
    header = f"Pf\n{field.width} {field.height}\n-1.0\n".encode("ascii")
    payload = np.flipud(data).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Activation record container


def write_activation_record(record: ActivationRecord, path) -> None:
    parts = [_RECORD_MAGIC, struct.pack("<II", _RECORD_VERSION, len(record.entries))]
    for (layer, step) in sorted(record.entries):
        fmap = record.entries[(layer, step)]
        parts.append(
            struct.pack("<IIIII", layer, step, fmap.channels, fmap.width, fmap.height)
        )
        parts.append(fmap.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_activation_record(path, guided_layers=None) -> ActivationRecord:
    blob = Path(path).read_bytes()
    if blob[:4] != _RECORD_MAGIC:
        raise HeaderError(f"bad activation-record magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedError("activation-record header truncated")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _RECORD_VERSION:
        raise HeaderError(f"unsupported activation-record version {version}")
    record = ActivationRecord(entries={}, guided_layers=(2, 3))
    pos = 12
    for _ in range(count):
        if pos + 20 > len(blob):
            raise TruncatedError("activation-record entry header truncated")
        layer, step, channels, width, height = struct.unpack_from("<IIIII", blob, pos)
        pos += 20
        nbytes = channels * width * height * 4
        if pos + nbytes > len(blob):
            raise TruncatedError(
                f"activation-record payload truncated at entry (layer={layer}, step={step})"
            )
        data = np.frombuffer(blob, dtype="<f4", count=channels * width * height, offset=pos)
        pos += nbytes
        if (layer, step) in record.entries:
            raise DuplicateKeyError(
                f"duplicate activation entry for (layer={layer}, step={step})"
            )
        record.add(layer, step, FeatureMap(data.reshape(channels, height, width).copy()))
    if guided_layers is not None:
        record.guided_layers = tuple(guided_layers)
    elif record.entries:
        record.guided_layers = record.layers()
    return record


# ---------------------------------------------------------------------------
# PNG


def write_mask_png(mask: Mask, path) -> None:
    Image.fromarray(mask.data * np.uint8(255), mode="L").save(path, format="PNG")


def read_mask_png(path) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return Mask((arr >= 128).astype(np.uint8))


def write_image_png(image: FeatureMap, path) -> None:
    """Write a 1- or 3-channel float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(image.data, 0.0, 1.0)
    out = np.round(arr * 255.0).astype(np.uint8)
    if image.channels == 1:
        Image.fromarray(out[0], mode="L").save(path, format="PNG")
    elif image.channels == 3:
        Image.fromarray(np.moveaxis(out, 0, 2), mode="RGB").save(path, format="PNG")
    else:
        raise ValidationError(f"PNG supports 1 or 3 channels, got {image.channels}")


def read_image_png(path) -> FeatureMap:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, 2, 0)
    return FeatureMap(arr)
