"""Binary on-disk formats.

All multi-byte fields are little-endian. Each format starts with a 4-byte
magic and a version byte:

  .fimg  "FIMG" v1, u16 channels, u16 height, u16 width, f32 payload
         (channel-major, row-major)
  .lmap  "LMAP" v1, u16 height, u16 width, u8 num_classes, u8 labels
         row-major (255 = ignore)
  .fmap  "FMAP" v1, u16 height, u16 width, f32 payload row-major
  .pmap  "PMAP" v1, u16 num_classes, u16 height, u16 width, f32 payload
         class-major
  .ckpt  "SEGC" v1, u32 config hash, u16 parameter entry count, entries,
         u16 optimizer entry count, entries, u64 iteration.  Each entry is
         u8 name length, name bytes, u8 rank, u16 dims, f32 payload.
"""

import struct

import numpy as np

from .exceptions import FormatError

_F32 = np.dtype("<f4")


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated file: wanted %d bytes, got %d" % (n, len(buf)))
    return buf


def _check_magic(fh, magic):
    got = _read_exact(fh, 4)
    if got != magic:
        raise FormatError("bad magic %r, expected %r" % (got, magic))
    (version,) = struct.unpack("<B", _read_exact(fh, 1))
    if version != 1:
        raise FormatError("unsupported version %d" % version)


def write_fimg(path, pixels):
    pixels = np.asarray(pixels)
    c, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"FIMG" + struct.pack("<BHHH", 1, c, h, w))
        fh.write(np.ascontiguousarray(pixels, dtype=_F32).tobytes())


def read_fimg(path):
    with open(path, "rb") as fh:
        _check_magic(fh, b"FIMG")
        c, h, w = struct.unpack("<HHH", _read_exact(fh, 6))
        data = np.frombuffer(_read_exact(fh, 4 * c * h * w), dtype=_F32)
    return data.reshape(c, h, w).astype(np.float64)


def write_lmap(path, labels, num_classes):
    labels = np.asarray(labels)
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"LMAP" + struct.pack("<BHHB", 1, h, w, num_classes))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_lmap(path):
    """Returns (labels, num_classes)."""
    with open(path, "rb") as fh:
        _check_magic(fh, b"LMAP")
        h, w, num_classes = struct.unpack("<HHB", _read_exact(fh, 5))
        data = np.frombuffer(_read_exact(fh, h * w), dtype=np.uint8)
    return data.reshape(h, w).copy(), num_classes


def write_fmap(path, values):
    values = np.asarray(values)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"FMAP" + struct.pack("<BHH", 1, h, w))
        fh.write(np.ascontiguousarray(values, dtype=_F32).tobytes())


def read_fmap(path):
    with open(path, "rb") as fh:
        _check_magic(fh, b"FMAP")
        h, w = struct.unpack("<HH", _read_exact(fh, 4))
        data = np.frombuffer(_read_exact(fh, 4 * h * w), dtype=_F32)
    return data.reshape(h, w).astype(np.float64)


def write_pmap(path, probs):
    probs = np.asarray(probs)
    c, h, w = probs.shape
    with open(path, "wb") as fh:
        fh.write(b"PMAP" + struct.pack("<BHHH", 1, c, h, w))
        fh.write(np.ascontiguousarray(probs, dtype=_F32).tobytes())


def read_pmap(path):
    with open(path, "rb") as fh:
        _check_magic(fh, b"PMAP")
        c, h, w = struct.unpack("<HHH", _read_exact(fh, 6))
        data = np.frombuffer(_read_exact(fh, 4 * c * h * w), dtype=_F32)
    return data.reshape(c, h, w).astype(np.float64)


def _write_entries(fh, entries):
    fh.write(struct.pack("<H", len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("ascii")
        if len(nb) > 255 or arr.ndim > 255:
            raise FormatError("entry %r too large to encode" % name)
        fh.write(struct.pack("<B", len(nb)) + nb)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<H", dim))
        fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def _read_entries(fh):
    (count,) = struct.unpack("<H", _read_exact(fh, 2))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<B", _read_exact(fh, 1))
        name = _read_exact(fh, nlen).decode("ascii")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = tuple(
            struct.unpack("<H", _read_exact(fh, 2))[0] for _ in range(rank)
        )
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(fh, 4 * size), dtype=_F32)
        entries.append((name, data.reshape(shape).astype(np.float64)))
    return entries


def write_ckpt(path, config_hash, param_entries, optim_entries, iteration):
    """param_entries / optim_entries: ordered lists of (name, array)."""
    with open(path, "wb") as fh:
        fh.write(b"SEGC" + struct.pack("<BI", 1, config_hash & 0xFFFFFFFF))
        _write_entries(fh, param_entries)
        _write_entries(fh, optim_entries)
        fh.write(struct.pack("<Q", iteration))


def read_ckpt(path):
    """Returns (config_hash, param_entries, optim_entries, iteration)."""
    with open(path, "rb") as fh:
        _check_magic(fh, b"SEGC")
        (config_hash,) = struct.unpack("<I", _read_exact(fh, 4))
        params = _read_entries(fh)
        optim = _read_entries(fh)
        (iteration,) = struct.unpack("<Q", _read_exact(fh, 8))
    return config_hash, params, optim, iteration
