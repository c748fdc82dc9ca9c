"""Binary and CSV artefacts: checkpoints, kernel matrices, distilled sets,
dataset caches and result tables.  All binary numbers are little-endian."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .network import Architecture

CKPT_MAGIC = b"NTKCKPT1"
KERNEL_MAGIC = b"NTKKERN1"
_ACT_TAGS = {"relu": 0, "softplus": 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


class FormatError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_arrays(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8").ravel()
        fh.write(struct.pack("<Q", a.size))
        fh.write(a.tobytes())


def _read_exact(fh, n, what):
    b = fh.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file while reading {what}")
    return b


def _read_arrays(fh):
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
    out = []
    for i in range(count):
        (n,) = struct.unpack("<Q", _read_exact(fh, 8, f"length of array {i}"))
        out.append(np.frombuffer(_read_exact(fh, 8 * n, f"array {i}"), dtype="<f8").astype(np.float64))
    return out


def save_checkpoint(path, arch: Architecture, theta0, theta_final):
    """Header (magic, d, w, C, activation tag, temperature) then theta0 and
    theta_final as length-prefixed float64 arrays in flattening order."""
    for t in (theta0, theta_final):
        if np.shape(t) != (arch.num_params,):
            raise ValueError("parameter vector does not match the architecture")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIIBd", arch.input_dim, arch.width, arch.output_dim,
                             _ACT_TAGS[arch.activation], arch.temperature))
        _write_arrays(fh, [theta0, theta_final])
    return Path(path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        d, w, c, tag, temp = struct.unpack("<IIIBd", _read_exact(fh, 21, "header"))
        if tag not in _TAG_ACTS:
            raise FormatError(f"{path}: unknown activation tag {tag}")
        arch = Architecture(d, w, c, _TAG_ACTS[tag], temp)
        arrays = _read_arrays(fh)
    if len(arrays) != 2 or any(a.size != arch.num_params for a in arrays):
        raise FormatError(f"{path}: parameter arrays do not match the header")
    return arch, arrays[0], arrays[1]


def save_kernel(path, K, tag: str = "ntk"):
    K = np.atleast_2d(np.asarray(K, dtype="<f8"))
    t = tag.encode()
    if len(t) > 16:
        raise ValueError("kernel tag is limited to 16 bytes")
    with open(path, "wb") as fh:
        fh.write(KERNEL_MAGIC)
        fh.write(struct.pack("<QQ16s", K.shape[0], K.shape[1], t))
        fh.write(np.ascontiguousarray(K).tobytes())
    return Path(path)


def load_kernel(path):
    with open(path, "rb") as fh:
        if fh.read(8) != KERNEL_MAGIC:
            raise FormatError(f"{path}: not a kernel file")
        a, b, t = struct.unpack("<QQ16s", _read_exact(fh, 32, "header"))
        K = np.frombuffer(_read_exact(fh, 8 * a * b, "matrix"), dtype="<f8").reshape(a, b)
    return K.astype(np.float64), t.rstrip(b"\0").decode()


def save_kernel_csv(path, K):
    np.savetxt(path, np.atleast_2d(K), delimiter=",", fmt="%.17g")


def save_distilled(path, ds):
    meta = json.dumps(ds.metadata, sort_keys=True)
    np.savez(path, images=ds.images, labels=ds.labels, trainable=np.array(ds.labels_trainable),
             shape=np.array([len(ds), ds.images.shape[1], ds.labels.shape[1]]), metadata=np.array(meta))


def load_distilled(path):
    from .distill import DistilledSet
    with np.load(path) as z:
        m, d, c = z["shape"].tolist()
        ds = DistilledSet(z["images"], z["labels"], bool(z["trainable"]), json.loads(str(z["metadata"])))
    if ds.images.shape != (m, d) or ds.labels.shape != (m, c):
        raise FormatError(f"{path}: arrays do not match the recorded shape")
    return ds


def save_raw_cache(path, raw):
    np.savez(path, checksum=np.array(raw.checksum), images=raw.images, class_ids=raw.class_ids,
             split=np.array(raw.split), source=np.array(raw.source), pixel_max=np.array(raw.pixel_max))


def load_raw_cache(path, expect_checksum: str | None = None):
    from .data import RawDataset
    with np.load(path) as z:
        raw = RawDataset(z["images"], z["class_ids"], str(z["split"]), str(z["checksum"]),
                         str(z["source"]), float(z["pixel_max"]))
    if expect_checksum is not None and raw.checksum != expect_checksum:
        raise FormatError(f"{path}: cached checksum {raw.checksum[:12]} != expected {expect_checksum[:12]}")
    return raw


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return Path(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_trace(path, trace):
    return write_csv(path, ["iter", "loss", "temperature"],
                     [(i, float(l), float(t)) for i, (l, t) in enumerate(zip(trace.loss_history, trace.temperatures))])


def write_curve(path, curve):
    order = np.argsort(curve.sq_l2, kind="stable")
    rows = [(rank, int(curve.train_index[k]), int(curve.recon_index[k]), float(curve.sq_l2[k]))
            for rank, k in enumerate(order)]
    return write_csv(path, ["rank", "train_index", "recon_index", "sq_l2"], rows)
