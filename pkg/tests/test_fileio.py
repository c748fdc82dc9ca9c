import struct

import numpy as np
import pytest

from ntkrecon.attack import AttackTrace, ReconstructionSet
from ntkrecon.data import RawDataset
from ntkrecon.distill import DistilledSet
from ntkrecon.fileio import (FormatError, load_checkpoint, load_distilled, load_kernel, load_raw_cache, read_csv,
                             save_checkpoint, save_distilled, save_kernel, save_kernel_csv, save_raw_cache,
                             write_csv, write_curve, write_trace)
from ntkrecon.metrics import ReconstructionCurve
from ntkrecon.network import Architecture, init_params


def test_checkpoint_roundtrip(tmp_path):
    arch = Architecture(5, 3, 2, "softplus", 37.5)
    t0, t1 = init_params(arch, 0), init_params(arch, 1)
    save_checkpoint(tmp_path / "c.ckpt", arch, t0, t1)
    a, u0, u1 = load_checkpoint(tmp_path / "c.ckpt")
    assert a == arch
    np.testing.assert_array_equal(u0, t0)
    np.testing.assert_array_equal(u1, t1)


def test_checkpoint_layout_is_little_endian_f8(tmp_path):
    arch = Architecture(1, 1, 1)
    t = np.arange(arch.num_params, dtype=float)
    save_checkpoint(tmp_path / "c.ckpt", arch, t, t)
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"NTKCKPT1"
    assert struct.unpack("<IIIBd", raw[8:29]) == (1, 1, 1, 0, 1.0)
    assert struct.unpack("<I", raw[29:33]) == (2,)
    assert struct.unpack("<Q", raw[33:41]) == (arch.num_params,)
    assert np.frombuffer(raw[41:41 + 8 * arch.num_params], "<f8").tolist() == t.tolist()


def test_checkpoint_errors(tmp_path):
    arch = Architecture(2, 2, 1)
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x", arch, np.zeros(3), np.zeros(3))
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "ok", arch, np.zeros(arch.num_params), np.zeros(arch.num_params))
    data = (tmp_path / "ok").read_bytes()
    (tmp_path / "trunc").write_bytes(data[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "trunc")


def test_kernel_roundtrip(tmp_path, rng):
    K = rng.standard_normal((3, 4))
    save_kernel(tmp_path / "k.bin", K, "empirical")
    K2, tag = load_kernel(tmp_path / "k.bin")
    np.testing.assert_array_equal(K2, K)
    assert tag == "empirical"
    save_kernel_csv(tmp_path / "k.csv", K)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "k.csv", delimiter=","), K)
    with pytest.raises(ValueError):
        save_kernel(tmp_path / "k2.bin", K, "x" * 17)


def test_distilled_roundtrip(tmp_path, rng):
    ds = DistilledSet(rng.standard_normal((4, 6)), rng.standard_normal((4, 2)), True,
                      {"loss": "rkip", "kernel": "analytic", "seed": 3})
    save_distilled(tmp_path / "d.npz", ds)
    back = load_distilled(tmp_path / "d.npz")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.labels_trainable and back.metadata == ds.metadata


def test_raw_cache_checksum(tmp_path):
    raw = RawDataset(np.zeros((2, 4), np.uint8), np.array([0, 1]), "train", "abc123", "mnist")
    save_raw_cache(tmp_path / "r.npz", raw)
    assert load_raw_cache(tmp_path / "r.npz", "abc123").checksum == "abc123"
    with pytest.raises(FormatError):
        load_raw_cache(tmp_path / "r.npz", "zzz")


def test_csv_writers(tmp_path):
    c = ReconstructionCurve(np.array([2, 0]), np.array([1, 3]), np.array([0.5, 0.25]))
    rows = read_csv(write_curve(tmp_path / "c.csv", c))
    assert [(r["rank"], r["train_index"], r["recon_index"], float(r["sq_l2"])) for r in rows] == \
        [("0", "0", "3", 0.25), ("1", "2", "1", 0.5)]
    r = ReconstructionSet(np.zeros((1, 2)), np.zeros((1, 1)))
    tr = AttackTrace(np.array([3.0, 2.0]), np.array([10.0, 20.0]), r, 2.0, 1, r, 2.0)
    rows = read_csv(write_trace(tmp_path / "t.csv", tr))
    assert list(rows[0]) == ["iter", "loss", "temperature"] and len(rows) == 2
    x = 0.1 + 0.2
    assert float(read_csv(write_csv(tmp_path / "f.csv", ["v"], [[x]]))[0]["v"]) == x
