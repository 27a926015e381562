import gzip

import numpy as np
import pytest

from palletmask.core import PalletConfig
from palletmask.datasets import MaskSample, deduplicate, read_dataset, write_dataset

P = PalletConfig(4, 3, 5)


def _s(k, mask_bit=True):
    h = np.arange(12).reshape(4, 3) % (k + 2)
    m = np.zeros((4, 3), bool)
    m[0, 0] = mask_bit
    return MaskSample(h, (2, 1, 1), m, P, weight=1.25)


@pytest.mark.parametrize("name", ["d.jsonl", "d.jsonl.gz"])
def test_roundtrip(tmp_path, name):
    samples = [_s(k) for k in range(5)]
    assert write_dataset(tmp_path / name, samples) == 5
    back = read_dataset(tmp_path / name)
    assert len(back) == 5
    for a, b in zip(samples, back):
        assert np.array_equal(a.heightmap, b.heightmap) and np.array_equal(a.mask, b.mask)
        assert a.box == b.box and a.pallet == b.pallet and a.weight == b.weight


def test_row_major_layout(tmp_path):
    write_dataset(tmp_path / "d.jsonl", [_s(0)])
    import json

    rec = json.loads((tmp_path / "d.jsonl").read_text())
    assert rec["pallet"] == [4, 3, 5]
    assert rec["heightmap"] == [int(v) for v in _s(0).heightmap.ravel()]
    assert rec["mask"][0] == 1 and sum(rec["mask"]) == 1


def test_gzip_byte_identical(tmp_path):
    write_dataset(tmp_path / "a.jsonl.gz", [_s(k) for k in range(3)])
    write_dataset(tmp_path / "b.jsonl.gz", [_s(k) for k in range(3)])
    assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()
    with gzip.open(tmp_path / "a.jsonl.gz", "rt") as fh:
        assert len(fh.readlines()) == 3


def test_empty_file(tmp_path):
    write_dataset(tmp_path / "e.jsonl", [])
    assert read_dataset(tmp_path / "e.jsonl") == []


def test_dedupe_keeps_latest():
    old, new = _s(0, mask_bit=False), _s(0, mask_bit=True)
    other = _s(1)
    out = deduplicate([old, other, new])
    assert len(out) == 2
    kept = [s for s in out if s.key() == old.key()][0]
    assert kept is new
