"""JSON-lines storage of mask samples (optionally gzip-compressed by ``.gz`` extension).

One record per line::

    {"heightmap": [...], "box": [l, w, h], "mask": [...], "pallet": [l_p, w_p, h_p]}

``heightmap`` and ``mask`` are flat row-major arrays over the l_p x w_p grid
(index ``x * w_p + y``); mask entries are 0/1. An optional ``weight`` field
records the mass used when labelling.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from palletmask.core import PalletConfig


@dataclass(frozen=True, eq=False)
class MaskSample:
    heightmap: np.ndarray
    box: tuple[int, int, int]
    mask: np.ndarray
    pallet: PalletConfig
    weight: Optional[float] = None

    def key(self) -> tuple:
        return (self.heightmap.tobytes(), tuple(self.box), self.pallet.shape)


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps output byte-identical across runs
        raw = open(path, mode + "b")
        gz = gzip.GzipFile(fileobj=raw, mode=mode + "b", mtime=0, filename="")
        if mode == "w":
            return io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw
        return io.TextIOWrapper(gz, encoding="utf-8"), raw
    return open(path, mode, encoding="utf-8", newline="\n"), None


def sample_to_record(s: MaskSample) -> dict:
    rec = {
        "heightmap": [int(v) for v in s.heightmap.ravel()],
        "box": [int(v) for v in s.box],
        "mask": [int(v) for v in s.mask.ravel()],
        "pallet": [s.pallet.length_cells, s.pallet.width_cells, s.pallet.max_height_cells],
    }
    if s.weight is not None:
        rec["weight"] = float(s.weight)
    return rec


def record_to_sample(rec: dict) -> MaskSample:
    L, W, H = rec["pallet"]
    pallet = PalletConfig(L, W, H)
    hm = np.asarray(rec["heightmap"], dtype=np.int64).reshape(L, W)
    mask = np.asarray(rec["mask"], dtype=bool).reshape(L, W)
    return MaskSample(hm, tuple(int(v) for v in rec["box"]), mask, pallet, rec.get("weight"))


def write_dataset(path, samples: Iterable[MaskSample]) -> int:
    fh, raw = _open(path, "w")
    n = 0
    try:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return n


def read_dataset(path) -> list[MaskSample]:
    fh, raw = _open(path, "r")
    try:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]
    finally:
        fh.close()
        if raw is not None:
            raw.close()


def deduplicate(samples: Iterable[MaskSample]) -> list[MaskSample]:
    """Keep the latest sample per (heightmap, box), in order of last occurrence."""
    latest: dict = {}
    for s in samples:
        k = s.key()
        latest.pop(k, None)
        latest[k] = s
    return list(latest.values())
