"""Feature-map-level retrieval of in-context pairs.

Candidates and queries are embedded by a feature extractor, the full feature
map is flattened and l2-normalised, and the candidate with the largest inner
product wins. Search is exhaustive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import TaskDataset

_MAGIC = b"FMLRIDX1"


class RetrievalError(ValueError):
    pass


class FeatureExtractor(Protocol):
    name: str

    def extract(self, image) -> np.ndarray: ...


class RawPixelExtractor:
    """Area-downsampled pixels as the feature map."""

    def __init__(self, size: int = 16):
        self.size = size
        self.name = f"raw_pixels_{size}"

    def extract(self, image) -> np.ndarray:
        t = torch.as_tensor(np.array(image), dtype=torch.float64)[None]
        return F.adaptive_avg_pool2d(t, self.size)[0].numpy()


class ModelEncoderExtractor:
    """Pre-quantisation encoder features of a frozen model, one cell at a time."""

    def __init__(self, model, name: str = "toy_encoder"):
        self.model = model
        self.name = name

    @torch.no_grad()
    def extract(self, image) -> np.ndarray:
        t = torch.as_tensor(np.array(image), dtype=torch.float32)
        return self.model.cell_features(t).double().numpy()


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise RetrievalError("cannot normalise a zero or non-finite vector")
    return v / norm


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray  # float32 (n, d), unit rows
    extractor_name: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("index ids are not unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise RetrievalError("vector matrix does not match id table")
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, sample_id: str) -> int:
        return self.ids.index(sample_id)

    def save(self, path: str | Path) -> None:
        name = self.extractor_name.encode()
        n, d = self.vectors.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQQ", len(name), n, d))
            fh.write(name)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
            for sid in self.ids:
                raw = sid.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise RetrievalError(f"{path} is not a retrieval index")
        try:
            off = len(_MAGIC)
            name_len, n, d = struct.unpack_from("<IQQ", data, off)
            off += struct.calcsize("<IQQ")
            name = data[off : off + name_len].decode()
            off += name_len
            vectors = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
            off += 4 * n * d
            ids = []
            for _ in range(n):
                (k,) = struct.unpack_from("<I", data, off)
                off += 4
                ids.append(data[off : off + k].decode())
                off += k
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise RetrievalError(f"{path} is truncated or corrupt: {e}") from e
        if off != len(data):
            raise RetrievalError(f"{path} has {len(data) - off} trailing bytes")
        return cls(tuple(ids), vectors.astype(np.float32), name)


def embed(fx: FeatureExtractor, image) -> np.ndarray:
    feats = np.asarray(fx.extract(image), dtype=np.float64)
    if not np.isfinite(feats).all():
        raise RetrievalError(f"extractor {fx.name} produced non-finite features")
    return l2_normalize(feats)


def build_index(ds: TaskDataset, fx: FeatureExtractor) -> RetrievalIndex:
    rows = []
    for s in ds:
        try:
            rows.append(embed(fx, s.image))
        except Exception as e:
            raise RetrievalError(f"feature extraction failed for {s.id}: {e}") from e
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise RetrievalError(f"inconsistent feature sizes {sorted(dims)}")
    return RetrievalIndex(tuple(ds.ids), np.stack(rows).astype(np.float32), fx.name)


def scores(index: RetrievalIndex, query_vec: np.ndarray) -> np.ndarray:
    return index.vectors.astype(np.float64) @ query_vec


def retrieve_vector(
    index: RetrievalIndex, query_vec: np.ndarray, exclude: Iterable[str] = ()
) -> str:
    s = scores(index, query_vec)
    excluded = set(exclude)
    if excluded:
        s = s.copy()
        for i, sid in enumerate(index.ids):
            if sid in excluded:
                s[i] = -np.inf
        if np.isneginf(s).all():
            raise RetrievalError("every candidate is excluded")
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return index.ids[int(np.argmax(s))]


def retrieve(
    index: RetrievalIndex,
    query_image,
    fx: FeatureExtractor,
    exclude: Iterable[str] = (),
) -> str:
    """Id of the candidate most similar to ``query_image``."""
    if fx.name != index.extractor_name:
        raise RetrievalError(
            f"extractor {fx.name!r} does not match index extractor {index.extractor_name!r}"
        )
    if len(index) == 0:
        raise RetrievalError("empty index")
    return retrieve_vector(index, embed(fx, query_image), exclude)


def retrieve_all(
    index: RetrievalIndex,
    queries: Sequence,
    fx: FeatureExtractor,
    leave_one_out: bool = False,
) -> dict[str, str]:
    """Map query id to retrieved id; with ``leave_one_out`` a query never gets itself."""
    return {
        q.id: retrieve(index, q.image, fx, exclude=(q.id,) if leave_one_out else ())
        for q in queries
    }
