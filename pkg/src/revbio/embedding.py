"""Embedding vectors and cosine-similarity scoring.

Everything else in the package computes on the fixed-dimension float32
vectors defined here.  Scores are plain floats in [-1, 1]; dot products and
norms are accumulated in float64 so results are reproducible run to run.

Also owns the two wire formats for embeddings:

* text records - one JSON object per line:
  ``{"identity": str, "instance": str, "image": str, "vector": [floats]}``
* binary vectors (used inside registry snapshots) - a little-endian uint32
  component count followed by that many little-endian float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import RevBioError

__all__ = [
    "DimMismatchError",
    "EmbeddingRecord",
    "FeatureVector",
    "NonFiniteError",
    "SimilarityScore",
    "ZeroVectorError",
    "cosine_similarity",
    "decode_vector",
    "encode_vector",
    "normalize",
    "read_records",
    "write_records",
]

SimilarityScore = float

#: Tolerance on the Euclidean norm of a vector claiming to be normalized.
NORM_TOLERANCE = 1e-5
#: Norms at or below this are treated as zero (not normalizable / scorable).
ZERO_NORM_FLOOR = 1e-12

RECORD_FIELDS = ("identity", "instance", "image", "vector")


class NonFiniteError(RevBioError):
    """A vector contains NaN or infinite components."""


class ZeroVectorError(RevBioError):
    """A vector of (near-)zero norm cannot be normalized or scored."""


class DimMismatchError(RevBioError):
    """Two vectors, or a vector and a store, disagree on dimension."""


def _as_components(v: Union["FeatureVector", Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(v, FeatureVector):
        return v.components
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector has NaN or infinite components")
    return arr


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Fixed-dimension float32 embedding.

    ``normalized`` certifies unit Euclidean norm within ``NORM_TOLERANCE``;
    constructing with the flag set checks it.
    """

    components: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = _as_components(self.components)
        object.__setattr__(self, "components", arr)
        if self.normalized:
            norm = float(np.linalg.norm(arr.astype(np.float64)))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"normalized flag set but norm is {norm!r}")

    @property
    def dim(self) -> int:
        return int(self.components.size)

    def tolist(self) -> list[float]:
        return [float(x) for x in self.components]

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.components, dtype="<f4").tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.normalized == other.normalized and self.tobytes() == other.tobytes()

    def __repr__(self) -> str:  # keep logs/tracebacks template-free
        return f"FeatureVector(dim={self.dim}, normalized={self.normalized})"


def normalize(v: Union[FeatureVector, Sequence[float], np.ndarray]) -> FeatureVector:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    arr = _as_components(v).astype(np.float64)
    norm = float(np.linalg.norm(arr))
    if norm <= ZERO_NORM_FLOOR:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm!r}")
    return FeatureVector((arr / norm).astype(np.float32), normalized=True)


def cosine_similarity(
    a: Union[FeatureVector, Sequence[float], np.ndarray],
    b: Union[FeatureVector, Sequence[float], np.ndarray],
) -> SimilarityScore:
    """Cosine of the angle between ``a`` and ``b``, clamped into [-1, 1].

    Symmetric in its arguments and invariant under positive rescaling of
    either input.  Raises ``DimMismatchError`` / ``ZeroVectorError`` on
    unusable inputs.
    """
    va = _as_components(a).astype(np.float64)
    vb = _as_components(b).astype(np.float64)
    if va.size != vb.size:
        raise DimMismatchError(f"dimension mismatch: {va.size} vs {vb.size}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a <= ZERO_NORM_FLOOR or norm_b <= ZERO_NORM_FLOOR:
        raise ZeroVectorError("cosine similarity undefined for zero vectors")
    value = float(np.dot(va, vb) / (norm_a * norm_b))
    return min(1.0, max(-1.0, value))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize a 2-D float array to unit norm, returned as float32."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM_FLOOR):
        raise ZeroVectorError("matrix contains a zero row")
    return (m / norms).astype(np.float32)


# --------------------------------------------------------------------------
# Text record format


@dataclass(frozen=True)
class EmbeddingRecord:
    """One externally visible embedding: who, which matcher, which image."""

    identity: str
    instance: str
    image: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", _as_components(self.vector))

    def to_json_line(self) -> str:
        payload = {
            "identity": self.identity,
            "instance": self.instance,
            "image": self.image,
            "vector": [float(x) for x in self.vector],
        }
        return json.dumps(payload, separators=(",", ":"))


def write_records(target: Union[str, Path, IO[str]], records: Iterable[EmbeddingRecord]) -> int:
    """Write records one JSON object per line; returns the number written."""
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            return write_records(fh, records)
    count = 0
    for rec in records:
        target.write(rec.to_json_line())
        target.write("\n")
        count += 1
    return count


def _parse_record(obj: object, lineno: int) -> EmbeddingRecord:
    if not isinstance(obj, dict):
        raise ValueError(f"line {lineno}: record is not a JSON object")
    extra = set(obj) - set(RECORD_FIELDS)
    missing = set(RECORD_FIELDS) - set(obj)
    if extra or missing:
        raise ValueError(
            f"line {lineno}: bad record keys (missing={sorted(missing)}, unexpected={sorted(extra)})"
        )
    vector = obj["vector"]
    if not isinstance(vector, list) or not vector:
        raise ValueError(f"line {lineno}: vector must be a non-empty list")
    return EmbeddingRecord(
        identity=str(obj["identity"]),
        instance=str(obj["instance"]),
        image=str(obj["image"]),
        vector=np.asarray(vector, dtype=np.float32),
    )


def read_records(source: Union[str, Path, IO[str]]) -> Iterator[EmbeddingRecord]:
    """Yield records from a JSON-lines embedding file (strict schema)."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from read_records(fh)
        return
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: invalid JSON ({exc})") from exc
        yield _parse_record(obj, lineno)


# --------------------------------------------------------------------------
# Binary vector codec (snapshot internals)


def encode_vector(vector: Union[FeatureVector, np.ndarray]) -> bytes:
    """uint32-LE count followed by count float32-LE components."""
    arr = np.ascontiguousarray(_as_components(vector), dtype="<f4")
    return struct.pack("<I", arr.size) + arr.tobytes()


def decode_vector(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one vector at ``offset``; returns (vector, next offset)."""
    if offset + 4 > len(buf):
        raise ValueError("truncated vector header")
    (count,) = struct.unpack_from("<I", buf, offset)
    end = offset + 4 + 4 * count
    if count == 0 or end > len(buf):
        raise ValueError("truncated or empty vector payload")
    vec = np.frombuffer(buf, dtype="<f4", count=count, offset=offset + 4).copy()
    return vec, end
