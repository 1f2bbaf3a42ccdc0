"""Pluggable feature extractors and the synthetic multi-instance matcher.

The synthetic world models N independently trained matchers as N Haar-random
orthogonal transforms of one shared latent space.  Each identity is a random
unit direction v_i; an "image" j of that identity is the noisy observation

    u_ij = v_i + (sigma_eff / sqrt(D)) * n_ij

with n_ij standard normal and sigma_eff = sigma times the identity's group
noise multiplier.  Instance k embeds a capture as normalize(O_k @ u_ij).
Because u_ij does not depend on k, the same capture can be presented to any
instance, and because the O_k are orthogonal, all same-instance score
distributions coincide exactly while cross-instance comparisons behave like
comparisons of unrelated directions.

Randomness is drawn from named streams: each stream seeds its own PCG64
generator from (master_seed, label path), so corpus content is a pure
function of the config regardless of generation order.
"""

from __future__ import annotations

import hashlib
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .embedding import (
    DimMismatchError,
    EmbeddingRecord,
    FeatureVector,
    normalize,
    normalize_rows,
    read_records,
    write_records,
)
from .errors import RevBioError, UnknownInstanceError
from .metrics import d_prime

__all__ = [
    "CaptureDescriptor",
    "CorpusIOError",
    "EmbeddingStore",
    "ExtractorPort",
    "FileExtractor",
    "IndexOutOfRangeError",
    "InstanceTransform",
    "MissingRecordError",
    "SimWorldConfig",
    "SyntheticExtractor",
    "UnreachableError",
    "calibrate_sigma",
    "generate_corpus",
    "haar_orthogonal",
    "read_corpus_config",
    "stream_rng",
    "stream_seed",
    "synth_extract",
    "write_corpus",
]

#: Noise scale giving a same-instance d-prime of ~7 at D=512 under the
#: default calibration pair protocol (see calibrate_sigma).
DEFAULT_SIGMA = 1.5

#: Impostor pairs used by calibrate_sigma (kept below the evaluation cap;
#: the sampling error this induces on d-prime is ~0.01, well inside the
#: calibration tolerance).
CALIBRATION_IMPOSTOR_CAP = 200_000

SIGMA_SEARCH_LO = 0.05
SIGMA_SEARCH_HI = 4.0
CALIBRATION_TOLERANCE = 0.05


class IndexOutOfRangeError(RevBioError):
    """Capture indices fall outside the configured identity/image grid."""


class UnreachableError(RevBioError):
    """Requested separability is outside the achievable band."""


class MissingRecordError(RevBioError):
    """No ingested embedding for the requested (identity, image, instance)."""


class CorpusIOError(RevBioError):
    """Reading or writing corpus files failed."""


# --------------------------------------------------------------------------
# Seed streams


def stream_seed(master_seed: int, *labels: object) -> int:
    """64-bit seed for the named stream under ``master_seed``.

    Derived by hashing the master seed with the label path, so streams are
    independent and insensitive to the order in which they are opened.
    """
    if not 0 <= master_seed < 2**64:
        raise ValueError(f"master_seed must be a 64-bit unsigned int, got {master_seed!r}")
    path = "/".join(str(label) for label in labels)
    digest = hashlib.sha256(
        master_seed.to_bytes(8, "little") + b"\x00" + path.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(master_seed: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, *labels)))


# --------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class SimWorldConfig:
    """Parameters of the synthetic multi-instance world.

    ``group_noise_multipliers`` maps group labels to per-group noise factors;
    identities are assigned to groups round-robin in sorted label order, so
    the grouping is reconstructible from the config alone.
    """

    num_identities: int
    images_per_identity: int
    num_instances: int = 10
    dim: int = 512
    sigma: float = DEFAULT_SIGMA
    master_seed: int = 0
    group_noise_multipliers: Mapping[str, float] = field(default_factory=dict)

    _FIELDS = (
        "num_identities",
        "images_per_identity",
        "num_instances",
        "dim",
        "sigma",
        "master_seed",
        "group_noise_multipliers",
    )

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise ValueError(f"dim must be >= 8, got {self.dim}")
        for name in ("num_identities", "images_per_identity", "num_instances"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0.0):
            raise ValueError(f"sigma must be a non-negative real, got {self.sigma!r}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        groups = dict(self.group_noise_multipliers)
        for label, mult in groups.items():
            if not (isinstance(mult, (int, float)) and math.isfinite(mult) and mult > 0):
                raise ValueError(f"group multiplier {label!r} must be positive, got {mult!r}")
        object.__setattr__(self, "group_noise_multipliers", groups)

    # dict fields are unhashable; hash by the canonical digest instead
    def __hash__(self) -> int:
        return hash(self.digest())

    @property
    def group_labels(self) -> tuple[str, ...]:
        return tuple(sorted(self.group_noise_multipliers))

    def group_of(self, identity_index: int) -> Optional[str]:
        labels = self.group_labels
        if not labels:
            return None
        return labels[identity_index % len(labels)]

    def noise_multiplier(self, identity_index: int) -> float:
        group = self.group_of(identity_index)
        if group is None:
            return 1.0
        return float(self.group_noise_multipliers[group])

    def instance_ids(self) -> tuple[str, ...]:
        return tuple(f"m{k}" for k in range(self.num_instances))

    def identity_label(self, i: int) -> str:
        return f"id{i:05d}"

    def image_label(self, j: int) -> str:
        return f"img{j:02d}"

    def as_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "images_per_identity": self.images_per_identity,
            "num_instances": self.num_instances,
            "dim": self.dim,
            "sigma": self.sigma,
            "master_seed": self.master_seed,
            "group_noise_multipliers": dict(sorted(self.group_noise_multipliers.items())),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "SimWorldConfig":
        unknown = set(mapping) - set(cls._FIELDS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(mapping))  # type: ignore[arg-type]

    @classmethod
    def from_json(cls, text: str) -> "SimWorldConfig":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ValueError("config JSON must be an object")
        return cls.from_mapping(obj)


# --------------------------------------------------------------------------
# Extractor port


@dataclass(frozen=True)
class CaptureDescriptor:
    """One presentation of identity ``identity_index`` via image ``image_index``.

    ``group_label`` is descriptive metadata; in the synthetic world the noise
    group is determined by the configured identity->group assignment, not by
    this field.
    """

    identity_index: int
    image_index: int
    group_label: Optional[str] = None


class ExtractorPort(ABC):
    """A bank of interchangeable feature extractors, one per instance id.

    Extraction must be deterministic: the same (capture, instance) always
    yields an identical vector.
    """

    @abstractmethod
    def extract(self, capture: CaptureDescriptor, instance: str) -> FeatureVector:
        raise NotImplementedError

    @abstractmethod
    def instances(self) -> Sequence[str]:
        raise NotImplementedError

    @property
    @abstractmethod
    def dimension(self) -> int:
        raise NotImplementedError


# --------------------------------------------------------------------------
# Haar-random orthogonal transforms


def haar_orthogonal(seed: int, dim: int) -> np.ndarray:
    """Seeded random rotation: a dim x dim orthogonal matrix, Haar-distributed.

    QR of a standard normal matrix, with each Q column flipped to make the
    corresponding R diagonal entry positive (plain QR is not uniform over the
    orthogonal group without this correction).
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass(frozen=True)
class InstanceTransform:
    """One synthetic model instance: an id plus its orthogonal matrix."""

    instance_id: str
    matrix: np.ndarray

    @classmethod
    def for_config(cls, config: SimWorldConfig, index: int) -> "InstanceTransform":
        if not 0 <= index < config.num_instances:
            raise UnknownInstanceError(f"instance index {index} out of range")
        seed = stream_seed(config.master_seed, "instance", index)
        return cls(instance_id=f"m{index}", matrix=haar_orthogonal(seed, config.dim))

    def max_orthogonality_error(self) -> float:
        d = self.matrix.shape[0]
        return float(np.max(np.abs(self.matrix.T @ self.matrix - np.eye(d))))


# --------------------------------------------------------------------------
# Synthetic extractor


def _latent_arrays(config: SimWorldConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-observation latent directions, noises, and noise scales.

    Rows are ordered identity-major then image.  Returns (V, N, s) where row
    r of V is the unit latent of the row's identity, N holds the raw noise
    draws, and s[r] = group_multiplier / sqrt(D), so that the observation at
    noise scale sigma is V + (sigma * s)[:, None] * N.
    """
    d = config.dim
    n_id, n_img = config.num_identities, config.images_per_identity
    v = np.empty((n_id * n_img, d), dtype=np.float64)
    noise = np.empty((n_id * n_img, d), dtype=np.float64)
    scale = np.empty(n_id * n_img, dtype=np.float64)
    root_d = math.sqrt(d)
    for i in range(n_id):
        latent = stream_rng(config.master_seed, "identity", i).standard_normal(d)
        latent /= np.linalg.norm(latent)
        mult = config.noise_multiplier(i)
        for j in range(n_img):
            row = i * n_img + j
            v[row] = latent
            noise[row] = stream_rng(config.master_seed, "image", i, j).standard_normal(d)
            scale[row] = mult / root_d
    return v, noise, scale


class SyntheticExtractor(ExtractorPort):
    """The synthetic matcher bank defined by a SimWorldConfig.

    Per-instance embedding matrices are built lazily and cached; extraction
    is a row lookup, so the single-capture and whole-corpus paths are the
    same bytes.  Read-only after construction (caches fill idempotently),
    hence safe for concurrent extraction.
    """

    def __init__(self, config: SimWorldConfig):
        self.config = config
        self._ids = config.instance_ids()
        self._index = {iid: k for k, iid in enumerate(self._ids)}
        self._latents: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
        self._matrices: dict[str, np.ndarray] = {}

    def instances(self) -> Sequence[str]:
        return self._ids

    @property
    def dimension(self) -> int:
        return self.config.dim

    def transform(self, instance: str) -> InstanceTransform:
        return InstanceTransform.for_config(self.config, self._instance_index(instance))

    def _instance_index(self, instance: str) -> int:
        try:
            return self._index[instance]
        except KeyError:
            raise UnknownInstanceError(f"unknown instance {instance!r}") from None

    def _observations(self) -> np.ndarray:
        if self._latents is None:
            self._latents = _latent_arrays(self.config)
        v, noise, scale = self._latents
        return v + (self.config.sigma * scale)[:, None] * noise

    def embedding_matrix(self, instance: str) -> np.ndarray:
        """All corpus embeddings for one instance: float32, unit rows,
        ordered identity-major then image."""
        k = self._instance_index(instance)
        cached = self._matrices.get(instance)
        if cached is None:
            transform = InstanceTransform.for_config(self.config, k)
            cached = normalize_rows(self._observations() @ transform.matrix.T)
            cached.setflags(write=False)
            self._matrices[instance] = cached
        return cached

    def extract(self, capture: CaptureDescriptor, instance: str) -> FeatureVector:
        cfg = self.config
        i, j = capture.identity_index, capture.image_index
        if not (0 <= i < cfg.num_identities and 0 <= j < cfg.images_per_identity):
            raise IndexOutOfRangeError(
                f"capture ({i}, {j}) outside grid "
                f"{cfg.num_identities} x {cfg.images_per_identity}"
            )
        row = self.embedding_matrix(instance)[i * cfg.images_per_identity + j]
        return FeatureVector(row.copy(), normalized=True)


def synth_extract(
    config: SimWorldConfig, capture: CaptureDescriptor, instance: str
) -> FeatureVector:
    """One-shot extraction; for repeated use hold a SyntheticExtractor."""
    return SyntheticExtractor(config).extract(capture, instance)


# --------------------------------------------------------------------------
# Sigma calibration


def _calibration_pairs(config: SimWorldConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(genuine_a, genuine_b, impostor_a, impostor_b) row-index arrays."""
    n_id, n_img = config.num_identities, config.images_per_identity
    n_obs = n_id * n_img
    if n_img >= 2:
        x, y = np.triu_indices(n_img, k=1)
        offsets = np.arange(n_id, dtype=np.int64)[:, None] * n_img
        ga = (offsets + x[None, :]).ravel()
        gb = (offsets + y[None, :]).ravel()
    else:
        ga = gb = np.empty(0, dtype=np.int64)

    a, b = np.triu_indices(n_obs, k=1)
    cross = (a // n_img) != (b // n_img)
    a, b = a[cross], b[cross]
    if a.size > CALIBRATION_IMPOSTOR_CAP:
        rng = stream_rng(config.master_seed, "calibration-pairs")
        keep = rng.choice(a.size, size=CALIBRATION_IMPOSTOR_CAP, replace=False)
        keep.sort()
        a, b = a[keep], b[keep]
    return ga, gb, a, b


def calibrate_sigma(config: SimWorldConfig, target_dprime: float) -> float:
    """Noise scale whose same-instance d-prime matches ``target_dprime``.

    Bisects sigma over [0.05, 4.0] against the corpus the config would
    generate (same seed streams), stopping within 0.05 of the target.
    Orthogonal transforms preserve cosine scores, so the search runs in
    latent space and applies to every instance at once.  Raises
    ``UnreachableError`` if the target lies outside the achievable band.
    """
    if not (math.isfinite(target_dprime) and target_dprime > 0):
        raise ValueError(f"target_dprime must be positive, got {target_dprime!r}")
    v, noise, scale = _latent_arrays(config)
    ga, gb, ia, ib = _calibration_pairs(config)
    if ga.size < 2 or ia.size < 2:
        raise ValueError("config too small to calibrate: need >= 2 pairs per side")

    # Observations are linear in sigma, so every pairwise dot product is a
    # quadratic in sigma; precompute its coefficients once and each bisection
    # step is O(pairs).
    g_vv = v @ v.T
    g_vn = v @ noise.T
    g_nn = noise @ noise.T
    self_vn = np.diag(g_vn).copy()
    self_nn = np.diag(g_nn).copy()

    def pair_coeffs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ...]:
        c0 = g_vv[a, b]
        c1 = scale[b] * g_vn[a, b] + scale[a] * g_vn[b, a]
        c2 = scale[a] * scale[b] * g_nn[a, b]
        return c0, c1, c2

    gen_c = pair_coeffs(ga, gb)
    imp_c = pair_coeffs(ia, ib)
    norm1 = 2.0 * scale * self_vn
    norm2 = scale * scale * self_nn
    del g_vv, g_vn, g_nn

    def scores(coeffs: tuple[np.ndarray, ...], a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
        c0, c1, c2 = coeffs
        dots = c0 + sigma * c1 + sigma * sigma * c2
        sq_a = 1.0 + sigma * norm1[a] + sigma * sigma * norm2[a]
        sq_b = 1.0 + sigma * norm1[b] + sigma * sigma * norm2[b]
        return dots / np.sqrt(sq_a * sq_b)

    def dprime_at(sigma: float) -> float:
        return d_prime(scores(gen_c, ga, gb, sigma), scores(imp_c, ia, ib, sigma)).value

    lo, hi = SIGMA_SEARCH_LO, SIGMA_SEARCH_HI
    d_at_lo, d_at_hi = dprime_at(lo), dprime_at(hi)  # d-prime falls as sigma grows
    if not d_at_hi <= target_dprime <= d_at_lo:
        raise UnreachableError(
            f"target d-prime {target_dprime:g} outside achievable band "
            f"[{d_at_hi:.3f}, {d_at_lo:.3f}] at dim {config.dim}"
        )
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        d_mid = dprime_at(mid)
        if abs(d_mid - target_dprime) <= CALIBRATION_TOLERANCE:
            return mid
        if d_mid > target_dprime:
            lo = mid
        else:
            hi = mid
    raise UnreachableError(
        f"bisection failed to approach d-prime {target_dprime:g} within "
        f"{CALIBRATION_TOLERANCE}"
    )


# --------------------------------------------------------------------------
# Corpus generation and ingestion


def generate_corpus(config: SimWorldConfig) -> Iterator[EmbeddingRecord]:
    """All N x identities x images embedding records, instance-major,
    then identity, then image.  Pure function of the config."""
    extractor = SyntheticExtractor(config)
    n_img = config.images_per_identity
    for instance in extractor.instances():
        matrix = extractor.embedding_matrix(instance)
        for i in range(config.num_identities):
            for j in range(n_img):
                yield EmbeddingRecord(
                    identity=config.identity_label(i),
                    instance=instance,
                    image=config.image_label(j),
                    vector=matrix[i * n_img + j],
                )


def write_corpus(config: SimWorldConfig, directory: Union[str, Path]) -> tuple[Path, Path]:
    """Write corpus.jsonl plus a corpus.config.json sidecar into ``directory``.

    The sidecar carries the full config and its digest so downstream reports
    can state exactly which world they evaluated.
    """
    directory = Path(directory)
    corpus_path = directory / "corpus.jsonl"
    config_path = directory / "corpus.config.json"
    sidecar = {"config": config.as_dict(), "config_digest": config.digest()}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_records(corpus_path, generate_corpus(config))
        config_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", "utf-8")
    except OSError as exc:
        raise CorpusIOError(f"writing corpus under {directory}: {exc}") from exc
    return corpus_path, config_path


def read_corpus_config(directory: Union[str, Path]) -> tuple[SimWorldConfig, str]:
    """Load the sidecar written by write_corpus; returns (config, digest)."""
    path = Path(directory) / "corpus.config.json"
    try:
        obj = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise CorpusIOError(f"reading {path}: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"config", "config_digest"}:
        raise ValueError(f"{path}: expected keys config, config_digest")
    config = SimWorldConfig.from_mapping(obj["config"])
    digest = str(obj["config_digest"])
    if config.digest() != digest:
        raise ValueError(f"{path}: config digest mismatch")
    return config, digest


class EmbeddingStore:
    """Ingested externally computed embeddings, keyed (identity, image, instance).

    The first record fixes the store dimension; later records must match.
    Vectors are normalized at ingestion.
    """

    def __init__(self) -> None:
        self._vectors: dict[tuple[str, str, str], FeatureVector] = {}
        self._dimension: Optional[int] = None
        self._instances: dict[str, None] = {}  # insertion-ordered set
        self._identities: list[str] = []
        self._images: dict[str, list[str]] = {}

    @property
    def dimension(self) -> int:
        if self._dimension is None:
            raise MissingRecordError("store is empty; dimension undeclared")
        return self._dimension

    def ingest(self, records: Iterator[EmbeddingRecord]) -> int:
        count = 0
        for rec in records:
            if self._dimension is None:
                self._dimension = int(rec.vector.size)
            elif rec.vector.size != self._dimension:
                raise DimMismatchError(
                    f"record ({rec.identity}, {rec.image}, {rec.instance}) has dim "
                    f"{rec.vector.size}, store is {self._dimension}"
                )
            key = (rec.identity, rec.image, rec.instance)
            self._vectors[key] = normalize(rec.vector)
            self._instances.setdefault(rec.instance)
            if rec.identity not in self._images:
                self._identities.append(rec.identity)
                self._images[rec.identity] = []
            if rec.image not in self._images[rec.identity]:
                self._images[rec.identity].append(rec.image)
            count += 1
        return count

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "EmbeddingStore":
        store = cls()
        try:
            store.ingest(read_records(path))
        except OSError as exc:
            raise CorpusIOError(f"reading {path}: {exc}") from exc
        return store

    def instances(self) -> tuple[str, ...]:
        return tuple(self._instances)

    def identities(self) -> tuple[str, ...]:
        return tuple(self._identities)

    def images_of(self, identity: str) -> tuple[str, ...]:
        try:
            return tuple(self._images[identity])
        except KeyError:
            raise MissingRecordError(f"unknown identity {identity!r}") from None

    def get(self, identity: str, image: str, instance: str) -> FeatureVector:
        try:
            return self._vectors[(identity, image, instance)]
        except KeyError:
            raise MissingRecordError(
                f"no embedding for identity={identity!r} image={image!r} "
                f"instance={instance!r}"
            ) from None


class FileExtractor(ExtractorPort):
    """ExtractorPort over an EmbeddingStore.

    Capture indices address the store's identities (insertion order) and
    each identity's images (insertion order), which for generated corpora
    coincide with the generation grid.
    """

    def __init__(self, store: EmbeddingStore):
        self._store = store

    @property
    def store(self) -> EmbeddingStore:
        return self._store

    @property
    def dimension(self) -> int:
        return self._store.dimension

    def instances(self) -> Sequence[str]:
        return self._store.instances()

    def extract(self, capture: CaptureDescriptor, instance: str) -> FeatureVector:
        identities = self._store.identities()
        if not 0 <= capture.identity_index < len(identities):
            raise IndexOutOfRangeError(f"identity index {capture.identity_index} out of range")
        identity = identities[capture.identity_index]
        images = self._store.images_of(identity)
        if not 0 <= capture.image_index < len(images):
            raise IndexOutOfRangeError(
                f"image index {capture.image_index} out of range for {identity!r}"
            )
        if instance not in self._store.instances():
            raise UnknownInstanceError(f"unknown instance {instance!r}")
        return self._store.get(identity, images[capture.image_index], instance)
