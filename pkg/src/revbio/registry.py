"""Durable system state: instance pool, identity-to-instance mapping, templates.

The registry answers three questions: which matcher instances exist (and at
what operating threshold), which instance each identity currently uses, and
which instances an identity has burned through past revocations.  An
instance id never recurs within one identity's lifetime: a stolen template
still matches its own instance, so reuse would resurrect it.

Snapshots are a single binary file:

    magic "RBTS" | u16 LE version | u32 LE header length | JSON header
    | per-identity vectors (u32 LE count + LE float32 data) | u32 LE CRC-32C

The JSON header carries instance and identity metadata; vectors follow in
header order.  The trailing checksum covers every preceding byte.  Saves are
atomic (write temp, fsync, rename), so a crash mid-save leaves the previous
snapshot untouched.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

from .embedding import DimMismatchError, FeatureVector, decode_vector, encode_vector
from .errors import RevBioError, UnknownInstanceError
from .metrics import ThresholdSpec

__all__ = [
    "AlreadyEnrolledError",
    "CorruptSnapshotError",
    "DuplicateInstanceError",
    "GallerySnapshot",
    "IdentityRecord",
    "InstancePoolExhaustedError",
    "ModelInstanceRecord",
    "Registry",
    "SnapshotIOError",
    "UnknownIdentityError",
    "VersionMismatchError",
    "crc32c",
]

SNAPSHOT_MAGIC = b"RBTS"
SNAPSHOT_VERSION = 1

AVAILABLE = "available"
IN_SERVICE = "in_service"


class DuplicateInstanceError(RevBioError):
    """Instance id already registered."""


class UnknownIdentityError(RevBioError):
    """Identity not enrolled."""


class AlreadyEnrolledError(RevBioError):
    """Identity already has an active enrollment."""


class InstancePoolExhaustedError(RevBioError):
    """No registered instance remains eligible for this identity."""


class SnapshotIOError(RevBioError):
    """Snapshot file could not be read or written."""


class VersionMismatchError(RevBioError):
    """Snapshot format version unsupported."""


class CorruptSnapshotError(RevBioError):
    """Snapshot bytes fail structural or checksum validation."""


# --------------------------------------------------------------------------
# CRC-32C (Castagnoli).  No stdlib implementation exists (zlib.crc32 is the
# IEEE polynomial), so a table-driven one lives here; throughput is adequate
# for desk-scale snapshots.


def _make_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0x82F63B78 if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC-32C checksum (crc32c(b"123456789") == 0xE3069283)."""
    table = _CRC_TABLE
    crc ^= 0xFFFFFFFF
    for byte in data:
        crc = (crc >> 8) ^ table[(crc ^ byte) & 0xFF]
    return crc ^ 0xFFFFFFFF


# --------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class ModelInstanceRecord:
    """One registered matcher instance."""

    id: str
    index: int
    status: str = AVAILABLE
    threshold: Optional[ThresholdSpec] = None
    registered_at: float = 0.0


@dataclass(frozen=True)
class IdentityRecord:
    """One enrolled identity: active instance, template, revocation trail."""

    identity_id: str
    active_instance: str
    template: FeatureVector
    enrolled_at: float = 0.0
    revocation_history: tuple[tuple[str, float], ...] = ()

    @property
    def revocation_count(self) -> int:
        return len(self.revocation_history)


@dataclass(frozen=True)
class GallerySnapshot:
    """Parsed snapshot content (what the binary format encodes)."""

    format_version: int
    dimension: int
    instances: tuple[ModelInstanceRecord, ...]
    identities: tuple[IdentityRecord, ...]


# --------------------------------------------------------------------------
# Registry


class Registry:
    """In-memory registry with snapshot persistence.

    All mutations share one lock, which also serializes them against
    snapshot construction, so a snapshot is a consistent point-in-time view
    and two operations on the same identity always linearize.  ``clock``
    supplies timestamps; every mutator also accepts ``at`` so replayed
    operation logs reproduce stored state bit-exactly.
    """

    def __init__(self, dimension: int, clock: Callable[[], float] = time.time):
        if dimension < 1:
            raise ValueError(f"dimension must be positive, got {dimension}")
        self._dimension = int(dimension)
        self._clock = clock
        self._lock = threading.RLock()
        self._instances: dict[str, ModelInstanceRecord] = {}
        self._identities: dict[str, IdentityRecord] = {}
        self._usage: dict[str, int] = {}

    @property
    def dimension(self) -> int:
        return self._dimension

    # -- instances ---------------------------------------------------------

    def register_instance(
        self,
        instance_id: str,
        threshold: Optional[ThresholdSpec] = None,
        at: Optional[float] = None,
    ) -> ModelInstanceRecord:
        with self._lock:
            if instance_id in self._instances:
                raise DuplicateInstanceError(f"instance {instance_id!r} already registered")
            record = ModelInstanceRecord(
                id=instance_id,
                index=len(self._instances),
                status=AVAILABLE,
                threshold=threshold,
                registered_at=self._clock() if at is None else float(at),
            )
            self._instances[instance_id] = record
            self._usage[instance_id] = 0
            return record

    def instance(self, instance_id: str) -> ModelInstanceRecord:
        try:
            return self._instances[instance_id]
        except KeyError:
            raise UnknownInstanceError(f"instance {instance_id!r} not registered") from None

    def instances(self) -> tuple[ModelInstanceRecord, ...]:
        with self._lock:
            return tuple(self._instances.values())

    def set_threshold(self, instance_id: str, threshold: ThresholdSpec) -> ModelInstanceRecord:
        with self._lock:
            record = dataclasses.replace(self.instance(instance_id), threshold=threshold)
            self._instances[instance_id] = record
            return record

    def _set_status(self, instance_id: str, delta: int) -> None:
        self._usage[instance_id] += delta
        status = IN_SERVICE if self._usage[instance_id] > 0 else AVAILABLE
        record = self._instances[instance_id]
        if record.status != status:
            self._instances[instance_id] = dataclasses.replace(record, status=status)

    # -- identities --------------------------------------------------------

    def assign_next_instance(self, identity_id: str) -> str:
        """Lowest-registration-index instance this identity has never used.

        Read-only: nothing is consumed until an enroll/revoke commits.
        """
        with self._lock:
            used: set[str] = set()
            existing = self._identities.get(identity_id)
            if existing is not None:
                used.add(existing.active_instance)
                used.update(iid for iid, _ in existing.revocation_history)
            for record in self._instances.values():  # insertion order == index order
                if record.id not in used:
                    return record.id
            raise InstancePoolExhaustedError(
                f"identity {identity_id!r} has used all {len(self._instances)} "
                f"registered instances"
            )

    def enroll(
        self,
        identity_id: str,
        instance_id: str,
        template: FeatureVector,
        at: Optional[float] = None,
    ) -> IdentityRecord:
        self._check_template(template)
        with self._lock:
            self.instance(instance_id)
            if identity_id in self._identities:
                raise AlreadyEnrolledError(f"identity {identity_id!r} already enrolled")
            record = IdentityRecord(
                identity_id=identity_id,
                active_instance=instance_id,
                template=template,
                enrolled_at=self._clock() if at is None else float(at),
                revocation_history=(),
            )
            self._identities[identity_id] = record
            self._set_status(instance_id, +1)
            return record

    def revoke(
        self,
        identity_id: str,
        new_instance_id: str,
        new_template: FeatureVector,
        at: Optional[float] = None,
    ) -> tuple[IdentityRecord, IdentityRecord]:
        """Swap the identity to ``new_instance_id``; returns (old, new) records."""
        self._check_template(new_template)
        with self._lock:
            old = self.lookup(identity_id)
            self.instance(new_instance_id)
            used = {old.active_instance} | {iid for iid, _ in old.revocation_history}
            if new_instance_id in used:
                raise ValueError(
                    f"instance {new_instance_id!r} already used by {identity_id!r}"
                )
            revoked_at = self._clock() if at is None else float(at)
            new = IdentityRecord(
                identity_id=identity_id,
                active_instance=new_instance_id,
                template=new_template,
                enrolled_at=old.enrolled_at,
                revocation_history=old.revocation_history
                + ((old.active_instance, revoked_at),),
            )
            self._identities[identity_id] = new
            self._set_status(old.active_instance, -1)
            self._set_status(new_instance_id, +1)
            return old, new

    def lookup(self, identity_id: str) -> IdentityRecord:
        try:
            return self._identities[identity_id]
        except KeyError:
            raise UnknownIdentityError(f"identity {identity_id!r} not enrolled") from None

    def identity_ids(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._identities)

    @property
    def identity_count(self) -> int:
        return len(self._identities)

    def _check_template(self, template: FeatureVector) -> None:
        if not isinstance(template, FeatureVector):
            raise TypeError("template must be a FeatureVector")
        if template.dim != self._dimension:
            raise DimMismatchError(
                f"template dim {template.dim} != registry dim {self._dimension}"
            )
        if not template.normalized:
            raise ValueError("templates must be normalized before storage")

    # -- snapshots -----------------------------------------------------------

    def to_snapshot(self) -> GallerySnapshot:
        with self._lock:
            return GallerySnapshot(
                format_version=SNAPSHOT_VERSION,
                dimension=self._dimension,
                instances=tuple(self._instances.values()),
                identities=tuple(self._identities.values()),
            )

    def to_snapshot_bytes(self) -> bytes:
        return encode_snapshot(self.to_snapshot())

    def snapshot_save(self, path: Union[str, Path]) -> None:
        """Atomic save: the file at ``path`` is either the old snapshot or
        the complete new one, never a partial write."""
        path = Path(path)
        data = self.to_snapshot_bytes()
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise SnapshotIOError(f"saving snapshot to {path}: {exc}") from exc

    @classmethod
    def snapshot_load(
        cls, path: Union[str, Path], clock: Callable[[], float] = time.time
    ) -> "Registry":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise SnapshotIOError(f"reading snapshot {path}: {exc}") from exc
        return cls.from_snapshot(decode_snapshot(data), clock=clock)

    @classmethod
    def from_snapshot(
        cls, snapshot: GallerySnapshot, clock: Callable[[], float] = time.time
    ) -> "Registry":
        registry = cls(snapshot.dimension, clock=clock)
        for inst in sorted(snapshot.instances, key=lambda r: r.index):
            registry._instances[inst.id] = dataclasses.replace(inst, status=AVAILABLE)
            registry._usage[inst.id] = 0
        for ident in snapshot.identities:
            for iid, _ in ident.revocation_history:
                if iid not in registry._instances:
                    raise CorruptSnapshotError(
                        f"identity {ident.identity_id!r} references unknown instance {iid!r}"
                    )
            if ident.active_instance not in registry._instances:
                raise CorruptSnapshotError(
                    f"identity {ident.identity_id!r} references unknown instance "
                    f"{ident.active_instance!r}"
                )
            registry._identities[ident.identity_id] = ident
            registry._set_status(ident.active_instance, +1)
        return registry


# --------------------------------------------------------------------------
# Snapshot codec


def _threshold_to_obj(spec: Optional[ThresholdSpec]) -> Optional[dict]:
    return None if spec is None else spec.as_dict()


def _threshold_from_obj(obj: Optional[dict]) -> Optional[ThresholdSpec]:
    if obj is None:
        return None
    return ThresholdSpec(
        threshold=float(obj["threshold"]),
        fmr_target=float(obj["fmr_target"]),
        empirical_fmr=float(obj["empirical_fmr"]),
        impostor_count=int(obj["impostor_count"]),
    )


def encode_snapshot(snapshot: GallerySnapshot) -> bytes:
    header = {
        "dimension": snapshot.dimension,
        "instances": [
            {
                "id": r.id,
                "index": r.index,
                "status": r.status,
                "threshold": _threshold_to_obj(r.threshold),
                "registered_at": r.registered_at,
            }
            for r in snapshot.instances
        ],
        "identities": [
            {
                "id": r.identity_id,
                "active_instance": r.active_instance,
                "enrolled_at": r.enrolled_at,
                "revocation_history": [[iid, ts] for iid, ts in r.revocation_history],
            }
            for r in snapshot.identities
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        SNAPSHOT_MAGIC,
        struct.pack("<H", snapshot.format_version),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
    ]
    for record in snapshot.identities:
        parts.append(encode_vector(record.template))
    body = b"".join(parts)
    return body + struct.pack("<I", crc32c(body))


def decode_snapshot(data: bytes) -> GallerySnapshot:
    if len(data) < len(SNAPSHOT_MAGIC) + 2 + 4 + 4:
        raise CorruptSnapshotError("snapshot shorter than fixed framing")
    if data[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise CorruptSnapshotError("bad magic bytes")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SNAPSHOT_VERSION:
        raise VersionMismatchError(f"snapshot version {version} unsupported")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc32c(data[:-4]) != stored_crc:
        raise CorruptSnapshotError("checksum mismatch")
    (header_len,) = struct.unpack_from("<I", data, 6)
    header_end = 10 + header_len
    if header_end > len(data) - 4:
        raise CorruptSnapshotError("header length exceeds file")
    try:
        header = json.loads(data[10:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptSnapshotError(f"header parse failure: {exc}") from exc

    try:
        dimension = int(header["dimension"])
        instances = tuple(
            ModelInstanceRecord(
                id=str(obj["id"]),
                index=int(obj["index"]),
                status=str(obj["status"]),
                threshold=_threshold_from_obj(obj["threshold"]),
                registered_at=float(obj["registered_at"]),
            )
            for obj in header["instances"]
        )
        identity_meta = header["identities"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSnapshotError(f"malformed header: {exc}") from exc

    body = data[:-4]
    offset = header_end
    identities = []
    try:
        for obj in identity_meta:
            vector, offset = decode_vector(body, offset)
            if vector.size != dimension:
                raise CorruptSnapshotError(
                    f"identity {obj['id']!r}: vector dim {vector.size} != {dimension}"
                )
            identities.append(
                IdentityRecord(
                    identity_id=str(obj["id"]),
                    active_instance=str(obj["active_instance"]),
                    template=FeatureVector(vector, normalized=True),
                    enrolled_at=float(obj["enrolled_at"]),
                    revocation_history=tuple(
                        (str(iid), float(ts)) for iid, ts in obj["revocation_history"]
                    ),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSnapshotError(f"malformed identity section: {exc}") from exc
    if offset != len(data) - 4:
        raise CorruptSnapshotError("trailing bytes after vector section")
    return GallerySnapshot(
        format_version=version,
        dimension=dimension,
        instances=instances,
        identities=tuple(identities),
    )
