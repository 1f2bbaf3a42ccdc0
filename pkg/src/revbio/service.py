"""HTTP/JSON front door over the lifecycle module with a durable store.

Persistence is a write-ahead journal plus generation-numbered snapshots:
``snapshot.<G>.rbts`` is the state at the moment generation G began and
``journal.<G>.jsonl`` holds every mutation since.  Boot loads the highest
loadable snapshot and replays its journal; a torn final journal line (crash
mid-append) is dropped.  Taking a snapshot writes generation G+1 atomically,
creates its empty journal, then removes generation G, so a crash at any point
leaves either the old pair or the new pair on disk, never a torn mix.

Mutating requests apply to memory, then append to the journal with fsync
before the response is sent.  If a journal write ever fails the in-memory
state is ahead of disk with no way to resync, so the store poisons itself and
every subsequent request fails with INTERNAL until restart.

The journal stores template vectors (base64 of the raw float32 bytes, exact
round-trip) because replay must rebuild the registry bit for bit.  That is
the same trust level as the snapshot file.  The *audit* log is a separate
append-only file and never contains vectors.
"""

from __future__ import annotations

import base64
import hmac
import json
import os
import re
import threading
import time
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .embedding import (
    DimMismatchError,
    FeatureVector,
    NonFiniteError,
    ZeroVectorError,
)
from .errors import RevBioError
from .lifecycle import (
    PER_INSTANCE,
    SHARED,
    AuditLog,
    RevocableSystem,
    VerificationDecision,
)
from .metrics import ThresholdSpec, fmr_threshold
from .registry import (
    AlreadyEnrolledError,
    DuplicateInstanceError,
    InstancePoolExhaustedError,
    Registry,
    SnapshotIOError,
    UnknownIdentityError,
    _threshold_from_obj,
    _threshold_to_obj,
)
from .simulate import (
    CaptureDescriptor,
    EmbeddingStore,
    FileExtractor,
    IndexOutOfRangeError,
    SimWorldConfig,
    SyntheticExtractor,
)

__all__ = [
    "ApiError",
    "PersistentStore",
    "StoreError",
    "StorePoisonedError",
    "JournalCorruptError",
    "create_app",
    "ENV_STORE_DIR",
    "ENV_PORT",
    "ENV_ADMIN_TOKEN",
    "ENV_THRESHOLD_MODE",
]

ENV_STORE_DIR = "RBT_STORE_DIR"
ENV_PORT = "RBT_PORT"
ENV_ADMIN_TOKEN = "RBT_ADMIN_TOKEN"
ENV_THRESHOLD_MODE = "RBT_THRESHOLD_MODE"

WORLD_FILE = "world.json"
AUDIT_FILE = "audit.jsonl"
_SNAPSHOT_RE = re.compile(r"^snapshot\.(\d+)\.rbts$")

MACHINE_CODES = (
    "UNKNOWN_IDENTITY",
    "ALREADY_ENROLLED",
    "POOL_EXHAUSTED",
    "DIM_MISMATCH",
    "BAD_REQUEST",
    "INTERNAL",
)


class StoreError(RevBioError):
    """Durable store failure."""


class StorePoisonedError(StoreError):
    """A journal write failed earlier; memory and disk have diverged."""


class JournalCorruptError(StoreError):
    """A journal line before the tail failed to parse."""


class ApiError(Exception):
    """Wire-level error: HTTP status plus a machine-readable code."""

    def __init__(self, http_status: int, machine_code: str, message: str):
        if machine_code not in MACHINE_CODES:
            raise ValueError(f"unknown machine code {machine_code!r}")
        super().__init__(message)
        self.http_status = int(http_status)
        self.machine_code = machine_code
        self.message = message

    def as_dict(self) -> dict:
        return {"machine_code": self.machine_code, "message": self.message}


def map_exception(exc: Exception) -> ApiError:
    """Total mapping from internal errors to the wire schema."""
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, UnknownIdentityError):
        return ApiError(404, "UNKNOWN_IDENTITY", str(exc))
    if isinstance(exc, AlreadyEnrolledError):
        return ApiError(409, "ALREADY_ENROLLED", str(exc))
    # an instance id collision surfaces like a duplicate enrollment
    if isinstance(exc, DuplicateInstanceError):
        return ApiError(409, "ALREADY_ENROLLED", str(exc))
    if isinstance(exc, InstancePoolExhaustedError):
        return ApiError(503, "POOL_EXHAUSTED", str(exc))
    if isinstance(exc, DimMismatchError):
        return ApiError(400, "DIM_MISMATCH", str(exc))
    if isinstance(
        exc, (IndexOutOfRangeError, ZeroVectorError, NonFiniteError, ValueError, TypeError)
    ):
        return ApiError(400, "BAD_REQUEST", str(exc))
    # MissingThreshold, UnknownInstance, poisoned store, everything else:
    # a server-side configuration or durability problem, not a caller error.
    return ApiError(500, "INTERNAL", str(exc) or exc.__class__.__name__)


def _b64_vector(template: FeatureVector) -> str:
    return base64.b64encode(template.tobytes()).decode("ascii")


def _vector_from_b64(text: str) -> FeatureVector:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    components = np.frombuffer(raw, dtype="<f4").copy()
    return FeatureVector(components, normalized=True)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class PersistentStore:
    """Registry + lifecycle system with journal/snapshot durability.

    The extraction world is fixed at first boot and recorded in
    ``world.json``: either a synthetic world config or a corpus file path.
    If the registry is empty after boot replay (brand-new store), every
    extractor instance is registered with a threshold calibrated to
    ``fmr_target``, through the journal like any other mutation.
    """

    def __init__(
        self,
        store_dir: Union[str, Path],
        config: Optional[SimWorldConfig] = None,
        corpus_path: Optional[Union[str, Path]] = None,
        threshold_mode: str = PER_INSTANCE,
        fmr_target: float = 1e-4,
        bootstrap: bool = True,
        clock: Callable[[], float] = time.time,
    ):
        if threshold_mode not in (PER_INSTANCE, SHARED):
            raise ValueError(f"threshold_mode must be {PER_INSTANCE!r} or {SHARED!r}")
        self.store_dir = Path(store_dir)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.threshold_mode = threshold_mode
        self.fmr_target = float(fmr_target)
        self._clock = clock
        self._lock = threading.Lock()
        self._poisoned: Optional[str] = None
        self._boot_time = clock()

        self._world = self._resolve_world(config, corpus_path)
        self._extractor = self._build_extractor()

        self.generation, registry = self._load_state()
        self._audit = AuditLog(self.store_dir / AUDIT_FILE)
        shared = _threshold_from_obj(self._world.get("shared_threshold"))
        self.system = RevocableSystem(
            registry,
            self._extractor,
            threshold_mode=threshold_mode,
            shared_threshold=shared,
            audit=self._audit,
            clock=clock,
        )
        self._journal_fh = open(self._journal_path(self.generation), "a", encoding="utf-8")
        if bootstrap and not registry.instances():
            self._bootstrap_instances()

    # -- world ----------------------------------------------------------------

    def _resolve_world(
        self, config: Optional[SimWorldConfig], corpus_path: Optional[Union[str, Path]]
    ) -> dict:
        world_file = self.store_dir / WORLD_FILE
        if world_file.exists():
            world = json.loads(world_file.read_text(encoding="utf-8"))
            if world.get("kind") not in ("synthetic", "corpus"):
                raise StoreError(f"{world_file}: unrecognized world kind")
            return world
        if config is not None and corpus_path is not None:
            raise ValueError("pass a world config or a corpus path, not both")
        if corpus_path is not None:
            world: dict[str, Any] = {"kind": "corpus", "path": str(corpus_path)}
        else:
            if config is None:
                config = SimWorldConfig(num_identities=200, images_per_identity=4)
            world = {"kind": "synthetic", "config": config.as_dict()}
        world["fmr_target"] = self.fmr_target
        world["shared_threshold"] = None
        self._write_world(world)
        return world

    def _write_world(self, world: dict) -> None:
        world_file = self.store_dir / WORLD_FILE
        tmp = world_file.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(world, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, world_file)

    def _build_extractor(self):
        if self._world["kind"] == "corpus":
            return FileExtractor(EmbeddingStore.from_file(self._world["path"]))
        return SyntheticExtractor(SimWorldConfig.from_mapping(self._world["config"]))

    @property
    def config(self) -> Optional[SimWorldConfig]:
        if self._world["kind"] == "synthetic":
            return self._extractor.config
        return None

    @property
    def registry(self) -> Registry:
        return self.system.registry

    @property
    def poisoned(self) -> Optional[str]:
        return self._poisoned

    # -- boot -----------------------------------------------------------------

    def _journal_path(self, generation: int) -> Path:
        return self.store_dir / f"journal.{generation}.jsonl"

    def _snapshot_path(self, generation: int) -> Path:
        return self.store_dir / f"snapshot.{generation}.rbts"

    def _snapshot_generations(self) -> list[int]:
        gens = []
        for entry in self.store_dir.iterdir():
            match = _SNAPSHOT_RE.match(entry.name)
            if match:
                gens.append(int(match.group(1)))
        return sorted(gens)

    def _load_state(self) -> tuple[int, Registry]:
        for gen in reversed(self._snapshot_generations()):
            try:
                registry = Registry.snapshot_load(self._snapshot_path(gen), clock=self._clock)
            except (SnapshotIOError, RevBioError):
                continue  # unreadable generation (e.g. torn write): fall back
            self._replay_journal(self._journal_path(gen), registry)
            return gen, registry
        registry = Registry(self._extractor.dimension, clock=self._clock)
        self._replay_journal(self._journal_path(0), registry)
        return 0, registry

    def _replay_journal(self, path: Path, registry: Registry) -> None:
        if not path.exists():
            return
        raw = path.read_bytes()
        lines = raw.decode("utf-8").split("\n")
        clean_end = 0  # byte length of the intact prefix
        offset = 0
        for number, line in enumerate(lines, start=1):
            if line.strip():
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    if number == len(lines):  # torn tail from a crash mid-append
                        break
                    raise JournalCorruptError(f"{path}:{number}: unparseable journal line")
                self._apply_entry(registry, entry, path, number)
            offset += len(line.encode("utf-8")) + 1
            clean_end = min(offset, len(raw))
        if clean_end < len(raw):
            # drop the torn bytes so the next append starts a fresh line
            with open(path, "rb+") as fh:
                fh.truncate(clean_end)
                fh.flush()
                os.fsync(fh.fileno())

    @staticmethod
    def _apply_entry(registry: Registry, entry: dict, path: Path, number: int) -> None:
        op = entry.get("op")
        if op == "register_instance":
            registry.register_instance(
                entry["instance"],
                threshold=_threshold_from_obj(entry.get("threshold")),
                at=entry["at"],
            )
        elif op == "set_threshold":
            registry.set_threshold(entry["instance"], _threshold_from_obj(entry["threshold"]))
        elif op == "enroll":
            registry.enroll(
                entry["identity"],
                entry["instance"],
                _vector_from_b64(entry["vector"]),
                at=entry["at"],
            )
        elif op == "revoke":
            registry.revoke(
                entry["identity"],
                entry["instance"],
                _vector_from_b64(entry["vector"]),
                at=entry["at"],
            )
        else:
            raise JournalCorruptError(f"{path}:{number}: unknown op {op!r}")

    # -- journal --------------------------------------------------------------

    def _check_poisoned(self) -> None:
        if self._poisoned is not None:
            raise StorePoisonedError(f"store poisoned: {self._poisoned}")

    def _append(self, entry: dict) -> None:
        """Durably append one mutation; poison the store if that fails."""
        try:
            self._journal_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._journal_fh.flush()
            os.fsync(self._journal_fh.fileno())
        except OSError as exc:
            self._poisoned = f"journal append failed: {exc}"
            raise StorePoisonedError(self._poisoned) from exc

    # -- instance bootstrap -----------------------------------------------------

    def _calibration_scores(self) -> dict[str, np.ndarray]:
        from .evaluate import Corpus  # deferred: evaluate pulls in the whole harness

        if self._world["kind"] == "corpus":
            corpus = Corpus.from_records(self._world["path"])
        else:
            corpus = Corpus.from_config(self._extractor.config)
        protocol = corpus.pair_protocol()
        return {
            iid: corpus.same_model_scores(iid, protocol)[1]
            for iid in self._extractor.instances()
        }

    def _bootstrap_instances(self) -> None:
        impostors = self._calibration_scores()
        if self.threshold_mode == SHARED:
            pooled = np.concatenate(list(impostors.values()))
            spec = fmr_threshold(pooled, self.fmr_target)
            self.system.shared_threshold = spec
            self._world["shared_threshold"] = _threshold_to_obj(spec)
            self._write_world(self._world)
            per_instance = {iid: spec for iid in impostors}
        else:
            per_instance = {
                iid: fmr_threshold(scores, self.fmr_target)
                for iid, scores in impostors.items()
            }
        for iid in self._extractor.instances():
            self.register_instance(iid, per_instance[iid])

    # -- mutations --------------------------------------------------------------

    def register_instance(
        self, instance_id: str, threshold: Optional[ThresholdSpec] = None
    ):
        with self._lock:
            self._check_poisoned()
            record = self.registry.register_instance(instance_id, threshold=threshold)
            self._append(
                {
                    "op": "register_instance",
                    "instance": record.id,
                    "threshold": _threshold_to_obj(record.threshold),
                    "at": record.registered_at,
                }
            )
            return record

    def set_threshold(self, instance_id: str, threshold: ThresholdSpec):
        with self._lock:
            self._check_poisoned()
            record = self.registry.set_threshold(instance_id, threshold)
            self._append(
                {
                    "op": "set_threshold",
                    "instance": record.id,
                    "threshold": _threshold_to_obj(record.threshold),
                }
            )
            return record

    def enroll(
        self,
        identity_id: str,
        capture: Optional[CaptureDescriptor] = None,
        vector: Optional[np.ndarray] = None,
    ):
        with self._lock:
            self._check_poisoned()
            if capture is not None:
                record = self.system.enroll(identity_id, capture)
            else:
                record = self.system.enroll_raw_template(identity_id, vector)
            self._append(
                {
                    "op": "enroll",
                    "identity": record.identity_id,
                    "instance": record.active_instance,
                    "vector": _b64_vector(record.template),
                    "at": record.enrolled_at,
                }
            )
            return record

    def revoke(self, identity_id: str, capture: CaptureDescriptor):
        with self._lock:
            self._check_poisoned()
            outcome = self.system.revoke(identity_id, capture)
            record = self.registry.lookup(identity_id)
            self._append(
                {
                    "op": "revoke",
                    "identity": identity_id,
                    "instance": record.active_instance,
                    "vector": _b64_vector(record.template),
                    "at": record.revocation_history[-1][1],
                }
            )
            return outcome

    # -- reads ------------------------------------------------------------------

    def verify(
        self,
        identity_id: str,
        capture: Optional[CaptureDescriptor] = None,
        vector: Optional[np.ndarray] = None,
    ) -> VerificationDecision:
        self._check_poisoned()
        if capture is not None:
            return self.system.verify(identity_id, capture)
        return self.system.verify_raw_template(identity_id, vector)

    def identity_view(self, identity_id: str) -> dict:
        self._check_poisoned()
        record = self.registry.lookup(identity_id)
        return {
            "instance": record.active_instance,
            "enrolled_at": record.enrolled_at,
            "revocation_count": record.revocation_count,
        }

    def status(self) -> dict:
        return {
            "instances_registered": len(self.registry.instances()),
            "identities_enrolled": self.registry.identity_count,
            "threshold_mode": self.threshold_mode,
            "uptime": max(0.0, self._clock() - self._boot_time),
        }

    # -- snapshot lifecycle -------------------------------------------------------

    def snapshot(self) -> int:
        """Roll to the next generation; returns its number."""
        with self._lock:
            self._check_poisoned()
            new_gen = self.generation + 1
            self.registry.snapshot_save(self._snapshot_path(new_gen))
            new_fh = open(self._journal_path(new_gen), "a", encoding="utf-8")
            new_fh.flush()
            os.fsync(new_fh.fileno())
            _fsync_dir(self.store_dir)
            old_gen, old_fh = self.generation, self._journal_fh
            self.generation, self._journal_fh = new_gen, new_fh
            old_fh.close()
            for stale in (self._snapshot_path(old_gen), self._journal_path(old_gen)):
                try:
                    stale.unlink()
                except OSError:
                    pass
            return new_gen

    def close(self, take_snapshot: bool = True) -> None:
        """Graceful shutdown: snapshot (best effort), release file handles."""
        try:
            if take_snapshot and self._poisoned is None:
                self.snapshot()
        finally:
            self._journal_fh.close()
            self._audit.close()


# ------------------------------------------------------------------------------
# HTTP layer


def _parse_capture(obj: Any) -> CaptureDescriptor:
    if not isinstance(obj, dict):
        raise ApiError(400, "BAD_REQUEST", "capture must be an object")
    unknown = set(obj) - {"identity_index", "image_index", "group_label"}
    if unknown:
        raise ApiError(400, "BAD_REQUEST", f"unknown capture fields: {sorted(unknown)}")
    try:
        identity_index = obj["identity_index"]
        image_index = obj["image_index"]
    except KeyError as exc:
        raise ApiError(400, "BAD_REQUEST", f"capture missing field {exc}") from None
    for name, value in (("identity_index", identity_index), ("image_index", image_index)):
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ApiError(400, "BAD_REQUEST", f"{name} must be a non-negative integer")
    group = obj.get("group_label")
    if group is not None and not isinstance(group, str):
        raise ApiError(400, "BAD_REQUEST", "group_label must be a string")
    return CaptureDescriptor(identity_index, image_index, group_label=group)


def _parse_vector(obj: Any) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise ApiError(400, "BAD_REQUEST", "vector must be a non-empty array of numbers")
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in obj):
        raise ApiError(400, "BAD_REQUEST", "vector must contain only numbers")
    return np.asarray(obj, dtype=np.float32)


def _parse_probe(body: Any) -> tuple[Optional[CaptureDescriptor], Optional[np.ndarray]]:
    """Body must carry exactly one of ``capture`` or ``vector``."""
    if not isinstance(body, dict):
        raise ApiError(400, "BAD_REQUEST", "body must be a JSON object")
    has_capture = "capture" in body
    has_vector = "vector" in body
    if has_capture == has_vector:
        raise ApiError(400, "BAD_REQUEST", "provide exactly one of 'capture' or 'vector'")
    if has_capture:
        return _parse_capture(body["capture"]), None
    return None, _parse_vector(body["vector"])


async def _read_json(request: Request) -> Any:
    try:
        return await request.json()
    except Exception:
        raise ApiError(400, "BAD_REQUEST", "request body is not valid JSON") from None


def _error_response(error: ApiError) -> JSONResponse:
    return JSONResponse(status_code=error.http_status, content=error.as_dict())


def create_app(store: PersistentStore, admin_token: Optional[str] = None) -> FastAPI:
    """Wire the store into the versioned HTTP API.

    ``admin_token`` guards /api/v1/admin/*; when None those endpoints always
    reject.  Template vectors never leave the process: responses carry only
    ids, timestamps, scores, and decisions.
    """
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        try:
            store.close()  # graceful shutdown: snapshot + release handles
        except Exception:
            pass  # shutdown must not raise; boot replays the journal anyway

    app = FastAPI(
        title="revbio", docs_url=None, redoc_url=None, openapi_url=None, lifespan=lifespan
    )
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _on_api_error(request: Request, exc: ApiError) -> JSONResponse:
        return _error_response(exc)

    def guarded(fn: Callable[..., Any]) -> Any:
        try:
            return fn()
        except Exception as exc:  # total mapping, INTERNAL as last resort
            raise map_exception(exc) from exc

    def require_admin(request: Request) -> None:
        supplied = request.headers.get("authorization", "")
        expected = f"Bearer {admin_token}" if admin_token else None
        if expected is None or not hmac.compare_digest(supplied, expected):
            raise ApiError(401, "BAD_REQUEST", "admin authorization required")

    @app.post("/api/v1/identities/{identity_id}/enroll", status_code=201)
    async def enroll(identity_id: str, request: Request) -> JSONResponse:
        capture, vector = _parse_probe(await _read_json(request))
        record = guarded(lambda: store.enroll(identity_id, capture=capture, vector=vector))
        return JSONResponse(
            status_code=201,
            content={"instance": record.active_instance, "enrolled_at": record.enrolled_at},
        )

    @app.post("/api/v1/identities/{identity_id}/verify")
    async def verify(identity_id: str, request: Request) -> dict:
        capture, vector = _parse_probe(await _read_json(request))
        decision = guarded(lambda: store.verify(identity_id, capture=capture, vector=vector))
        return {
            "accepted": decision.accepted,
            "score": decision.score,
            "instance": decision.instance_used,
            "threshold": decision.threshold_used,
        }

    @app.post("/api/v1/identities/{identity_id}/revoke")
    async def revoke(identity_id: str, request: Request) -> dict:
        body = await _read_json(request)
        if not isinstance(body, dict) or "capture" not in body:
            raise ApiError(400, "BAD_REQUEST", "revocation requires a fresh capture")
        capture = _parse_capture(body["capture"])
        outcome = guarded(lambda: store.revoke(identity_id, capture))
        return {"old_instance": outcome.old_instance, "new_instance": outcome.new_instance}

    @app.get("/api/v1/identities/{identity_id}")
    async def identity_view(identity_id: str) -> dict:
        return guarded(lambda: store.identity_view(identity_id))

    @app.get("/api/v1/system/status")
    async def system_status() -> dict:
        return guarded(store.status)

    # -- admin ------------------------------------------------------------------

    @app.post("/api/v1/admin/instances", status_code=201)
    async def admin_register(request: Request) -> JSONResponse:
        require_admin(request)
        body = await _read_json(request)
        if not isinstance(body, dict) or not isinstance(body.get("instance"), str):
            raise ApiError(400, "BAD_REQUEST", "body requires an 'instance' id string")
        spec = _parse_threshold(body.get("threshold"))
        record = guarded(lambda: store.register_instance(body["instance"], spec))
        return JSONResponse(
            status_code=201,
            content={"instance": record.id, "index": record.index, "status": record.status},
        )

    @app.put("/api/v1/admin/instances/{instance_id}/threshold")
    async def admin_set_threshold(instance_id: str, request: Request) -> dict:
        require_admin(request)
        body = await _read_json(request)
        if not isinstance(body, dict) or "threshold" not in body:
            raise ApiError(400, "BAD_REQUEST", "body requires a 'threshold' object")
        spec = _parse_threshold(body["threshold"])
        if spec is None:
            raise ApiError(400, "BAD_REQUEST", "threshold must not be null")
        record = guarded(lambda: store.set_threshold(instance_id, spec))
        return {"instance": record.id, "threshold": record.threshold.threshold}

    @app.post("/api/v1/admin/snapshot")
    async def admin_snapshot(request: Request) -> dict:
        require_admin(request)
        return {"generation": guarded(store.snapshot)}

    return app


def _parse_threshold(obj: Any) -> Optional[ThresholdSpec]:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise ApiError(400, "BAD_REQUEST", "threshold must be an object")
    try:
        return ThresholdSpec(
            threshold=float(obj["threshold"]),
            fmr_target=float(obj["fmr_target"]),
            empirical_fmr=float(obj.get("empirical_fmr", 0.0)),
            impostor_count=int(obj.get("impostor_count", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ApiError(
            400, "BAD_REQUEST", "threshold requires numeric 'threshold' and 'fmr_target'"
        ) from exc
