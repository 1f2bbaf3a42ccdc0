"""Enrollment, verification, and revocation over a registry and an extractor.

The protocol in one sentence: an identity enrolls under the lowest free
matcher instance; verification re-extracts the probe with that identity's
instance and compares against the stored template with a strict
``score > threshold`` rule; revocation retires the instance for that
identity forever and re-enrolls a fresh capture under the next instance,
leaving every other identity untouched.

Every operation can append a structured audit event (JSON Lines).  Events
carry a score rounded to two decimals and never the template or probe
vectors; full-precision scores would let an observer reconstruct template
geometry over many probes.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Callable, Optional, Union

import numpy as np

from .embedding import DimMismatchError, FeatureVector, cosine_similarity, normalize
from .errors import RevBioError
from .metrics import ThresholdSpec
from .registry import IdentityRecord, Registry
from .simulate import CaptureDescriptor, ExtractorPort

__all__ = [
    "AuditLog",
    "MissingThresholdError",
    "RevocableSystem",
    "RevocationOutcome",
    "VerificationDecision",
    "PER_INSTANCE",
    "SHARED",
]

PER_INSTANCE = "per-instance"
SHARED = "shared"


class MissingThresholdError(RevBioError):
    """Verification requested before an operating threshold was configured."""


@dataclass(frozen=True)
class VerificationDecision:
    """Outcome of one verification; accepted iff score > threshold_used."""

    accepted: bool
    score: float
    instance_used: str
    threshold_used: float


@dataclass(frozen=True)
class RevocationOutcome:
    """Result of revoking one identity and re-enrolling it."""

    identity_id: str
    old_instance: str
    new_instance: str
    new_template_digest: str


class AuditLog:
    """Append-only JSON Lines event sink, one flush per event."""

    def __init__(self, target: Union[str, Path, IO[str]]):
        if isinstance(target, (str, Path)):
            self._fh: IO[str] = open(target, "a", encoding="utf-8", newline="\n")
            self._owns = True
        else:
            self._fh = target
            self._owns = False
        self._lock = threading.Lock()

    def append(self, event: dict) -> None:
        line = json.dumps(event, sort_keys=True, separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._owns:
            self._fh.close()


class RevocableSystem:
    """The lifecycle façade: enroll / verify / revoke against one registry.

    ``threshold_mode`` selects where the accept threshold comes from:
    ``per-instance`` (each instance record carries its own, the safer
    default) or ``shared`` (one system-wide ThresholdSpec).  ``audit_enabled``
    can be cleared while replaying an operation log so historical events are
    not re-emitted.
    """

    def __init__(
        self,
        registry: Registry,
        extractor: ExtractorPort,
        threshold_mode: str = PER_INSTANCE,
        shared_threshold: Optional[ThresholdSpec] = None,
        audit: Optional[AuditLog] = None,
        clock: Callable[[], float] = time.time,
    ):
        if threshold_mode not in (PER_INSTANCE, SHARED):
            raise ValueError(f"threshold_mode must be {PER_INSTANCE!r} or {SHARED!r}")
        if extractor.dimension != registry.dimension:
            raise DimMismatchError(
                f"extractor dim {extractor.dimension} != registry dim {registry.dimension}"
            )
        self.registry = registry
        self.extractor = extractor
        self.threshold_mode = threshold_mode
        self.shared_threshold = shared_threshold
        self.audit = audit
        self.audit_enabled = True
        self._clock = clock

    # -- operations ----------------------------------------------------------

    def enroll(
        self, identity_id: str, capture: CaptureDescriptor, at: Optional[float] = None
    ) -> IdentityRecord:
        instance_id = self.registry.assign_next_instance(identity_id)
        template = self.extractor.extract(capture, instance_id)
        record = self.registry.enroll(identity_id, instance_id, template, at=at)
        self._audit("enroll", identity_id, instance_id, "enrolled", None, at)
        return record

    def enroll_raw_template(
        self,
        identity_id: str,
        vector: Union[FeatureVector, np.ndarray],
        at: Optional[float] = None,
    ) -> IdentityRecord:
        """Enroll an externally extracted template (federated clients)."""
        template = self._as_probe(vector)
        if not template.normalized:
            template = normalize(template)
        instance_id = self.registry.assign_next_instance(identity_id)
        record = self.registry.enroll(identity_id, instance_id, template, at=at)
        self._audit("enroll", identity_id, instance_id, "enrolled", None, at)
        return record

    def verify(self, identity_id: str, capture: CaptureDescriptor) -> VerificationDecision:
        record = self.registry.lookup(identity_id)
        probe = self.extractor.extract(capture, record.active_instance)
        return self._decide("verify", record, probe)

    def verify_raw_template(
        self, identity_id: str, probe: Union[FeatureVector, np.ndarray]
    ) -> VerificationDecision:
        """Score a caller-supplied vector against the stored template.

        This is the attack-replay entry point: no extraction happens, so a
        stolen template can be presented directly.
        """
        record = self.registry.lookup(identity_id)
        vector = self._as_probe(probe)
        if vector.dim != self.registry.dimension:
            raise DimMismatchError(
                f"probe dim {vector.dim} != registry dim {self.registry.dimension}"
            )
        return self._decide("verify_raw", record, vector)

    def revoke(
        self, identity_id: str, fresh_capture: CaptureDescriptor, at: Optional[float] = None
    ) -> RevocationOutcome:
        old = self.registry.lookup(identity_id)
        new_instance = self.registry.assign_next_instance(identity_id)
        new_template = self.extractor.extract(fresh_capture, new_instance)
        self.registry.revoke(identity_id, new_instance, new_template, at=at)
        self._audit("revoke", identity_id, new_instance, "revoked", None, at)
        return RevocationOutcome(
            identity_id=identity_id,
            old_instance=old.active_instance,
            new_instance=new_instance,
            new_template_digest=hashlib.sha256(new_template.tobytes()).hexdigest(),
        )

    # -- internals ----------------------------------------------------------

    @staticmethod
    def _as_probe(probe: Union[FeatureVector, np.ndarray]) -> FeatureVector:
        if isinstance(probe, FeatureVector):
            return probe
        return FeatureVector(np.asarray(probe, dtype=np.float32))

    def threshold_for(self, instance_id: str) -> ThresholdSpec:
        if self.threshold_mode == SHARED:
            if self.shared_threshold is None:
                raise MissingThresholdError("shared threshold mode but none configured")
            return self.shared_threshold
        spec = self.registry.instance(instance_id).threshold
        if spec is None:
            raise MissingThresholdError(f"instance {instance_id!r} has no threshold")
        return spec

    def _decide(
        self, op: str, record: IdentityRecord, probe: FeatureVector
    ) -> VerificationDecision:
        spec = self.threshold_for(record.active_instance)
        score = cosine_similarity(probe, record.template)
        decision = VerificationDecision(
            accepted=score > spec.threshold,
            score=score,
            instance_used=record.active_instance,
            threshold_used=spec.threshold,
        )
        self._audit(
            op,
            record.identity_id,
            record.active_instance,
            "accept" if decision.accepted else "reject",
            round(score, 2),
            None,
        )
        return decision

    def _audit(
        self,
        op: str,
        identity: str,
        instance: str,
        decision: str,
        score_band: Optional[float],
        at: Optional[float],
    ) -> None:
        if self.audit is None or not self.audit_enabled:
            return
        self.audit.append(
            {
                "ts": self._clock() if at is None else float(at),
                "op": op,
                "identity": identity,
                "instance": instance,
                "decision": decision,
                "score_band": score_band,
            }
        )
