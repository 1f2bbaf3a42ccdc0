import dataclasses
import hashlib
import io
import json

import numpy as np
import pytest

from revbio.embedding import DimMismatchError
from revbio.lifecycle import (
    PER_INSTANCE,
    SHARED,
    AuditLog,
    MissingThresholdError,
    RevocableSystem,
)
from revbio.metrics import ThresholdSpec
from revbio.registry import InstancePoolExhaustedError, Registry, UnknownIdentityError
from revbio.simulate import CaptureDescriptor


@pytest.fixture()
def system(separated_registry, separated_extractor) -> RevocableSystem:
    return RevocableSystem(separated_registry, separated_extractor, clock=lambda: 0.0)


CAP = CaptureDescriptor


# ---------------------------------------------------------------------------
# construction


def test_rejects_unknown_threshold_mode(separated_registry, separated_extractor):
    with pytest.raises(ValueError):
        RevocableSystem(separated_registry, separated_extractor, threshold_mode="global")


def test_rejects_dimension_mismatch(separated_extractor):
    with pytest.raises(DimMismatchError):
        RevocableSystem(Registry(separated_extractor.dimension + 1), separated_extractor)


# ---------------------------------------------------------------------------
# enroll / verify


def test_enroll_assigns_lowest_free_instance(system):
    record = system.enroll("alice", CAP(0, 0), at=1.0)
    assert record.active_instance == "m0"
    assert record.enrolled_at == 1.0
    # the pool is shared: a second identity also starts on m0
    assert system.enroll("bob", CAP(1, 0), at=1.0).active_instance == "m0"


def test_verify_self_capture_scores_one(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify("alice", CAP(0, 0))
    assert decision.accepted
    assert decision.score == pytest.approx(1.0, abs=1e-12)
    assert decision.instance_used == "m0"


def test_verify_second_image_accepted(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify("alice", CAP(0, 1))
    assert decision.accepted
    assert decision.score > decision.threshold_used


def test_verify_impostor_capture_rejected(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify("alice", CAP(1, 0))  # someone else's face
    assert not decision.accepted


def test_accept_rule_is_strictly_greater(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    score = system.verify("alice", CAP(0, 1)).score
    spec = system.registry.instance("m0").threshold
    system.registry.set_threshold("m0", dataclasses.replace(spec, threshold=score))
    repeat = system.verify("alice", CAP(0, 1))
    assert repeat.score == score  # same capture, same bytes, same score
    assert not repeat.accepted  # score > threshold is strict


def test_verify_unknown_identity(system):
    with pytest.raises(UnknownIdentityError):
        system.verify("ghost", CAP(0, 0))


def test_verify_without_threshold(separated_config, separated_extractor):
    registry = Registry(separated_config.dim)
    for iid in separated_config.instance_ids():
        registry.register_instance(iid, at=0.0)  # no thresholds anywhere
    system = RevocableSystem(registry, separated_extractor)
    system.enroll("alice", CAP(0, 0), at=0.0)
    with pytest.raises(MissingThresholdError):
        system.verify("alice", CAP(0, 1))


def test_shared_threshold_mode(separated_registry, separated_extractor):
    spec = ThresholdSpec(threshold=0.5, fmr_target=1e-3, empirical_fmr=0.0, impostor_count=0)
    system = RevocableSystem(
        separated_registry, separated_extractor,
        threshold_mode=SHARED, shared_threshold=spec,
    )
    system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify("alice", CAP(0, 1))
    assert decision.threshold_used == 0.5  # instance spec ignored in shared mode
    assert system.threshold_for("m3") is spec

    bare = RevocableSystem(separated_registry, separated_extractor, threshold_mode=SHARED)
    with pytest.raises(MissingThresholdError):
        bare.threshold_for("m0")


def test_threshold_mode_constants_are_distinct():
    assert PER_INSTANCE != SHARED


# ---------------------------------------------------------------------------
# raw-template paths


def test_enroll_raw_template_normalizes(system):
    rng = np.random.default_rng(0)
    raw = rng.normal(size=system.registry.dimension).astype(np.float32) * 3.0
    record = system.enroll_raw_template("alice", raw, at=0.0)
    assert record.template.normalized
    decision = system.verify_raw_template("alice", raw)
    assert decision.accepted
    assert decision.score == pytest.approx(1.0, abs=1e-6)


def test_verify_raw_template_dim_mismatch(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    with pytest.raises(DimMismatchError):
        system.verify_raw_template("alice", np.ones(16, dtype=np.float32))


def test_verify_raw_accepts_feature_vector(system):
    record = system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify_raw_template("alice", record.template)
    assert decision.accepted
    assert decision.score == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# revocation


def test_revoke_cycles_instances(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    outcome = system.revoke("alice", CAP(0, 1), at=5.0)
    assert outcome.old_instance == "m0"
    assert outcome.new_instance == "m1"
    record = system.registry.lookup("alice")
    assert record.active_instance == "m1"
    assert record.revocation_history == (("m0", 5.0),)
    expect = hashlib.sha256(record.template.tobytes()).hexdigest()
    assert outcome.new_template_digest == expect


def test_revoked_template_replay_rejected_fresh_accepted(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    stolen = system.registry.lookup("alice").template  # exfiltrated today
    system.revoke("alice", CAP(0, 1), at=1.0)

    replay = system.verify_raw_template("alice", stolen)
    assert not replay.accepted
    assert replay.score < replay.threshold_used
    assert replay.instance_used == "m1"

    fresh = system.verify("alice", CAP(0, 2))
    assert fresh.accepted


def test_pool_exhaustion(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    for step, image in enumerate((1, 2, 0), start=1):
        outcome = system.revoke("alice", CAP(0, image), at=float(step))
        assert outcome.new_instance == f"m{step}"
    with pytest.raises(InstancePoolExhaustedError):
        system.revoke("alice", CAP(0, 1), at=9.0)


def test_revoke_does_not_disturb_other_identities(system):
    system.enroll("alice", CAP(0, 0), at=0.0)
    system.enroll("bob", CAP(1, 0), at=0.0)
    before = system.verify("bob", CAP(1, 1))
    system.revoke("alice", CAP(0, 1), at=1.0)
    after = system.verify("bob", CAP(1, 1))
    assert after.accepted == before.accepted
    assert after.score == before.score  # bit-identical, not merely close
    assert after.instance_used == before.instance_used
    assert after.threshold_used == before.threshold_used


# ---------------------------------------------------------------------------
# audit trail


def audited_system(separated_registry, separated_extractor, sink):
    return RevocableSystem(
        separated_registry,
        separated_extractor,
        audit=AuditLog(sink),
        clock=lambda: 99.0,
    )


def test_audit_event_schema(separated_registry, separated_extractor):
    sink = io.StringIO()
    system = audited_system(separated_registry, separated_extractor, sink)
    system.enroll("alice", CAP(0, 0), at=1.0)
    system.verify("alice", CAP(0, 1))
    system.revoke("alice", CAP(0, 2), at=2.0)
    system.verify_raw_template("alice", system.registry.lookup("alice").template)

    events = [json.loads(line) for line in sink.getvalue().splitlines()]
    assert [e["op"] for e in events] == ["enroll", "verify", "revoke", "verify_raw"]
    for event in events:
        assert set(event) == {"ts", "op", "identity", "instance", "decision", "score_band"}
        assert event["identity"] == "alice"

    enroll, verify, revoke, raw = events
    assert enroll["decision"] == "enrolled" and enroll["score_band"] is None
    assert enroll["ts"] == 1.0  # at= flows into the event time
    assert verify["decision"] == "accept"
    assert verify["ts"] == 99.0  # clock time when no at= given
    assert revoke["decision"] == "revoked" and revoke["instance"] == "m1"
    assert raw["decision"] == "accept" and raw["score_band"] == 1.0


def test_audit_score_is_banded_not_exact(separated_registry, separated_extractor):
    sink = io.StringIO()
    system = audited_system(separated_registry, separated_extractor, sink)
    system.enroll("alice", CAP(0, 0), at=0.0)
    decision = system.verify("alice", CAP(0, 1))
    event = json.loads(sink.getvalue().splitlines()[-1])
    assert event["score_band"] == round(decision.score, 2)
    assert event["score_band"] != decision.score  # full precision never logged


def test_audit_never_contains_vectors(separated_registry, separated_extractor):
    sink = io.StringIO()
    system = audited_system(separated_registry, separated_extractor, sink)
    record = system.enroll("alice", CAP(0, 0), at=0.0)
    system.verify("alice", CAP(0, 1))
    system.revoke("alice", CAP(0, 2), at=1.0)
    text = sink.getvalue()
    for component in record.template.tolist()[:8]:
        assert repr(component) not in text
    assert "vector" not in text and "template" not in text


def test_audit_can_be_suppressed(separated_registry, separated_extractor):
    sink = io.StringIO()
    system = audited_system(separated_registry, separated_extractor, sink)
    system.audit_enabled = False
    system.enroll("alice", CAP(0, 0), at=0.0)
    system.verify("alice", CAP(0, 1))
    assert sink.getvalue() == ""


def test_audit_log_file_append(tmp_path):
    path = tmp_path / "audit.jsonl"
    log = AuditLog(path)
    log.append({"op": "x"})
    log.close()
    log = AuditLog(path)  # reopen appends, never truncates
    log.append({"op": "y"})
    log.close()
    ops = [json.loads(line)["op"] for line in path.read_text().splitlines()]
    assert ops == ["x", "y"]


def test_operations_work_without_audit(system):
    # audit is optional end to end
    system.enroll("alice", CAP(0, 0), at=0.0)
    assert system.verify("alice", CAP(0, 1)).accepted
    system.revoke("alice", CAP(0, 2), at=1.0)
    assert system.audit is None
