import dataclasses
import threading
import time

import numpy as np
import pytest

from revbio.embedding import DimMismatchError, FeatureVector, normalize
from revbio.errors import UnknownInstanceError
from revbio.metrics import ThresholdSpec
from revbio.registry import (
    AlreadyEnrolledError,
    CorruptSnapshotError,
    DuplicateInstanceError,
    GallerySnapshot,
    IdentityRecord,
    InstancePoolExhaustedError,
    ModelInstanceRecord,
    Registry,
    SnapshotIOError,
    UnknownIdentityError,
    VersionMismatchError,
    crc32c,
)
from revbio.registry import SNAPSHOT_VERSION, decode_snapshot, encode_snapshot

DIM = 8


def unit(seed: int) -> FeatureVector:
    rng = np.random.default_rng(seed)
    return normalize(rng.normal(size=DIM).astype(np.float32))


def fresh_registry(num_instances: int = 3, clock=None) -> Registry:
    reg = Registry(DIM, clock=clock) if clock else Registry(DIM)
    for k in range(num_instances):
        reg.register_instance(f"m{k}", at=float(k))
    return reg


# ---------------------------------------------------------------------------
# crc32c


def test_crc32c_check_value():
    # standard Castagnoli check value
    assert crc32c(b"123456789") == 0xE3069283


def test_crc32c_empty():
    assert crc32c(b"") == 0


def test_crc32c_streaming():
    data = bytes(range(256)) * 3
    for split in (0, 1, 100, 500, len(data)):
        head, tail = data[:split], data[split:]
        assert crc32c(tail, crc=crc32c(head)) == crc32c(data)


# ---------------------------------------------------------------------------
# instances


def test_registry_rejects_bad_dimension():
    with pytest.raises(ValueError):
        Registry(0)


def test_register_instance_records_order():
    reg = fresh_registry(3)
    records = reg.instances()
    assert [r.id for r in records] == ["m0", "m1", "m2"]
    assert [r.index for r in records] == [0, 1, 2]
    assert all(r.status == "available" for r in records)
    assert reg.instance("m1").registered_at == 1.0


def test_register_instance_duplicate():
    reg = fresh_registry(1)
    with pytest.raises(DuplicateInstanceError):
        reg.register_instance("m0")


def test_unknown_instance_lookup():
    reg = fresh_registry(1)
    with pytest.raises(UnknownInstanceError):
        reg.instance("m9")


def test_set_threshold():
    reg = fresh_registry(1)
    spec = ThresholdSpec(threshold=0.2, fmr_target=1e-3, empirical_fmr=9e-4, impostor_count=5000)
    reg.set_threshold("m0", spec)
    assert reg.instance("m0").threshold == spec
    with pytest.raises(UnknownInstanceError):
        reg.set_threshold("m9", spec)


def test_clock_supplies_timestamps():
    ticks = iter(range(100, 200))
    reg = Registry(DIM, clock=lambda: float(next(ticks)))
    reg.register_instance("m0")
    assert reg.instance("m0").registered_at == 100.0
    reg.register_instance("m1", at=3.5)  # explicit at= wins over the clock
    assert reg.instance("m1").registered_at == 3.5
    reg.enroll("alice", "m0", unit(1))
    assert reg.lookup("alice").enrolled_at == 101.0


# ---------------------------------------------------------------------------
# assignment policy


def test_assign_next_prefers_lowest_index():
    reg = fresh_registry(3)
    assert reg.assign_next_instance("alice") == "m0"
    # read-only: asking twice consumes nothing
    assert reg.assign_next_instance("alice") == "m0"


def test_assign_next_skips_instances_already_used():
    reg = fresh_registry(3)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    assert reg.assign_next_instance("alice") == "m1"
    reg.revoke("alice", "m1", unit(2), at=1.0)
    assert reg.assign_next_instance("alice") == "m2"
    # another identity still starts from the bottom of the pool
    assert reg.assign_next_instance("bob") == "m0"


def test_assign_next_pool_exhausted():
    reg = fresh_registry(2)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    reg.revoke("alice", "m1", unit(2), at=1.0)
    with pytest.raises(InstancePoolExhaustedError):
        reg.assign_next_instance("alice")


# ---------------------------------------------------------------------------
# enroll / revoke


def test_enroll_roundtrip():
    reg = fresh_registry(2)
    template = unit(3)
    record = reg.enroll("alice", "m0", template, at=5.0)
    assert record.identity_id == "alice"
    assert record.active_instance == "m0"
    assert record.template == template
    assert record.enrolled_at == 5.0
    assert record.revocation_count == 0
    assert reg.lookup("alice") == record
    assert reg.identity_count == 1
    assert reg.identity_ids() == ("alice",)
    assert reg.instance("m0").status == "in_service"
    assert reg.instance("m1").status == "available"


def test_enroll_rejections():
    reg = fresh_registry(1)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    with pytest.raises(AlreadyEnrolledError):
        reg.enroll("alice", "m0", unit(2))
    with pytest.raises(UnknownInstanceError):
        reg.enroll("bob", "m9", unit(2))
    with pytest.raises(TypeError):
        reg.enroll("bob", "m0", np.ones(DIM, dtype=np.float32))
    with pytest.raises(DimMismatchError):
        reg.enroll("bob", "m0", normalize(np.ones(DIM + 1, dtype=np.float32)))
    raw = FeatureVector(np.ones(DIM, dtype=np.float32))  # not normalized
    with pytest.raises(ValueError):
        reg.enroll("bob", "m0", raw)


def test_revoke_appends_history_and_swaps_template():
    reg = fresh_registry(3)
    first = unit(1)
    second = unit(2)
    reg.enroll("alice", "m0", first, at=10.0)
    old, new = reg.revoke("alice", "m1", second, at=20.0)
    assert old.active_instance == "m0"
    assert new.active_instance == "m1"
    assert new.template == second
    assert new.enrolled_at == 10.0  # original enrollment time survives
    assert new.revocation_history == (("m0", 20.0),)
    assert new.revocation_count == 1
    assert reg.lookup("alice") == new


def test_revoke_never_reuses_instance():
    reg = fresh_registry(3)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    reg.revoke("alice", "m1", unit(2), at=1.0)
    for burnt in ("m0", "m1"):
        with pytest.raises(ValueError):
            reg.revoke("alice", burnt, unit(3), at=2.0)


def test_revoke_unknown_identity():
    reg = fresh_registry(2)
    with pytest.raises(UnknownIdentityError):
        reg.revoke("ghost", "m0", unit(1))


def test_revoke_releases_instance_status():
    reg = fresh_registry(3)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    reg.enroll("bob", "m0", unit(2), at=0.0)
    reg.revoke("alice", "m1", unit(3), at=1.0)
    assert reg.instance("m0").status == "in_service"  # bob still on it
    reg.revoke("bob", "m2", unit(4), at=2.0)
    assert reg.instance("m0").status == "available"


def test_revoke_leaves_other_identities_untouched():
    reg = fresh_registry(3)
    reg.enroll("alice", "m0", unit(1), at=0.0)
    reg.enroll("bob", "m0", unit(2), at=0.0)
    before = reg.lookup("bob")
    reg.revoke("alice", "m1", unit(3), at=1.0)
    after = reg.lookup("bob")
    assert after is before  # untouched object, bitwise identical template
    assert after.template.tobytes() == before.template.tobytes()


def test_lookup_unknown():
    reg = fresh_registry(1)
    with pytest.raises(UnknownIdentityError):
        reg.lookup("ghost")


# ---------------------------------------------------------------------------
# snapshots


def populated_registry() -> Registry:
    reg = fresh_registry(4)
    spec = ThresholdSpec(threshold=0.25, fmr_target=1e-4, empirical_fmr=8e-5, impostor_count=10_000)
    for k in range(4):
        reg.set_threshold(f"m{k}", dataclasses.replace(spec, threshold=0.25 + 0.01 * k))
    reg.enroll("alice", "m0", unit(1), at=100.0)
    reg.enroll("bob", "m0", unit(2), at=101.0)
    reg.revoke("alice", "m1", unit(3), at=102.0)
    reg.revoke("alice", "m2", unit(4), at=103.0)
    return reg


def test_snapshot_roundtrip_bit_exact(tmp_path):
    reg = populated_registry()
    path = tmp_path / "gallery.rbts"
    reg.snapshot_save(path)
    loaded = Registry.snapshot_load(path)

    assert loaded.dimension == reg.dimension
    assert loaded.identity_ids() == reg.identity_ids()
    for identity in reg.identity_ids():
        orig, back = reg.lookup(identity), loaded.lookup(identity)
        assert back.template.tobytes() == orig.template.tobytes()
        assert back.active_instance == orig.active_instance
        assert back.enrolled_at == orig.enrolled_at
        assert back.revocation_history == orig.revocation_history
    assert [ (r.id, r.index, r.status, r.threshold, r.registered_at) for r in loaded.instances() ] == [
        (r.id, r.index, r.status, r.threshold, r.registered_at) for r in reg.instances()
    ]
    # re-encoding the loaded registry reproduces the file byte for byte
    assert loaded.to_snapshot_bytes() == path.read_bytes()


def test_snapshot_codec_roundtrip_in_memory():
    snap = populated_registry().to_snapshot()
    back = decode_snapshot(encode_snapshot(snap))
    assert back.format_version == SNAPSHOT_VERSION
    assert back.dimension == snap.dimension
    assert back.instances == snap.instances
    assert [r.identity_id for r in back.identities] == [r.identity_id for r in snap.identities]
    for orig, dec in zip(snap.identities, back.identities):
        assert dec.template == orig.template


def test_snapshot_detects_bit_flip(tmp_path):
    reg = populated_registry()
    path = tmp_path / "gallery.rbts"
    reg.snapshot_save(path)
    data = bytearray(path.read_bytes())
    for pos in (10, len(data) // 2, len(data) - 5):
        corrupted = bytearray(data)
        corrupted[pos] ^= 0x40
        with pytest.raises(CorruptSnapshotError):
            decode_snapshot(bytes(corrupted))


def test_snapshot_detects_truncation(tmp_path):
    reg = populated_registry()
    path = tmp_path / "gallery.rbts"
    reg.snapshot_save(path)
    data = path.read_bytes()
    for cut in (3, 9, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptSnapshotError):
            decode_snapshot(data[:cut])


def test_snapshot_bad_magic():
    with pytest.raises(CorruptSnapshotError, match="magic"):
        decode_snapshot(b"XXXX" + bytes(16))


def test_snapshot_version_mismatch(tmp_path):
    reg = populated_registry()
    data = bytearray(reg.to_snapshot_bytes())
    data[4] = SNAPSHOT_VERSION + 1  # u16 LE version field
    with pytest.raises(VersionMismatchError):
        decode_snapshot(bytes(data))


def test_snapshot_load_missing_file(tmp_path):
    with pytest.raises(SnapshotIOError):
        Registry.snapshot_load(tmp_path / "missing.rbts")


def test_snapshot_save_is_atomic(tmp_path, monkeypatch):
    reg = populated_registry()
    path = tmp_path / "gallery.rbts"
    reg.snapshot_save(path)
    original = path.read_bytes()

    reg.enroll("carol", "m0", unit(9), at=200.0)

    def boom(src, dst):
        raise OSError("simulated rename failure")

    monkeypatch.setattr("revbio.registry.os.replace", boom)
    with pytest.raises(SnapshotIOError):
        reg.snapshot_save(path)
    monkeypatch.undo()

    assert path.read_bytes() == original  # old snapshot untouched
    assert not (tmp_path / "gallery.rbts.tmp").exists()
    loaded = Registry.snapshot_load(path)
    assert "carol" not in loaded.identity_ids()


def test_from_snapshot_rejects_dangling_instance_refs():
    good = populated_registry().to_snapshot()
    ghost = dataclasses.replace(good.identities[0], active_instance="m99")
    bad = GallerySnapshot(
        format_version=good.format_version,
        dimension=good.dimension,
        instances=good.instances,
        identities=(ghost,) + good.identities[1:],
    )
    with pytest.raises(CorruptSnapshotError):
        Registry.from_snapshot(bad)


def test_snapshot_size_dominated_by_float32_vectors(tmp_path):
    dim = 512
    reg = Registry(dim)
    reg.register_instance("m0", at=0.0)
    template = normalize(np.random.default_rng(0).normal(size=dim).astype(np.float32))
    n = 50
    for i in range(n):
        reg.enroll(f"id{i:05d}", "m0", template, at=0.0)
    path = tmp_path / "size.rbts"
    reg.snapshot_save(path)
    size = path.stat().st_size
    vectors = n * (4 + 4 * dim)  # count prefix + float32 payload
    assert size >= vectors
    assert size <= vectors + n * 200 + 4096  # metadata stays small


# ---------------------------------------------------------------------------
# scale and concurrency smoke


def test_lookup_stays_fast_at_scale():
    reg = Registry(DIM)
    reg.register_instance("m0", at=0.0)
    template = unit(0)
    n = 100_000
    for i in range(n):
        reg._identities[f"id{i:06d}"] = IdentityRecord(
            identity_id=f"id{i:06d}", active_instance="m0",
            template=template, enrolled_at=0.0,
        )
    probe_ids = [f"id{i:06d}" for i in range(0, n, 97)]
    reg.lookup(probe_ids[0])  # warm
    start = time.perf_counter()
    rounds = 20
    for _ in range(rounds):
        for pid in probe_ids:
            reg.lookup(pid)
    elapsed = time.perf_counter() - start
    per_lookup = elapsed / (rounds * len(probe_ids))
    assert per_lookup < 5e-6  # hash lookup, independent of population size


def test_concurrent_enrolls_are_serialized():
    reg = fresh_registry(1)
    template = unit(5)
    errors = []

    def worker(base):
        try:
            for i in range(50):
                reg.enroll(f"user-{base}-{i}", "m0", template, at=0.0)
        except Exception as exc:  # pragma: no cover - failure reporting only
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert reg.identity_count == 400
    assert reg.instance("m0").status == "in_service"
