import uuid

import pytest
from hypothesis import given, strategies as st

from aigcflow.dbstore import (
    DbStore, PutConflict, StoreKind, StoreMessage, client_fetch, replica_peers,
)
from aigcflow.message import MalformedMessage, decode, encode

UID = uuid.UUID(int=42)


def deliver(stores, now, drop=lambda peer, msg: False):
    by_id = {s.instance_id: s for s in stores}
    moved = True
    while moved:
        moved = False
        for s in stores:
            for peer, msg in s.take_outbox():
                moved = True
                if not drop(peer, msg) and by_id[peer].alive:
                    by_id[peer].receive(msg, now)


def test_put_get_same_instance():
    db = DbStore(1)
    db.put(UID, b"img", 0)
    assert db.get(UID, 1) == b"img"


def test_replica_serves_after_replication():
    a, b = DbStore(1), DbStore(2)
    a.put(UID, b"img", 0, peers=[2])
    deliver([a, b], 0)
    assert b.get(UID, 1) == b"img"


def test_replication_dropped_retry_hits_origin():
    a, b = DbStore(1), DbStore(2)
    a.put(UID, b"img", 0, peers=[2])
    deliver([a, b], 0, drop=lambda peer, msg: True)
    assert b.get(UID, 1) is None
    res = client_fetch([b, a], UID, 1)
    assert res.found and res.attempts == 2 and res.instance_id == 1


def test_duplicate_put():
    db = DbStore(1)
    db.put(UID, b"x", 0)
    assert db.put(UID, b"x", 1).stored_at == 0
    with pytest.raises(PutConflict):
        db.put(UID, b"y", 1)


def test_get_unknown_is_miss():
    assert DbStore(1).get(UID, 0) is None


def test_ttl_boundary():
    db = DbStore(1, ttl=100)
    db.put(UID, b"x", 0)
    assert db.get(UID, 100) == b"x"
    db = DbStore(1, ttl=100)
    db.put(UID, b"x", 0)
    assert db.get(UID, 101) is None
    assert len(db) == 0 and db.stats.expired == 1


def test_fetch_once():
    db = DbStore(1)
    db.put(UID, b"x", 0)
    assert db.get(UID, 1) == b"x"
    assert db.get(UID, 2) is None


def test_purge_hint_removes_replica():
    a, b = DbStore(1), DbStore(2)
    a.put(UID, b"x", 0, peers=[2])
    deliver([a, b], 0)
    assert a.get(UID, 1) == b"x"
    deliver([a, b], 1)
    assert len(b) == 0 and b.get(UID, 2) is None


def test_late_replica_after_serve_ignored():
    a, b = DbStore(1), DbStore(2)
    a.put(UID, b"x", 0, peers=[2])
    held = a.take_outbox()
    a.outbox.extend(held)
    assert b.get(UID, 0) is None
    b.purge_hint(UID)
    deliver([a, b], 0)
    assert len(b) == 0


def test_client_fetch_order_and_exhaustion():
    dbs = [DbStore(1), DbStore(2), DbStore(3)]
    dbs[1].put(UID, b"x", 0)
    res = client_fetch(dbs, UID, 1)
    assert res.found and res.attempts == 2
    res = client_fetch(dbs, uuid.uuid4(), 1)
    assert not res.found and res.attempts == 3
    with pytest.raises(ValueError):
        client_fetch([], UID, 0)


def test_crash_then_replica_found():
    a, b = DbStore(1), DbStore(2)
    a.put(UID, b"x", 0, peers=[2])
    deliver([a, b], 0)
    a.crash()
    res = client_fetch([a, b], UID, 3)
    assert res.found and res.attempts == 2


def test_maintenance_purges_expired():
    db = DbStore(1, ttl=10)
    for i in range(5):
        db.put(uuid.UUID(int=i), b"x", i)
    assert db.maintenance(13) == 3
    assert len(db) == db.live_count(13) == 2


def test_replica_peers():
    assert replica_peers(0, [200, 201, 202], 2) == [201]
    assert replica_peers(2, [200, 201, 202], 2) == [200]
    assert replica_peers(0, [200], 2) == []
    assert replica_peers(1, [200, 201, 202], 5) == [202, 200]


@given(st.sampled_from(list(StoreKind)), st.uuids(), st.integers(0, 2**40), st.integers(0, 2**40),
       st.binary(max_size=64))
def test_store_message_roundtrip(kind, uid, at, ttl, payload):
    msg = StoreMessage(kind, uid, at, ttl, payload)
    back = StoreMessage.from_workflow(decode(encode(msg.to_workflow())))
    assert (back.kind, back.uid, back.stored_at, back.ttl, back.payload) == (kind, uid, at, ttl, payload)


def test_store_message_rejects_workflow_stage():
    from aigcflow.message import WorkflowMessage
    with pytest.raises(MalformedMessage):
        StoreMessage.from_workflow(WorkflowMessage(UID, 0, 1, 3, bytes(16)))


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 300), st.booleans()), max_size=60),
       st.integers(1, 80))
def test_ttl_and_fetch_once_properties(ops, ttl):
    """No get returns a payload older than ttl; each uid is served at most once per instance."""
    db = DbStore(1, ttl=ttl)
    stored = {}
    served = set()
    now = 0
    for key, dt, is_get in ops:
        now += dt % 40
        uid = uuid.UUID(int=key)
        if is_get:
            got = db.get(uid, now)
            if got is not None:
                assert now - stored[uid] <= ttl
                assert (uid, stored[uid]) not in served
                served.add((uid, stored[uid]))
        else:
            rec = db.put(uid, b"v", now)
            stored[uid] = rec.stored_at
        db.maintenance(now)
        assert len(db) == db.live_count(now)
