import math
import struct

import numpy as np
import pytest

from egonn.geometry import PoseSE3
from egonn.retrieval import (DESC_DIM, MAGIC, DatabaseError, DescriptorDB, evaluate_recall,
                             query_topk, random_recall_expectation)


def random_db(rng, n, spacing=10.0):
    db = DescriptorDB()
    for i in range(n):
        db.add(i, rng.normal(size=DESC_DIM), PoseSE3.from_yaw(rng.uniform(0, 6), (i * spacing, 0, 0)),
               f"db/{i:06d}.bin")
    return db


def test_add_validation():
    db = DescriptorDB()
    db.add(3, np.zeros(DESC_DIM), PoseSE3.identity())
    with pytest.raises(DatabaseError, match="duplicate"):
        db.add(3, np.zeros(DESC_DIM), PoseSE3.identity())
    with pytest.raises(DatabaseError):
        db.add(4, np.zeros(10), PoseSE3.identity())
    with pytest.raises(DatabaseError):
        db.add(5, np.full(DESC_DIM, np.nan), PoseSE3.identity())
    with pytest.raises(DatabaseError):
        db.add(-1, np.zeros(DESC_DIM), PoseSE3.identity())
    with pytest.raises(DatabaseError):
        db.add(6, np.zeros(DESC_DIM), np.ones((3, 4)))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    db = random_db(rng, 20)
    db.save(tmp_path / "db.egodb")
    back = DescriptorDB.load(tmp_path / "db.egodb")
    assert len(back) == 20
    for a, b in zip(db.entries, back.entries):
        assert a.id == b.id and a.path == b.path
        assert a.descriptor.tobytes() == b.descriptor.tobytes()
        assert a.pose.matrix().tobytes() == b.pose.matrix().tobytes()
    assert back.to_bytes() == db.to_bytes()


def test_file_layout():
    db = DescriptorDB().add(7, np.arange(DESC_DIM, dtype=float), PoseSE3.from_yaw(0, (1, 2, 3)), "x/é")
    raw = db.to_bytes()
    assert raw[:6] == MAGIC
    assert struct.unpack("<Q", raw[6:14]) == (1,)
    assert struct.unpack("<Q", raw[14:22]) == (7,)
    desc = np.frombuffer(raw[22:22 + 4 * DESC_DIM], "<f4")
    np.testing.assert_array_equal(desc, np.arange(DESC_DIM))
    off = 22 + 4 * DESC_DIM
    pose = np.frombuffer(raw[off:off + 48], "<f4").reshape(3, 4)
    np.testing.assert_array_equal(pose, [[1, 0, 0, 1], [0, 1, 0, 2], [0, 0, 1, 3]])
    (plen,) = struct.unpack("<Q", raw[off + 48:off + 56])
    assert raw[off + 56:].decode("utf-8") == "x/é" and plen == len("x/é".encode())


def test_ten_thousand_entries_resave_identical(tmp_path):
    rng = np.random.default_rng(1)
    db = DescriptorDB()
    for i in range(10_000):
        db.add(i * 7 + 3, rng.normal(size=DESC_DIM),
               PoseSE3.from_yaw(rng.uniform(0, 2 * math.pi), rng.uniform(-1e3, 1e3, 3)), f"c/{i}.bin")
    first = tmp_path / "a.egodb"
    db.save(first)
    again = DescriptorDB.load(first)
    second = tmp_path / "b.egodb"
    again.save(second)
    assert first.read_bytes() == second.read_bytes()


def test_corrupt_files_rejected(tmp_path):
    raw = random_db(np.random.default_rng(2), 3).to_bytes()
    with pytest.raises(DatabaseError, match="magic"):
        DescriptorDB.from_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(DatabaseError, match="truncated"):
        DescriptorDB.from_bytes(raw[:-5])
    with pytest.raises(DatabaseError, match="trailing"):
        DescriptorDB.from_bytes(raw + b"\0")


def test_query_topk_examples():
    rng = np.random.default_rng(3)
    db = random_db(rng, 30)
    assert query_topk(db, db.entries[17].descriptor, 1).tolist() == [17]
    assert len(query_topk(db, rng.normal(size=DESC_DIM), 30)) == 30
    assert len(query_topk(db, rng.normal(size=DESC_DIM), 100)) == 30
    with pytest.raises(ValueError):
        query_topk(db, rng.normal(size=DESC_DIM), 0)
    with pytest.raises(DatabaseError):
        query_topk(DescriptorDB(), rng.normal(size=DESC_DIM), 1)


def test_query_topk_ties_by_id():
    db = DescriptorDB()
    for i in (9, 2, 5):
        db.add(i, np.ones(DESC_DIM), PoseSE3.identity())
    assert query_topk(db, np.zeros(DESC_DIM), 3).tolist() == [2, 5, 9]


def test_query_topk_brute_force():
    rng = np.random.default_rng(4)
    db = random_db(rng, 500)
    for _ in range(5):
        q = rng.normal(size=DESC_DIM)
        d = [(float(np.linalg.norm(e.descriptor - q)), e.id) for e in db.entries]
        expected = [i for _, i in sorted(d)]
        assert query_topk(db, q, 500).tolist() == expected


def test_recall_perfect_database():
    rng = np.random.default_rng(5)
    db = random_db(rng, 25)
    queries = [(e.descriptor, e.pose) for e in db.entries]
    rep = evaluate_recall(db, queries)
    assert all(v == 1.0 for v in rep.recall.values())
    assert set(rep.recall) == {(1, 5.0), (1, 20.0), (5, 5.0), (5, 20.0)}
    with pytest.raises(ValueError):
        evaluate_recall(db, [])


def test_recall_monotone_and_csv():
    rng = np.random.default_rng(6)
    db = random_db(rng, 60, spacing=3.0)
    queries = [(rng.normal(size=DESC_DIM), PoseSE3.from_yaw(0, (x, 0, 0))) for x in rng.uniform(0, 180, 40)]
    rep = evaluate_recall(db, queries, ns=(1, 5, 10), thresholds=(5.0, 20.0))
    for d in (5.0, 20.0):
        assert rep.recall[(1, d)] <= rep.recall[(5, d)] <= rep.recall[(10, d)]
    for n in (1, 5, 10):
        assert rep.recall[(n, 5.0)] <= rep.recall[(n, 20.0)]
    lines = rep.csv_text().splitlines()
    assert lines[0] == "N,threshold_m,recall"
    assert lines[1].startswith("1,5,") and len(lines) == 7


def test_random_recall_expectation_closed_form():
    # three db entries within reach of the query out of ten: P(hit@2) = 1 - C(7,2)/C(10,2)
    db_pos = np.array([[x, 0, 0] for x in range(10)], float)
    q = np.array([[1.0, 0, 0]])
    assert random_recall_expectation(db_pos, q, 2, 1.0) == pytest.approx(1 - 21 / 45)
    assert random_recall_expectation(db_pos, q, 10, 1.0) == 1.0
    assert random_recall_expectation(db_pos, np.array([[100.0, 0, 0]]), 5, 1.0) == 0.0


def test_random_descriptors_hit_chance_level():
    rng = np.random.default_rng(7)
    db = random_db(rng, 40, spacing=2.0)
    q_pos = rng.uniform(0, 80, 20)
    trials = []
    for _ in range(300):
        queries = [(rng.normal(size=DESC_DIM), PoseSE3.from_yaw(0, (x, 0, 0))) for x in q_pos]
        trials.append(evaluate_recall(db, queries, ns=(1,), thresholds=(5.0,)).recall[(1, 5.0)])
    expected = random_recall_expectation(db.positions, np.column_stack([q_pos, 0 * q_pos, 0 * q_pos]), 1, 5.0)
    se = np.std(trials) / math.sqrt(len(trials))
    assert abs(np.mean(trials) - expected) < 4 * se
