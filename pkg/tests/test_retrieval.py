import numpy as np
import pytest

from coral import DataError
from coral.retrieval import (DescriptorDatabase, evaluate_cross_run, percent_count, query, read_database,
                             read_descriptors, recall_at, summary_line, write_database, write_descriptors,
                             write_report_csv)
from oracles import evaluate_independent, linear_scan


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def clustered_world(seed, places=200, runs=3, dim=32, noise=0.35):
    """Places on a line 30 m apart; every run sees each place with a noisy copy of its code."""
    rng = np.random.default_rng(seed)
    codes = unit(rng, places, dim)
    ids, run_ids, pos, desc = [], [], [], []
    for r in range(runs):
        for p in range(places):
            ids.append(r * places + p)
            run_ids.append(r)
            pos.append((30.0 * p + rng.uniform(-3, 3), rng.uniform(-3, 3)))
            v = codes[p] + noise * rng.normal(size=dim) / np.sqrt(dim)
            desc.append(v / np.linalg.norm(v))
    return DescriptorDatabase(ids, run_ids, pos, desc)


def test_duplicate_and_clamp():
    rng = np.random.default_rng(0)
    d = unit(rng, 5, 8)
    db = DescriptorDatabase(range(10), [0] * 5 + [1] * 5, np.zeros((10, 2)), np.vstack([d, d]))
    res = query(db, d[2], 1, exclude_run=0)
    assert res.ids[0] == 7 and res.distances[0] == 0.0
    res = query(db, d[2], 50, exclude_run=0)
    assert len(res.ids) == 5 and np.all(np.diff(res.distances) >= 0)
    with pytest.raises(DataError, match="empty"):
        query(DescriptorDatabase([1], [0], [(0, 0)], d[:1]), d[0], 1, exclude_run=0)
    with pytest.raises(ValueError):
        query(db, d[0], 0)
    with pytest.raises(ValueError, match="unit"):
        DescriptorDatabase([1], [0], [(0, 0)], [[2.0, 0.0]])


@pytest.mark.parametrize("seed", range(5))
def test_query_matches_linear_scan_and_kdtree(seed):
    rng = np.random.default_rng(seed)
    n = 300
    desc = unit(rng, n, 16)
    desc[50] = desc[10]  # an exact tie, broken by id
    runs = rng.integers(0, 4, n)
    ids = rng.permutation(10 * n)[:n]
    db = DescriptorDatabase(ids, runs, rng.uniform(0, 100, (n, 2)), desc)
    for qi in rng.choice(n, 10, replace=False).tolist() + [10]:
        for k in (1, 7):
            res = query(db, desc[qi], k, exclude_run=int(runs[qi]))
            ref = linear_scan(ids, runs, desc, desc[qi], k, exclude_run=int(runs[qi]))
            assert res.ids.tolist() == [i for _, i in ref]
            assert np.abs(res.distances - [d for d, _ in ref]).max() <= 1e-12
            tree = query(db, desc[qi], k, exclude_run=int(runs[qi]), use_kdtree=True)
            assert tree.ids.tolist() == res.ids.tolist()
    # cosine ranking gives the same order
    q = unit(rng, 1, 16)[0]
    res = query(db, q, n)
    cos_order = sorted(range(n), key=lambda r: (-float(desc[r] @ q), ids[r]))
    assert res.ids.tolist() == [int(ids[r]) for r in cos_order]


def test_insertion_order_does_not_matter():
    db = clustered_world(1, places=40)
    perm = np.random.default_rng(0).permutation(len(db))
    shuffled = DescriptorDatabase(db.ids[perm], db.runs[perm], db.positions[perm], db.descriptors[perm])
    for r in range(0, len(db), 7):
        a = query(db, db.descriptors[r], 5, exclude_run=int(db.runs[r]))
        b = query(shuffled, db.descriptors[r], 5, exclude_run=int(db.runs[r]))
        assert a.ids.tolist() == b.ids.tolist()


def test_recall_examples():
    rng = np.random.default_rng(0)
    d = unit(rng, 6, 8)
    pos = rng.uniform(0, 500, (6, 2))
    db = DescriptorDatabase(range(12), [0] * 6 + [1] * 6, np.vstack([pos, pos]), np.vstack([d, d]))
    rep = evaluate_cross_run(db)
    assert rep.recall_1 == 1.0 and rep.recall_pct == 1.0
    # adversarial: nearest in descriptor space is far, second nearest is at the query's place
    q = np.array([1.0, 0.0])
    db = DescriptorDatabase([1, 2], [1, 1], [(100.0, 0.0), (0.0, 0.0)],
                            [[1.0, 0.0], [np.cos(0.3), np.sin(0.3)]])
    res = [query(db, q, 2, query_id=9)]
    positions = {9: (0.0, 0.0)}
    assert recall_at(res, positions, n=1) == 0.0
    assert recall_at(res, positions, n=2) == 1.0
    with pytest.raises(ValueError):
        recall_at(res, positions)


def test_percent_count_rounding():
    assert percent_count(1.0, 10) == 1
    assert percent_count(1.0, 150) == 2  # 1.5 rounds away from zero
    assert percent_count(1.0, 249) == 2
    assert percent_count(1.0, 250) == 3


def test_recall_monotone_in_n():
    db = clustered_world(2, places=60, noise=1.5)
    results = [query(db, db.descriptors[r], 20, exclude_run=int(db.runs[r]), query_id=int(db.ids[r]))
               for r in range(len(db))]
    vals = [recall_at(results, db.position_of(), n=n) for n in range(1, 21)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[0] < 1.0


@pytest.mark.parametrize("noise", [0.35, 1.2])
def test_200_place_world_matches_independent_evaluator(noise):
    db = clustered_world(3, places=200, noise=noise)
    rep = evaluate_cross_run(db, radius=25.0, percent=1.0)
    r1, rp = evaluate_independent(db.ids, db.runs, db.positions, db.descriptors, 25.0, 1.0)
    assert rep.recall_1 == r1 and rep.recall_pct == rp
    assert len(rep.rows) == 600
    assert evaluate_cross_run(db, use_kdtree=True).rows == rep.rows


def test_files_round_trip(tmp_path):
    db = clustered_world(4, places=10)
    write_database(tmp_path / "db.desc", db)
    raw = (tmp_path / "db.desc").read_bytes()
    assert raw[:4] == b"DESC" and len(raw) == 12 + 30 * (8 + 4 * 32)
    back = read_database(tmp_path / "db.desc")
    assert back.ids.tolist() == db.ids.tolist() and back.runs.tolist() == db.runs.tolist()
    assert np.array_equal(back.positions, db.positions)
    assert np.abs(back.descriptors - db.descriptors).max() <= 1e-7
    (tmp_path / "db.csv").unlink()
    with pytest.raises(DataError, match="sidecar"):
        read_database(tmp_path / "db.desc")
    (tmp_path / "bad.desc").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="size"):
        read_descriptors(tmp_path / "bad.desc")

    rep = evaluate_cross_run(db)
    write_report_csv(tmp_path / "r.csv", rep)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query_id,rank1_id,rank1_dist,success@1,success@1pct"
    assert len(lines) == 32 and lines[-1] == "# " + summary_line(rep)
    assert "25" in lines[-1] and "convention" in lines[-1]
    write_descriptors(tmp_path / "e.desc", [], np.zeros((0, 4)))
    ids, desc = read_descriptors(tmp_path / "e.desc")
    assert len(ids) == 0 and desc.shape == (0, 4)
