import numpy as np
import pytest

from miencap.errors import FormatError, InfiniteDivergenceError, ValidationError
from miencap.features import FeatureStats
from miencap.retrieval import (
    LN2,
    ExpressionDatabase,
    MatchPair,
    build_pair_database,
    geometric_distance,
    jsd,
    kl_divergence,
    load_database,
    load_pairs,
    save_database,
    save_pairs,
    two_step_match,
)

from conftest import make_record, random_db, unit_stats


def onehot(i):
    v = np.zeros(7)
    v[i] = 1.0
    return v


def rand_dist(rng, strictly_positive=False):
    alpha = np.full(7, 0.8)
    p = rng.dirichlet(alpha)
    if strictly_positive:
        p = (p + 1e-3) / (1.0 + 7e-3)
    return p


def kl_oracle(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            total += pi * np.log(pi / qi)
    return total


def jsd_oracle(h, c):
    m = 0.5 * (np.asarray(h) + np.asarray(c))
    return 0.5 * kl_oracle(h, m) + 0.5 * kl_oracle(c, m)


def test_kl_trivials():
    p = rand_dist(np.random.default_rng(0), strictly_positive=True)
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence(onehot(0), np.array([0.5, 0.5, 0, 0, 0, 0, 0])) == \
        pytest.approx(LN2, abs=1e-12)


def test_kl_matches_summation_oracle():
    rng = np.random.default_rng(50)
    for _ in range(200):
        p = rand_dist(rng)
        q = rand_dist(rng, strictly_positive=True)
        assert abs(kl_divergence(p, q) - kl_oracle(p, q)) < 1e-12


def test_kl_infinite_divergence():
    with pytest.raises(InfiniteDivergenceError):
        kl_divergence(onehot(0), onehot(1))


def test_jsd_trivials_and_symmetry():
    rng = np.random.default_rng(51)
    p = rand_dist(rng)
    assert jsd(p, p) == pytest.approx(0.0, abs=1e-15)
    assert jsd(onehot(2), onehot(5)) == pytest.approx(LN2, abs=1e-12)
    for _ in range(100):
        h, c = rand_dist(rng), rand_dist(rng)
        assert abs(jsd(h, c) - jsd(c, h)) < 1e-12
        assert abs(jsd(h, c) - jsd_oracle(h, c)) < 1e-12


def test_jsd_bounds_and_separation():
    rng = np.random.default_rng(52)
    for _ in range(500):
        h, c = rand_dist(rng), rand_dist(rng)
        v = jsd(h, c)
        assert -1e-9 <= v <= LN2 + 1e-9
        if np.max(np.abs(h - c)) > 1e-6:
            assert v > 0.0


def test_geometric_distance():
    a = np.zeros(9)
    assert geometric_distance(a, a) == 0.0
    b = a.copy()
    b[4] = 1.0
    assert geometric_distance(a, b) == 1.0
    rng = np.random.default_rng(53)
    for _ in range(100):
        x = rng.uniform(0, 1, 9)
        y = rng.uniform(0, 1, 9)
        oracle = np.sqrt(((x - y) ** 2).sum())
        assert abs(geometric_distance(x, y) - oracle) < 1e-12


def brute_force_match(query, db, k):
    order = sorted(range(len(db)),
                   key=lambda i: (jsd(query.emotion, db.records[i].emotion), i))
    short = order[: min(k, len(db))]
    best = min(short, key=lambda i: (
        geometric_distance(query.geometry, db.records[i].geometry), i))
    return db.records[best].id


def test_two_step_single_record_db():
    db = random_db(1, seed=60)
    query = make_record("q", onehot(6), np.full(9, 0.9))
    assert two_step_match(query, db).match_id == db.records[0].id


def test_two_step_empty_db():
    db = ExpressionDatabase(records=(), stats=unit_stats(), source_tag="human")
    with pytest.raises(ValidationError):
        two_step_match(make_record("q", onehot(0), np.zeros(9)), db)


def test_two_step_matches_brute_force():
    rng = np.random.default_rng(61)
    db = random_db(200, seed=62)
    for qi in range(25):
        query = make_record(f"q{qi}", rand_dist(rng), rng.uniform(0, 1, 9))
        got = two_step_match(query, db, k=30)
        assert got.match_id == brute_force_match(query, db, 30)
        assert got.emotional_distance >= 0.0
        assert got.geometric_distance >= 0.0


def test_two_step_result_is_in_emotional_top_k():
    rng = np.random.default_rng(63)
    db = random_db(120, seed=64)
    for qi in range(10):
        query = make_record(f"q{qi}", rand_dist(rng), rng.uniform(0, 1, 9))
        got = two_step_match(query, db, k=15)
        d = [jsd(query.emotion, r.emotion) for r in db.records]
        top = set(sorted(range(len(db)), key=lambda i: (d[i], i))[:15])
        pos = [r.id for r in db.records].index(got.match_id)
        assert pos in top


def test_two_step_excludes_global_nearest_outside_top_k():
    # [0..29]: emotionally close, geometrically far.
    # [30..39]: emotionally opposite but geometry identical to the query.
    near_emo = np.array([0.9, 0.1, 0, 0, 0, 0, 0])
    far_emo = onehot(6)
    q_geo = np.full(9, 0.25)
    records = []
    for i in range(30):
        geo = np.full(9, 0.9)
        geo[0] = 0.5 + i * 0.01
        records.append(make_record(f"near-{i}", near_emo, geo))
    for i in range(10):
        records.append(make_record(f"decoy-{i}", far_emo, q_geo))
    db = ExpressionDatabase(records=tuple(records), stats=unit_stats(),
                            source_tag="char")
    query = make_record("q", np.array([0.88, 0.12, 0, 0, 0, 0, 0]), q_geo)
    got = two_step_match(query, db, k=30)
    assert got.match_id.startswith("near-")
    assert got.match_id == brute_force_match(query, db, 30)
    # sanity: a decoy really is the global geometric nearest
    decoy_d = geometric_distance(q_geo, q_geo)
    assert decoy_d < got.geometric_distance


def test_two_step_position_tie_break():
    emo = np.full(7, 1.0 / 7.0)
    geo = np.full(9, 0.5)
    records = [make_record(f"r{i}", emo, geo) for i in range(5)]
    db = ExpressionDatabase(records=tuple(records), stats=unit_stats(),
                            source_tag="char")
    got = two_step_match(make_record("q", emo, geo), db, k=3)
    assert got.match_id == "r0"
    assert got.emotional_distance == 0.0
    assert got.geometric_distance == 0.0


def test_build_pairs_self_match():
    db = random_db(40, seed=65)
    pairs = build_pair_database(db, db, k=30)
    assert len(pairs) == 40
    for rec, pair in zip(db.records, pairs):
        assert pair.query_id == rec.id
        assert pair.match_id == rec.id
        assert pair.emotional_distance == pytest.approx(0.0, abs=1e-12)
        assert pair.geometric_distance == pytest.approx(0.0, abs=1e-9)


def test_build_pairs_matches_oracle():
    source = random_db(3, seed=66, tag="human")
    target = random_db(50, seed=67, tag="char")
    pairs = build_pair_database(source, target, k=30)
    for rec, pair in zip(source.records, pairs):
        assert pair.match_id == brute_force_match(rec, target, 30)


def test_build_pairs_renormalizes_against_target_stats():
    # source stats span [0, 2]: stored 0.5 means raw 1.0
    # target stats span [0, 4]: raw 1.0 normalizes to 0.25
    source_stats = FeatureStats(np.zeros(9), np.full(9, 2.0))
    target_stats = FeatureStats(np.zeros(9), np.full(9, 4.0))
    emo = np.full(7, 1.0 / 7.0)
    src = ExpressionDatabase(
        records=(make_record("s", emo, np.full(9, 0.5)),),
        stats=source_stats, source_tag="human")
    hit = make_record("hit", emo, np.full(9, 0.25))
    miss = make_record("miss", emo, np.full(9, 0.5))
    tgt = ExpressionDatabase(records=(hit, miss), stats=target_stats,
                             source_tag="char")
    [pair] = build_pair_database(src, tgt, k=30)
    assert pair.match_id == "hit"
    assert pair.geometric_distance == pytest.approx(0.0, abs=1e-12)


def test_build_pairs_empty_source_and_target():
    empty = ExpressionDatabase(records=(), stats=unit_stats(), source_tag="human")
    target = random_db(5, seed=68)
    assert build_pair_database(empty, target) == []
    with pytest.raises(ValidationError):
        build_pair_database(target, empty)


def test_database_rejects_duplicate_ids():
    r = make_record("same", onehot(0), np.zeros(9))
    with pytest.raises(ValidationError):
        ExpressionDatabase(records=(r, r), stats=unit_stats(), source_tag="x")


def test_database_save_load_round_trip(tmp_path):
    db = random_db(25, seed=69, tag="char")
    p = tmp_path / "db.ndjson"
    save_database(db, p)
    back = load_database(p)
    assert len(back) == len(db)
    assert back.source_tag == "char"
    assert np.array_equal(back.stats.mins, db.stats.mins)
    for a, b in zip(back.records, db.records):
        assert a.id == b.id
        assert np.array_equal(a.emotion, b.emotion)
        assert np.array_equal(a.geometry, b.geometry)
        assert a.label == b.label
    # second save is byte-identical (determinism of the writer)
    p2 = tmp_path / "db2.ndjson"
    save_database(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_database_malformed(tmp_path):
    p = tmp_path / "bad.ndjson"
    p.write_text("not json\n")
    with pytest.raises(FormatError):
        load_database(p)


def test_pairs_csv_round_trip(tmp_path):
    pairs = [
        MatchPair("q0", "m7", 0.125, 1.5),
        MatchPair("q1", "m2", 0.0, 0.0078125),
    ]
    p = tmp_path / "pairs.csv"
    save_pairs(pairs, p)
    text = p.read_text()
    assert text.splitlines()[0] == "query_id,match_id,emotional_distance,geometric_distance"
    back = load_pairs(p)
    assert back == pairs
    p2 = tmp_path / "pairs2.csv"
    save_pairs(back, p2)
    assert p.read_bytes() == p2.read_bytes()
