import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from einmemo.dataset import Sample, TaskDataset, synth_task
from einmemo.retrieval import (
    RawPixelExtractor,
    RetrievalError,
    RetrievalIndex,
    build_index,
    embed,
    l2_normalize,
    retrieve,
    retrieve_all,
    retrieve_vector,
)


class IdentityExtractor:
    name = "identity"

    def extract(self, image):
        return np.asarray(image, dtype=np.float64)


def _vec_ds(vectors):
    samples = []
    for i, v in enumerate(vectors):
        img = np.asarray(v, np.float32).reshape(1, 1, -1).repeat(3, 0)
        samples.append(Sample(f"c{i}", img, np.zeros((1, img.shape[2]), np.uint8), 0))
    return TaskDataset(tuple(samples))


def _brute_force(cands, query, exclude=()):
    # oracle: explicit loop over normalised candidates, first strict maximum wins
    q = np.asarray(query, np.float64).ravel()
    q = q / np.linalg.norm(q)
    best, best_s = None, -np.inf
    for sid, v in cands:
        if sid in exclude:
            continue
        v = np.asarray(v, np.float64).ravel()
        s = float(np.dot(v / np.linalg.norm(v), q))
        if s > best_s:
            best, best_s = sid, s
    return best


def test_matches_brute_force_100_of_100():
    train, test = synth_task(11, categories=4, per_class=30, cell=32, test_per_class=25)
    fx = RawPixelExtractor(8)
    idx = build_index(train, fx)
    cands = [(s.id, fx.extract(s.image)) for s in train]
    agree = sum(retrieve(idx, q.image, fx) == _brute_force(cands, fx.extract(q.image)) for q in test)
    assert len(test) == 100 and agree == 100


def test_tie_breaks_to_lowest_index():
    idx = RetrievalIndex(("a", "b", "c"), np.array([[0, 1], [1, 0], [1, 0]], np.float32), "x")
    assert retrieve_vector(idx, np.array([1.0, 0.0])) == "b"
    assert retrieve_vector(idx, np.array([1.0, 0.0]), exclude=("b",)) == "c"


def test_scale_invariance():
    ds = _vec_ds([[1, 0, 0], [0, 1, 0], [1, 1, 0]])
    fx = IdentityExtractor()
    idx = build_index(ds, fx)
    q = np.array([0.9, 1.0, 0.1], np.float32).reshape(1, 1, 3).repeat(3, 0)
    assert retrieve(idx, q, fx) == retrieve(idx, 7.5 * q, fx) == "c2"


def test_self_excluded_with_leave_one_out():
    ds = _vec_ds([[1, 0], [0.9, 0.1], [0, 1]])
    fx = IdentityExtractor()
    idx = build_index(ds, fx)
    plain = retrieve_all(idx, ds, fx)
    assert all(plain[s.id] == s.id for s in ds)
    loo = retrieve_all(idx, ds, fx, leave_one_out=True)
    assert loo == {"c0": "c1", "c1": "c0", "c2": "c1"}


def test_errors():
    ds = _vec_ds([[1, 0]])
    fx = IdentityExtractor()
    idx = build_index(ds, fx)
    with pytest.raises(RetrievalError, match="excluded"):
        retrieve(idx, ds[0].image, fx, exclude=("c0",))
    with pytest.raises(RetrievalError, match="does not match"):
        retrieve(idx, ds[0].image, RawPixelExtractor())
    with pytest.raises(RetrievalError):
        l2_normalize(np.zeros(4))
    with pytest.raises(RetrievalError):
        l2_normalize([np.nan, 1.0])
    with pytest.raises(RetrievalError, match="empty"):
        retrieve(RetrievalIndex((), np.zeros((0, 2), np.float32), "identity"), ds[0].image, fx)


def test_index_round_trip(tmp_path):
    train, _ = synth_task(1, categories=2, per_class=5, cell=32)
    fx = RawPixelExtractor(8)
    idx = build_index(train, fx)
    idx.save(tmp_path / "i.bin")
    back = RetrievalIndex.load(tmp_path / "i.bin")
    assert back.ids == idx.ids and back.extractor_name == idx.extractor_name
    np.testing.assert_array_equal(back.vectors, idx.vectors)
    for q in train:
        assert retrieve(back, q.image, fx, (q.id,)) == retrieve(idx, q.image, fx, (q.id,))


def test_index_corruption_detected(tmp_path):
    idx = build_index(_vec_ds([[1, 0], [0, 1]]), IdentityExtractor())
    path = tmp_path / "i.bin"
    idx.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(RetrievalError):
        RetrievalIndex.load(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(RetrievalError, match="trailing"):
        RetrievalIndex.load(path)
    path.write_bytes(b"garbage")
    with pytest.raises(RetrievalError):
        RetrievalIndex.load(path)


def test_index_rows_are_unit_norm():
    train, _ = synth_task(2, categories=2, per_class=5, cell=32)
    idx = build_index(train, RawPixelExtractor(8))
    np.testing.assert_allclose(np.linalg.norm(idx.vectors, axis=1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(
    data=st.lists(
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4), min_size=2, max_size=12
    ),
    q=st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4),
)
def test_retrieved_score_is_maximal_property(data, q):
    vecs = [np.array(v) for v in data if np.linalg.norm(v) > 1e-3]
    q = np.array(q)
    if len(vecs) < 1 or np.linalg.norm(q) < 1e-3:
        return
    idx = RetrievalIndex(
        tuple(f"c{i}" for i in range(len(vecs))),
        np.stack([l2_normalize(v) for v in vecs]).astype(np.float32),
        "identity",
    )
    qv = l2_normalize(q)
    got = retrieve_vector(idx, qv)
    s = idx.vectors.astype(np.float64) @ qv
    assert s[idx.position(got)] == s.max()
    # first maximum
    assert idx.position(got) == int(np.flatnonzero(s == s.max())[0])


def test_embed_is_unit_vector():
    v = embed(IdentityExtractor(), np.arange(12.0).reshape(3, 2, 2))
    assert abs(np.linalg.norm(v) - 1) < 1e-12
