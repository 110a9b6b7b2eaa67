import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comrl_lab import datastore, envgen
from comrl_lab.datastore import DatasetFormatError, OfflineDataset, TaskBuffer


@pytest.fixture(scope="module")
def ds():
    return envgen.collect_dataset(envgen.make_tasks("PointDir", 4, 0), envgen.TIERS, 2, seed=0)


def assert_same(a: OfflineDataset, b: OfflineDataset):
    assert a.family == b.family and a.seed == b.seed
    assert a.tasks == b.tasks and a.checkpoints == b.checkpoints
    assert list(a.buffers) == list(b.buffers)
    for k in a.buffers:
        x, y = a.buffers[k], b.buffers[k]
        for f in ("obs", "act", "rew", "next_obs"):
            assert np.array_equal(getattr(x, f), getattr(y, f))
        assert x.episodes == y.episodes


# ------------------------------------------------------------------ file format

def test_round_trip(ds, tmp_path):
    p = tmp_path / "d.cmrlds"
    datastore.save(ds, p)
    back = datastore.load(p)
    assert_same(ds, back)
    datastore.save(back, tmp_path / "e.cmrlds")
    assert p.read_bytes() == (tmp_path / "e.cmrlds").read_bytes()


@settings(max_examples=50)
@given(st.integers(0, 100_000), st.sampled_from(envgen.FAMILIES))
def test_round_trip_randomized(tmp_path_factory, seed, family):
    r = np.random.default_rng(seed)
    ds = envgen.collect_dataset(envgen.make_tasks(family, int(r.integers(1, 4)), seed),
                                envgen.TIERS[:int(r.integers(1, 4))], 1, seed=seed)
    p = tmp_path_factory.mktemp("rt") / "d.bin"
    datastore.save(ds, p)
    assert_same(ds, datastore.load(p))


def test_layout(ds, tmp_path):
    p = tmp_path / "d.bin"
    datastore.save(ds, p)
    raw = p.read_bytes()
    assert raw[:8] == b"CMRLDS01"
    (hlen,) = struct.unpack("<I", raw[8:12])
    (count,) = struct.unpack("<Q", raw[12 + hlen:20 + hlen])
    first = ds.buffers[ds.task_ids[0]]
    assert count == len(first)
    row0 = np.frombuffer(raw[20 + hlen:20 + hlen + 8 * ds.feature_dim], dtype="<f8")
    assert np.array_equal(row0, np.concatenate([first.obs[0], first.act[0], [first.rew[0]], first.next_obs[0]]))


def test_corrupt_magic(ds, tmp_path):
    p = tmp_path / "d.bin"
    datastore.save(ds, p)
    p.write_bytes(b"X" + p.read_bytes()[1:])
    with pytest.raises(DatasetFormatError) as ei:
        datastore.load(p)
    assert ei.value.offset == 0 and "offset 0" in str(ei.value)


def test_truncated_payload(ds, tmp_path):
    p = tmp_path / "d.bin"
    datastore.save(ds, p)
    p.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(DatasetFormatError, match="truncated payload") as ei:
        datastore.load(p)
    assert ei.value.offset > 12


def test_count_mismatch(ds, tmp_path):
    p = tmp_path / "d.bin"
    datastore.save(ds, p)
    raw = bytearray(p.read_bytes())
    (hlen,) = struct.unpack("<I", raw[8:12])
    raw[12 + hlen:20 + hlen] = struct.pack("<Q", 3)
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="disagree"):
        datastore.load(p)


def test_empty_task_list(tmp_path):
    empty = OfflineDataset("GridGoal", 2, 2, [], [], {}, seed=3)
    p = tmp_path / "e.bin"
    datastore.save(empty, p)
    back = datastore.load(p)
    assert back.tasks == [] and back.n_transitions() == 0


# ------------------------------------------------------------------ contexts

def test_context_whole_buffer():
    t = envgen.make_tasks("PointDir", 1, 0)[0]
    d = envgen.collect_dataset([t], ("expert",), 1, seed=0)
    c = datastore.sample_context(d, t.task_id, 50, "IID", rng=np.random.default_rng(0))
    b = d.buffers[t.task_id]
    assert np.array_equal(c.features[0], datastore.features(b.obs, b.act, b.rew, b.next_obs))


def test_iid_contexts_come_from_own_buffer(ds):
    rng = np.random.default_rng(1)
    c = datastore.sample_contexts(ds, ds.task_ids * 3, 20, rng)
    assert c.features.shape == (12, 20, ds.feature_dim) and c.origins == ["IID"] * 12
    for tid, seg in zip(c.task_ids, c.features):
        b = ds.buffers[tid]
        table = datastore.features(b.obs, b.act, b.rew, b.next_obs)
        hits = np.flatnonzero((table == seg[0]).all(axis=1))
        assert any(np.array_equal(table[h:h + 20], seg) for h in hits)


@given(st.integers(0, 10_000), st.integers(1, 50))
def test_contexts_never_straddle_episodes(seed, n):
    ds = envgen.collect_dataset(envgen.make_tasks("PointVel", 2, 5), ("random",), 3, seed=5)
    c = datastore.sample_contexts(ds, ds.task_ids, n, np.random.default_rng(seed))
    for seg in c.features:
        # episodes start at the origin; only the first row of a window may do so
        assert not np.any(np.all(seg[1:, :2] == 0.0, axis=1))


def test_context_errors(ds):
    with pytest.raises(ValueError, match="context needs"):
        datastore.sample_contexts(ds, [ds.task_ids[0]], 10_000, np.random.default_rng(0))
    with pytest.raises(ValueError, match="checkpoint"):
        datastore.sample_context(ds, ds.task_ids[0], 10, "OOD")
    with pytest.raises(ValueError, match="horizon"):
        datastore.ood_contexts(ds, [ds.task_ids[0]], [0], 51, np.random.default_rng(0))


def test_ood_context_origin_and_task(ds):
    tid = ds.task_ids[0]
    foreign = next(i for i, c in enumerate(ds.checkpoints) if c.task_id != tid)
    c = datastore.sample_context(ds, tid, 30, "OOD", ckpt=foreign, rng=np.random.default_rng(0))
    assert c.origins == [f"OOD({foreign})"] and c.features.shape == (1, 30, ds.feature_dim)
    # rewards are those of the queried task
    s, a, r, s2 = datastore.split_features(c.features[0], 2, 2)
    r2 = envgen.relabel_batch("PointDir", np.tile(ds.task(tid).params, (30, 1)), s, a)[1]
    assert np.allclose(r, r2, atol=1e-12)


def test_ood_own_expert_matches_iid_expert():
    t = envgen.make_tasks("PointDir", 1, 9)[0]
    d = envgen.collect_dataset([t], ("expert",), 20, seed=9)
    rng = np.random.default_rng(0)
    iid = datastore.sample_contexts(d, [t.task_id] * 200, 25, rng).features[..., 4].mean(axis=1)
    ood = datastore.ood_contexts(d, [t.task_id] * 200, [0] * 200, 25, rng).features[..., 4].mean(axis=1)
    assert abs(iid.mean() - ood.mean()) <= 2 * iid.std()


def test_coverage_pairs_cover_every_checkpoint(ds):
    pairs = datastore.coverage_pairs(ds.task_ids, len(ds.checkpoints))
    assert len(pairs) == len(set(pairs)) == len(ds.task_ids) * len(ds.checkpoints)
    assert {c for _, c in pairs} == set(range(len(ds.checkpoints)))


# ------------------------------------------------------------------ RL batches

def test_rl_batch_single_transition():
    buf = TaskBuffer(np.ones((1, 2)), np.full((1, 2), 0.5), np.array([0.25]), np.full((1, 2), 2.0), [(0, 1)])
    tk = envgen.make_tasks("PointDir", 1, 0)[0]
    d = OfflineDataset("PointDir", 2, 2, [tk], [], {tk.task_id: buf})
    b = datastore.sample_rl_batch(d, tk.task_id, 1, np.random.default_rng(0))
    assert b["rew"][0] == 0.25 and np.array_equal(b["obs"][0], [1.0, 1.0])


def test_rl_batch_mean_within_three_se(ds):
    tid = ds.task_ids[1]
    b = datastore.sample_rl_batch(ds, tid, 20_000, np.random.default_rng(3))
    buf = ds.buffers[tid].obs
    se = buf.std(axis=0) / np.sqrt(20_000)
    assert np.all(np.abs(b["obs"].mean(axis=0) - buf.mean(axis=0)) <= 3 * se)


def test_rl_batch_same_seed_identical(ds):
    a = datastore.sample_rl_batch(ds, ds.task_ids[0], 64, np.random.default_rng(5))
    b = datastore.sample_rl_batch(ds, ds.task_ids[0], 64, np.random.default_rng(5))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_rl_batch_empty_buffer():
    tk = envgen.make_tasks("PointDir", 1, 0)[0]
    buf = TaskBuffer(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), [])
    d = OfflineDataset("PointDir", 2, 2, [tk], [], {tk.task_id: buf})
    with pytest.raises(ValueError, match="empty"):
        datastore.sample_rl_batch(d, tk.task_id, 4)


def test_rl_batches_slots(ds):
    b = datastore.sample_rl_batches(ds, ds.task_ids, 8, np.random.default_rng(0))
    assert len(b["rew"]) == 32
    assert np.array_equal(b["slot"], np.repeat(np.arange(4), 8))
    for k, tid in enumerate(ds.task_ids):
        rows = datastore.features(b["obs"], b["act"], b["rew"], b["next_obs"])[b["slot"] == k]
        buf = ds.buffers[tid]
        table = datastore.features(buf.obs, buf.act, buf.rew, buf.next_obs)
        assert all((table == r).all(axis=1).any() for r in rows)


def test_subset_and_merge(ds):
    a, b = ds.subset(ds.task_ids[:2]), ds.subset(ds.task_ids[2:])
    m = a.merged(b)
    assert m.task_ids == ds.task_ids and m.n_transitions() == ds.n_transitions()
    with pytest.raises(ValueError):
        a.merged(a)
