import collections

import numpy as np
import pytest

from mp4sr import data as D
from mp4sr.errors import ConfigError, DataError
from mp4sr.kernel import make_rng


def dataset(seqs):
    items = sorted({it for s in seqs for it in s})
    ids = [""] + [f"i{it}" for it in items]
    remap = {it: j + 1 for j, it in enumerate(items)}
    return D.InteractionDataset(
        [f"u{k}" for k in range(len(seqs))], ids, [[remap[it] for it in s] for s in seqs]
    )


# -- load_interactions ---------------------------------------------------------


def write_tsv(path, rows):
    path.write_text("user_id\titem_id\ttimestamp\n" + "".join(f"{u}\t{i}\t{t}\n" for u, i, t in rows))


def test_load_sorts_by_timestamp(tmp_path):
    p = tmp_path / "x.tsv"
    write_tsv(p, [("u1", "b", 20), ("u1", "a", 10), ("u1", "c", 30)])
    ds = D.load_interactions(p)
    assert [ds.item_ids[i] for i in ds.sequences[0]] == ["a", "b", "c"]


def test_load_ties_keep_file_order(tmp_path):
    p = tmp_path / "x.tsv"
    write_tsv(p, [("u1", "b", 10), ("u1", "a", 10)])
    ds = D.load_interactions(p)
    assert [ds.item_ids[i] for i in ds.sequences[0]] == ["b", "a"]


def test_load_keeps_duplicate_rows(tmp_path):
    p = tmp_path / "x.tsv"
    write_tsv(p, [("u1", "a", 5), ("u1", "a", 5), ("u1", "a", 5)])
    ds = D.load_interactions(p)
    assert ds.sequences[0] == [1, 1, 1]
    assert ds.n_interactions == 3


def test_load_reports_bad_line_number(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("user_id\titem_id\ttimestamp\nu1\ta\t1\nu1\tb\n")
    with pytest.raises(DataError, match=":3"):
        D.load_interactions(p)


def test_load_empty_file(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("user_id\titem_id\ttimestamp\n")
    with pytest.raises(DataError):
        D.load_interactions(p)


def test_pantry_shaped_file_statistics(tmp_path):
    # deterministic file with the Pantry dataset's published shape:
    # 13,614 users, 7,670 items, 131,311 interactions, average length 9.65
    n_users, n_items, n_inter = 13_614, 7_670, 131_311
    base = n_inter // n_users
    extra = n_inter - base * n_users
    lines = ["user_id\titem_id\ttimestamp\n"]
    item = 0
    for u in range(n_users):
        length = base + (1 if u < extra else 0)
        for t in range(length):
            lines.append(f"u{u}\ti{item % n_items}\t{t}\n")
            item += 1
    p = tmp_path / "pantry_shaped.tsv"
    p.write_text("".join(lines))
    ds = D.load_interactions(p)
    assert ds.n_users == n_users
    assert ds.n_items == n_items
    assert ds.n_interactions == n_inter
    assert round(ds.avg_length(), 2) == 9.65


# -- kcore_filter --------------------------------------------------------------


def kcore_oracle(seqs, k):
    """Independent pruning: recount from scratch and drop one offender class
    per pass until stable."""
    seqs = {u: list(s) for u, s in enumerate(seqs)}
    while True:
        counts = collections.Counter(it for s in seqs.values() for it in s)
        dead_items = {it for it, c in counts.items() if c < k}
        next_seqs = {u: [it for it in s if it not in dead_items] for u, s in seqs.items()}
        next_seqs = {u: s for u, s in next_seqs.items() if len(s) >= k}
        if next_seqs == seqs:
            return seqs
        seqs = next_seqs


def test_kcore_fixed_point_unchanged():
    ds = dataset([[1, 2], [1, 2], [3, 3]])
    out = D.kcore_filter(ds, 2)
    assert out.sequences == ds.sequences
    assert out.user_ids == ds.user_ids


def test_kcore_k1_unchanged():
    ds = dataset([[1], [2, 3, 2]])
    out = D.kcore_filter(ds, 1)
    assert out.sequences == ds.sequences


def test_kcore_toy_graph_matches_oracle():
    seqs = [[1, 2, 3], [1, 2], [3], [4, 4], [5], [6, 1]]
    ds = dataset(seqs)
    out = D.kcore_filter(ds, 2)
    oracle = kcore_oracle(ds.sequences, 2)
    assert {out.user_ids[i]: [out.item_ids[it] for it in s] for i, s in enumerate(out.sequences)} == {
        ds.user_ids[u]: [ds.item_ids[it] for it in s] for u, s in oracle.items()
    }


def test_kcore_random_matches_oracle_and_is_idempotent():
    rng = make_rng(0)
    seqs = [[int(x) for x in rng.integers(1, 15, size=rng.integers(1, 9))] for _ in range(40)]
    ds = dataset(seqs)
    out = D.kcore_filter(ds, 3)
    oracle = kcore_oracle(ds.sequences, 3)
    got = {out.user_ids[i]: [out.item_ids[it] for it in s] for i, s in enumerate(out.sequences)}
    want = {ds.user_ids[u]: [ds.item_ids[it] for it in s] for u, s in oracle.items()}
    assert got == want
    again = D.kcore_filter(out, 3)
    assert again.sequences == out.sequences and again.item_ids == out.item_ids


def test_kcore_empty_result_raises():
    ds = dataset([[1], [2]])
    with pytest.raises(DataError):
        D.kcore_filter(ds, 3)


# -- leave_one_out_split ---------------------------------------------------------


def test_split_four_items():
    ds = dataset([[1, 2, 3, 4]])
    s = D.leave_one_out_split(ds)
    assert s.train == [[1, 2, 3, 4][:2]] and s.valid == [3] and s.test == [4]


def test_split_three_items():
    s = D.leave_one_out_split(dataset([[1, 2, 3]]))
    assert s.train == [[1]] and s.valid == [2] and s.test == [3]


def test_split_excludes_short_users():
    s = D.leave_one_out_split(dataset([[1, 2], [1, 2, 3]]))
    assert s.n_excluded == 1 and len(s.users) == 1


def test_split_round_trip_100_users():
    rng = make_rng(1)
    ds, _ = D.synth_generate(100, 20, 8, 0.5, rng)
    s = D.leave_one_out_split(ds)
    for u, tr, v, te in zip(s.users, s.train, s.valid, s.test):
        assert tr + [v, te] == ds.sequences[u]


# -- build_instances -------------------------------------------------------------


def test_instances_length_two_train():
    split = D.leave_one_out_split(dataset([[1, 2, 3, 4]]))  # train [1,2]
    inst = D.build_instances(split)
    assert inst == [D.TrainingInstance((1,), 2)]


def test_instances_count():
    rng = make_rng(2)
    ds, _ = D.synth_generate(50, 15, 8, 0.5, rng)
    split = D.leave_one_out_split(ds)
    inst = D.build_instances(split)
    assert len(inst) == sum(len(t) - 1 for t in split.train)


def test_instances_truncate_to_most_recent_50():
    seq = list(range(1, 63))  # train = 1..60 after split
    split = D.leave_one_out_split(dataset([seq]))
    inst = D.build_instances(split)
    last = inst[-1]
    assert last.target == 60
    assert last.prefix == tuple(range(10, 60))  # items 10..59, most recent 50
    assert max(len(i.prefix) for i in inst) == 50


def test_instances_same_for_both_stages():
    split = D.leave_one_out_split(dataset([[1, 2, 3, 4, 5]]))
    assert D.build_instances(split, "pretrain") == D.build_instances(split, "finetune")


# -- make_batches ----------------------------------------------------------------


def fake_instances(n):
    return [D.TrainingInstance((1 + i % 3,), 1 + (i + 1) % 3) for i in range(n)]


def test_batch_sizes_keep_partial():
    batches = D.make_batches(fake_instances(5), 2, make_rng(3))
    assert [b.ids.shape[0] for b in batches] == [2, 2, 1]


def test_right_alignment():
    inst = [D.TrainingInstance((7, 9), 3)]
    (b,) = D.make_batches(inst, 4, make_rng(4))
    assert b.ids.shape == (1, 50)
    assert (b.ids[0, :48] == 0).all()
    assert b.ids[0, 48] == 7 and b.ids[0, 49] == 9
    assert b.mask[0].sum() == 2


def test_same_seed_same_batches():
    inst = fake_instances(23)
    a = D.make_batches(inst, 5, make_rng(5))
    b = D.make_batches(inst, 5, make_rng(5))
    for x, y in zip(a, b):
        assert (x.ids == y.ids).all() and (x.targets == y.targets).all()


def test_mask_marks_exactly_pads_and_targets_never_pad():
    rng = make_rng(6)
    ds, _ = D.synth_generate(30, 12, 8, 0.5, rng)
    split = D.leave_one_out_split(ds)
    for b in D.make_batches(D.build_instances(split), 8, rng):
        assert (b.mask == (b.ids != 0)).all()
        assert (b.targets != 0).all()


# -- cold_item_partition -----------------------------------------------------------


def test_cold_boundary():
    # item 1 appears 10x in train -> warm; item 2 appears 9x -> cold
    seqs = [[1] * 5 + [2] * 5 + [3, 4], [1] * 5 + [2] * 4 + [3, 4]]
    split = D.leave_one_out_split(dataset(seqs))
    assert split.train == [[1] * 5 + [2] * 5, [1] * 5 + [2] * 4]
    cold, warm = D.cold_item_partition(split)
    assert 1 in warm and 2 in cold
    assert 3 in cold and 4 in cold  # never in train


def test_cold_partition_matches_counting_oracle():
    rng = make_rng(7)
    ds, _ = D.synth_generate(60, 20, 8, 0.7, rng)
    split = D.leave_one_out_split(ds)
    cold, warm = D.cold_item_partition(split)
    counts = collections.Counter(it for s in split.train for it in s)
    for it in range(1, ds.n_items + 1):
        assert (it in cold) == (counts[it] < 10)
    assert cold | warm == set(range(1, ds.n_items + 1)) and not cold & warm


# -- synth_generate ----------------------------------------------------------------


def within_cluster_fraction(ds, labels):
    stay = total = 0
    for s in ds.sequences:
        for a, b in zip(s, s[1:]):
            total += 1
            stay += labels[a] == labels[b]
    return stay / total


def test_synth_signal_one_never_leaves_cluster():
    ds, _ = D.synth_generate(30, 20, 8, 1.0, make_rng(8))
    labels = D.synth_clusters(20)
    assert within_cluster_fraction(ds, labels) == 1.0


def test_synth_signal_zero_is_uniform():
    ds, _ = D.synth_generate(400, 20, 8, 0.0, make_rng(9))
    counts = collections.Counter(it for s in ds.sequences for it in s[1:])
    freqs = np.array([counts[i] for i in range(1, 21)]) / sum(counts.values())
    assert np.abs(freqs - 1 / 20).max() < 0.02
    labels = D.synth_clusters(20)
    frac = within_cluster_fraction(ds, labels)
    # by chance only: one cluster of 5 out of 20 items
    assert abs(frac - 5 / 20) < 0.05


def test_synth_signal_strength_frequency():
    ds, _ = D.synth_generate(200, 50, 8, 0.9, make_rng(10))
    frac = within_cluster_fraction(ds, D.synth_clusters(50))
    assert abs(frac - 0.9) < 0.03


def test_synth_features_cluster_structure():
    _, store = D.synth_generate(20, 20, 16, 0.9, make_rng(11))
    labels = D.synth_clusters(20)
    ids = sorted(store.text)
    means = {iid: store.text[iid].mean(axis=0) for iid in ids}
    same = np.linalg.norm(means["i00001"] - means[f"i{1 + int(np.flatnonzero(labels[1:] == labels[1])[1]):05d}"])
    other = np.linalg.norm(means["i00001"] - means[f"i{1 + int(np.flatnonzero(labels[1:] != labels[1])[0]):05d}"])
    assert same < other


def test_synth_rejects_bad_config():
    with pytest.raises(ConfigError):
        D.synth_generate(5, 20, 8, 0.5, make_rng(12))
    with pytest.raises(ConfigError):
        D.synth_generate(20, 20, 4, 0.5, make_rng(12))


# -- feature store -----------------------------------------------------------------


def toy_store(d=8, rows=(1, 4, 10)):
    rng = make_rng(13)
    text, image = {}, {}
    for i, r in enumerate(rows):
        text[f"it{i}"] = rng.normal(size=(r, d)).astype(np.float32)
        image[f"it{i}"] = rng.normal(size=(max(1, r - 1), d)).astype(np.float32)
    return D.FeatureStore(d, text, image)


def test_store_round_trip_bit_exact(tmp_path):
    store = toy_store()
    p = tmp_path / "s.bin"
    D.write_feature_store(store, p)
    back = D.load_feature_store(p)
    assert back.d == store.d
    for iid in store.text:
        assert (back.text[iid] == store.text[iid]).all()
        assert (back.image[iid] == store.image[iid]).all()


def test_store_wrong_magic_rejected(tmp_path):
    p = tmp_path / "s.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        D.load_feature_store(p)


def test_store_truncated_rejected(tmp_path):
    store = toy_store()
    p = tmp_path / "s.bin"
    D.write_feature_store(store, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-7])
    with pytest.raises(DataError, match="truncated"):
        D.load_feature_store(p)


def test_store_trailing_bytes_rejected(tmp_path):
    store = toy_store()
    p = tmp_path / "s.bin"
    D.write_feature_store(store, p)
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(DataError, match="trailing"):
        D.load_feature_store(p)


def test_store_size_formula(tmp_path):
    d = 8
    store = toy_store(d=d, rows=(1, 4, 10))
    p = tmp_path / "s.bin"
    D.write_feature_store(store, p)
    expected = 8 + 12  # magic + header
    for iid in store.item_ids():
        expected += D.item_payload_bytes(
            len(iid.encode()), d, store.text[iid].shape[0], store.image[iid].shape[0]
        )
    assert p.stat().st_size == expected


def test_store_missing_modality_rejected():
    rng = make_rng(14)
    with pytest.raises(DataError, match="missing a modality"):
        D.FeatureStore(8, {"a": rng.normal(size=(1, 8)).astype(np.float32)}, {})


def test_store_row_count_bounds():
    rng = make_rng(15)
    m = rng.normal(size=(11, 8)).astype(np.float32)
    with pytest.raises(DataError, match="row count"):
        D.FeatureStore(8, {"a": m}, {"a": m[:1]})


def test_interactions_write_read_round_trip(tmp_path):
    ds, _ = D.synth_generate(20, 12, 8, 0.5, make_rng(16))
    p = tmp_path / "i.tsv"
    D.write_interactions(ds, p)
    back = D.load_interactions(p)
    # item indices are assigned by first appearance, so compare at the id level
    assert back.user_ids == ds.user_ids
    for a, b in zip(back.sequences, ds.sequences):
        assert [back.item_ids[i] for i in a] == [ds.item_ids[i] for i in b]
