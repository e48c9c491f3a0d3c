import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flora.errors import ConfigError, FormatError, InputError
from flora.hashmodel import HashConfig, build_model
from flora.index import (
    HashTable,
    MultiTableIndex,
    PackedCodes,
    build_index,
    codes_from_bytes,
    codes_to_bytes,
    hamming_ball,
    hamming_distance,
    hamming_distance_matrix,
    hamming_distances,
    load_codes,
    load_index,
    n_words,
    pack_codes,
    probe_radius,
    probe_radius0,
    rank_all,
    rank_full_scan,
    rerank_with_f,
    save_codes,
    save_index,
    unpack_codes,
)
from flora.measures import make_measure, measure_score_batch
from oracles import naive_hamming, naive_rank


def random_signs(rng, n, m):
    return np.where(rng.random((n, m)) < 0.5, -1, 1).astype(np.int8)


sign_matrices = st.tuples(st.integers(0, 40), st.integers(1, 200)).flatmap(
    lambda s: hnp.arrays(np.int8, s, elements=st.sampled_from([-1, 1]))
)


class TestPacking:
    def test_bit_layout(self):
        codes = pack_codes(np.array([[1, 1, -1, -1]]))
        assert codes.words.tolist() == [[3]]

    def test_all_negative_is_zero(self):
        assert not pack_codes(-np.ones((3, 130), dtype=np.int8)).words.any()

    def test_word_boundary(self):
        signs = -np.ones((1, 65), dtype=np.int8)
        signs[0, 64] = 1
        assert pack_codes(signs).words.tolist() == [[0, 1]]

    @settings(max_examples=60, deadline=None)
    @given(sign_matrices)
    def test_round_trip(self, signs):
        codes = pack_codes(signs)
        np.testing.assert_array_equal(unpack_codes(codes), signs)
        assert codes.nbytes == signs.shape[0] * n_words(signs.shape[1]) * 8

    def test_large_round_trip(self):
        signs = random_signs(np.random.default_rng(0), 1000, 128)
        np.testing.assert_array_equal(unpack_codes(pack_codes(signs)), signs)

    def test_rejects_invalid_entries(self):
        with pytest.raises(InputError):
            pack_codes(np.array([[1, 0, -1]]))

    def test_rejects_dirty_padding(self):
        with pytest.raises(InputError):
            PackedCodes(np.array([[1 << 10]], dtype=np.uint64), m=4)


class TestDistance:
    def test_examples(self):
        a = pack_codes(np.array([[1, 1, -1, -1]])).words[0]
        b = pack_codes(np.array([[1, -1, -1, 1]])).words[0]
        assert hamming_distance(a, a, 4) == 0
        assert hamming_distance(a, b, 4) == 2

    def test_length_mismatch(self):
        a = pack_codes(np.ones((1, 4), dtype=np.int8)).words[0]
        with pytest.raises(InputError):
            hamming_distance(a, a, 4, m_b=5)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 128))
    def test_matches_bit_loop(self, seed, m):
        rng = np.random.default_rng(seed)
        codes = pack_codes(random_signs(rng, 8, m))
        for i in range(4):
            assert hamming_distance(codes.words[i], codes.words[i + 4], m) == naive_hamming(codes.words[i], codes.words[i + 4], m)
        np.testing.assert_array_equal(
            hamming_distances(codes.words[0], codes), [naive_hamming(codes.words[0], w, m) for w in codes.words]
        )

    def test_matrix_equals_rows(self):
        rng = np.random.default_rng(1)
        q, c = pack_codes(random_signs(rng, 7, 100)), pack_codes(random_signs(rng, 50, 100))
        mat = hamming_distance_matrix(q, c, chunk=3)
        for i in range(7):
            np.testing.assert_array_equal(mat[i], hamming_distances(q.words[i], c))

    @pytest.mark.parametrize("m", [8, 64, 128])
    def test_binary_cosine_identity(self, m):
        rng = np.random.default_rng(m)
        a, b = random_signs(rng, 1000, m), random_signs(rng, 1000, m)
        pa, pb = pack_codes(a), pack_codes(b)
        lhs = np.einsum("ij,ij->i", a.astype(np.float64), b.astype(np.float64)) / (2 * m) + 0.5
        d = np.array([hamming_distance(pa.words[i], pb.words[i], m) for i in range(1000)])
        np.testing.assert_array_equal(lhs, 1 - d / m)


class TestFullScan:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 300), m=st.integers(1, 128), t=st.integers(1, 320))
    def test_matches_sort_oracle(self, seed, n, m, t):
        rng = np.random.default_rng(seed)
        # few distinct codes so ties are common
        pool = random_signs(rng, max(1, n // 4), m)
        codes = pack_codes(pool[rng.integers(len(pool), size=n)])
        q = pack_codes(random_signs(rng, 1, m)).words[0]
        res = rank_full_scan(q, codes, t)
        ids, dists = naive_rank(q, codes.words, m, t)
        assert res.ids.tolist() == ids
        assert res.values.tolist() == dists
        assert res.truncated == (t > n)
        all_d = np.array([naive_hamming(q, w, m) for w in codes.words])
        assert res.ties_at_cutoff == int(np.sum(all_d == dists[-1]))
        assert res.size_with_ties == int(np.sum(all_d <= dists[-1]))

    def test_exact_match_first(self):
        rng = np.random.default_rng(0)
        signs = random_signs(rng, 100, 64)
        signs[40] = signs[17]
        codes = pack_codes(signs)
        res = rank_full_scan(codes.words[40], codes, 3)
        assert res.ids[:2].tolist() == [17, 40]
        assert res.values[0] == 0

    def test_full_permutation(self):
        codes = pack_codes(random_signs(np.random.default_rng(2), 60, 16))
        res = rank_full_scan(codes.words[0], codes, 60)
        assert sorted(res.ids.tolist()) == list(range(60))
        assert np.all(np.diff(res.values) >= 0)

    def test_rank_all_equals_single(self):
        rng = np.random.default_rng(3)
        q, c = pack_codes(random_signs(rng, 10, 32)), pack_codes(random_signs(rng, 200, 32))
        ids, d = rank_all(q, c, 25)
        for i in range(10):
            r = rank_full_scan(q.words[i], c, 25)
            np.testing.assert_array_equal(ids[i], r.ids)
            np.testing.assert_array_equal(d[i], r.values)

    def test_bad_t(self):
        codes = pack_codes(np.ones((2, 3), dtype=np.int8))
        with pytest.raises(InputError):
            rank_full_scan(codes.words[0], codes, 0)


def fake_index(rng, n, m, L):
    """Index whose tables hold given codes; the models are placeholders."""
    model = build_model(2, 2, HashConfig(m=m, tower_sizes=(2,), shared_sizes=()), rng)
    codes = [pack_codes(random_signs(rng, n, m)) for _ in range(L)]
    return MultiTableIndex([model] * L, codes)


class TestProbing:
    def test_buckets_partition_items(self):
        codes = pack_codes(random_signs(np.random.default_rng(0), 300, 6))
        table = HashTable(codes)
        ids = np.concatenate(list(table.buckets.values()))
        assert sorted(ids.tolist()) == list(range(300))
        for key, members in table.buckets.items():
            for i in members:
                assert codes.words[i].tobytes() == key

    def test_no_match_is_empty(self):
        index = fake_index(np.random.default_rng(0), 5, 8, 1)
        index = MultiTableIndex(index.models, [pack_codes(np.ones((5, 8), dtype=np.int8))])
        q = pack_codes(-np.ones((1, 8), dtype=np.int8)).words[0]
        assert probe_radius0([q], index).size == 0

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 1000), m=st.integers(1, 10), L=st.integers(1, 5))
    def test_matches_linear_scan(self, seed, n, m, L):
        rng = np.random.default_rng(seed)
        index = fake_index(rng, n, m, L)
        queries = [pack_codes(random_signs(rng, 1, m)).words[0] for _ in range(L)]
        expected = sorted({i for q, c in zip(queries, index.codes) for i, w in enumerate(c.words) if naive_hamming(q, w, m) == 0})
        got = probe_radius0(queries, index)
        assert got.tolist() == expected
        for sub in range(1, L + 1):
            assert set(probe_radius0(queries[:sub], index.prefix(sub)).tolist()) <= set(got.tolist())

    def test_table_count_mismatch(self):
        index = fake_index(np.random.default_rng(0), 10, 4, 2)
        with pytest.raises(InputError):
            probe_radius0([index.codes[0].words[0]], index)

    @pytest.mark.parametrize("radius", [0, 1, 2])
    def test_radius_probe(self, radius):
        rng = np.random.default_rng(radius)
        m = 10
        codes = pack_codes(random_signs(rng, 400, m))
        q = codes.words[0]
        got = probe_radius(q, HashTable(codes), radius)
        expected = [i for i, w in enumerate(codes.words) if naive_hamming(q, w, m) <= radius]
        assert got.tolist() == expected
        assert len(hamming_ball(q, m, radius)) == sum([1, m, m * (m - 1) // 2][: radius + 1])

    def test_radius_cap(self):
        table = HashTable(pack_codes(np.ones((1, 128), dtype=np.int8)))
        with pytest.raises(ConfigError):
            probe_radius(np.zeros(2, dtype=np.uint64), table, 2, max_probes=1000)
        with pytest.raises(ConfigError):
            probe_radius(np.zeros(2, dtype=np.uint64), table, 3)


class TestRerank:
    def test_single_candidate(self):
        f = make_measure("scaled_cosine", 3, 3)
        items = np.eye(3)
        res = rerank_with_f([2], np.ones(3), f, items, 5)
        assert res.ids.tolist() == [2] and res.truncated

    def test_empty(self):
        f = make_measure("scaled_cosine", 3, 3)
        assert rerank_with_f([], np.ones(3), f, np.eye(3), 5).empty

    def test_all_items_gives_ground_truth(self):
        rng = np.random.default_rng(0)
        f = make_measure("mlp_em_sum", 4, 4, seed=1)
        items, user = rng.standard_normal((200, 4)), rng.standard_normal(4)
        s = measure_score_batch(f, items, user)
        expected = sorted(range(200), key=lambda i: (-s[i], i))[:10]
        assert rerank_with_f(np.arange(200), user, f, items, 10).ids.tolist() == expected

    def test_ties_by_id(self):
        f = make_measure("scaled_cosine", 2, 2)
        items = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
        res = rerank_with_f([3, 0, 2, 1], np.array([1.0, 0.0]), f, items, 3)
        assert res.ids.tolist() == [0, 1, 3]
        assert res.ties_at_cutoff == 3


class TestFormats:
    @settings(max_examples=40, deadline=None)
    @given(sign_matrices)
    def test_codes_round_trip(self, signs):
        codes = pack_codes(signs)
        buf = codes_to_bytes(codes)
        back = codes_from_bytes(buf)
        assert back == codes
        assert codes_to_bytes(back) == buf
        assert len(buf) == 4 + 4 + 8 + 4 + codes.nbytes

    def test_file_and_truncation(self, tmp_path):
        codes = pack_codes(random_signs(np.random.default_rng(0), 10, 70))
        save_codes(codes, tmp_path / "c.flhc")
        assert load_codes(tmp_path / "c.flhc") == codes
        buf = (tmp_path / "c.flhc").read_bytes()
        (tmp_path / "t.flhc").write_bytes(buf[:-1])
        with pytest.raises(FormatError, match="byte offset"):
            load_codes(tmp_path / "t.flhc")

    def test_dirty_padding_in_file(self):
        buf = bytearray(codes_to_bytes(pack_codes(np.ones((1, 4), dtype=np.int8))))
        buf[-1] = 0x80
        with pytest.raises(FormatError):
            codes_from_bytes(bytes(buf))

    def test_index_directory(self, tmp_path):
        rng = np.random.default_rng(0)
        cfg = HashConfig(m=12, tower_sizes=(4,), shared_sizes=(4,))
        models = [build_model(3, 3, cfg, np.random.default_rng(s)) for s in range(3)]
        items = rng.standard_normal((50, 3))
        index = build_index(models, items, seeds=[0, 1, 2])
        save_index(index, tmp_path / "idx")
        manifest = json.loads((tmp_path / "idx" / "manifest.json").read_text())
        assert manifest["n_tables"] == 3 and manifest["m"] == 12
        assert [t["seed"] for t in manifest["tables"]] == [0, 1, 2]
        back = load_index(tmp_path / "idx")
        assert all(a == b for a, b in zip(back.codes, index.codes))
        u = rng.standard_normal(3)
        assert probe_radius0(back.query_codes(u), back).tolist() == probe_radius0(index.query_codes(u), index).tolist()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            load_index(tmp_path)
