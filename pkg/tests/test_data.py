import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svbackend.data import (
    EmbeddingSet,
    Manifest,
    ScoreSet,
    TrialList,
    Utterance,
    augment_manifest,
    augmented_counts,
    filter_short,
    l2_normalize,
    load_embeddings,
    load_manifest,
    load_scores,
    load_trials,
    save_embeddings,
    save_manifest,
    save_scores,
    save_trials,
    truncate_durations,
)
from svbackend.errors import (
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    FormatError,
    MalformedHeaderError,
    NonFiniteValueError,
    ZeroNormError,
)


def f32_set(n, d, seed=0):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    return EmbeddingSet([f"u{i}" for i in range(n)], vecs)


class TestEmbeddingIO:
    def test_binary_two_vectors(self, tmp_path):
        emb = f32_set(2, 3)
        save_embeddings(emb, tmp_path / "e.bin")
        back = load_embeddings(tmp_path / "e.bin", "binary")
        assert (len(back), back.dim) == (2, 3)
        assert back == emb

    @pytest.mark.parametrize("n,d", [(0, 4), (1, 1), (17, 8)])
    def test_binary_round_trip_bit_exact(self, tmp_path, n, d):
        emb = f32_set(n, d, seed=n)
        save_embeddings(emb, tmp_path / "e.bin")
        back = load_embeddings(tmp_path / "e.bin")
        assert back.ids == emb.ids
        assert back.vectors.tobytes() == emb.vectors.tobytes()

    def test_empty_binary_has_count_zero(self, tmp_path):
        save_embeddings(EmbeddingSet([], np.zeros((0, 5))), tmp_path / "e.bin")
        raw = (tmp_path / "e.bin").read_bytes()
        assert raw == b"SVE1" + struct.pack("<II", 5, 0)

    def test_binary_layout(self, tmp_path):
        emb = EmbeddingSet(["ab"], [[1.0, -2.0]])
        save_embeddings(emb, tmp_path / "e.bin")
        raw = (tmp_path / "e.bin").read_bytes()
        assert raw == (b"SVE1" + struct.pack("<II", 2, 1) + struct.pack("<H", 2) + b"ab"
                       + struct.pack("<2f", 1.0, -2.0))

    def test_empty_tsv_with_header(self, tmp_path):
        (tmp_path / "e.tsv").write_text("#dim=3\n")
        emb = load_embeddings(tmp_path / "e.tsv", "tsv")
        assert len(emb) == 0 and emb.dim == 3

    def test_cross_format_within_1e6(self, tmp_path):
        emb = f32_set(20, 6, seed=3)
        save_embeddings(emb, tmp_path / "e.tsv", "tsv")
        save_embeddings(load_embeddings(tmp_path / "e.tsv"), tmp_path / "e.bin", "binary")
        back = load_embeddings(tmp_path / "e.bin")
        np.testing.assert_allclose(back.vectors, emb.vectors, atol=1e-6, rtol=0)

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "e.tsv").write_text("#dim=2\nu1\t1 2\nu1\t3 4\n")
        with pytest.raises(DuplicateIdError):
            load_embeddings(tmp_path / "e.tsv")

    def test_distinct_errors(self, tmp_path):
        (tmp_path / "h.tsv").write_text("dim 2\nu1\t1 2\n")
        (tmp_path / "d.tsv").write_text("#dim=2\nu1\t1 2\nu2\t1 2 3\n")
        (tmp_path / "n.tsv").write_text("#dim=2\nu1\t1 nan\n")
        (tmp_path / "h.bin").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(MalformedHeaderError):
            load_embeddings(tmp_path / "h.tsv", "tsv")
        with pytest.raises(DimensionMismatchError):
            load_embeddings(tmp_path / "d.tsv")
        with pytest.raises(NonFiniteValueError):
            load_embeddings(tmp_path / "n.tsv")
        with pytest.raises(MalformedHeaderError):
            load_embeddings(tmp_path / "h.bin", "binary")

    def test_truncated_binary(self, tmp_path):
        save_embeddings(f32_set(3, 4), tmp_path / "e.bin")
        data = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-3])
        with pytest.raises(FormatError):
            load_embeddings(tmp_path / "t.bin")


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(EmbeddingSet(["a"], [[3.0, 4.0]]))
        np.testing.assert_allclose(out.vectors, [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_unit_unchanged(self):
        emb = EmbeddingSet(["a"], [[0.0, 1.0]])
        assert l2_normalize(emb) == emb

    def test_zero_norm_names_id(self):
        with pytest.raises(ZeroNormError, match="'z'"):
            l2_normalize(EmbeddingSet(["a", "z"], [[1.0, 0.0], [0.0, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=8))
    def test_idempotent(self, rows):
        vecs = np.asarray(rows)
        vecs = vecs[np.linalg.norm(vecs, axis=1) > 1e-3]
        if len(vecs) == 0:
            return
        emb = EmbeddingSet([str(i) for i in range(len(vecs))], vecs)
        once = l2_normalize(emb)
        np.testing.assert_allclose(once.norms(), 1.0, atol=1e-9)
        np.testing.assert_allclose(l2_normalize(once).vectors, once.vectors, atol=1e-9)


def manifest(durations, speakers=None):
    speakers = speakers or ["s0"] * len(durations)
    return Manifest(Utterance(f"u{i}", s, d) for i, (d, s) in enumerate(zip(durations, speakers)))


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = Manifest([
            Utterance("a", "spk1", 3.25, 1.0, frozenset({"noise", "rir"})),
            Utterance("b", None, 0.5),
            Utterance("c", "spk2", None, 1.1, frozenset({"tempo"})),
        ])
        save_manifest(m, tmp_path / "m.tsv")
        assert load_manifest(tmp_path / "m.tsv") == m

    def test_augment_small(self):
        m = manifest([10.0, 4.0])
        out = augment_manifest(m, [0.9, 1.1])
        assert len(out) == 6
        assert len(out.speakers()) == 3
        assert out["u0#sp0.9"].duration == pytest.approx(10.0 / 0.9, rel=1e-15)
        assert out["u0#sp0.9"].duration == pytest.approx(11.1111111111, abs=1e-9)
        assert out["u0#sp1.1"].speaker == "s0#sp1.1"
        assert "tempo" in out["u1#sp0.9"].tags

    def test_augment_empty_factors_identity(self):
        m = manifest([1.0, 2.0])
        assert augment_manifest(m, []) == m

    def test_augment_rejects_bad_factor(self):
        with pytest.raises(DataError):
            augment_manifest(manifest([1.0]), [0.8])

    def test_full_scale_counts(self):
        assert augmented_counts(1_092_009, 5_994, [0.9, 1.1]) == (3_276_027, 17_982)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=12),
           st.sampled_from([[], [0.9], [1.1], [0.9, 1.1]]))
    def test_augment_multiplies_counts(self, spk, factors):
        m = manifest([1.0 + i for i in range(len(spk))], [f"s{s}" for s in spk])
        out = augment_manifest(m, factors)
        assert len(out) == len(m) * (1 + len(factors))
        assert len(out.speakers()) == len(m.speakers()) * (1 + len(factors))

    def test_filter_strict(self):
        out = filter_short(manifest([0.5, 1.0, 1.01]), 1.0)
        assert [r.duration for r in out] == [1.01]

    def test_filter_zero_identity_and_all_short(self):
        m = manifest([0.5, 2.0])
        assert filter_short(m, 0) == m
        assert len(filter_short(m, 5.0)) == 0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.01, 30), max_size=20), st.floats(0.0, 20))
    def test_filter_idempotent(self, durs, thr):
        m = manifest(durs)
        once = filter_short(m, thr)
        assert filter_short(once, thr) == once

    def test_truncate(self):
        out = truncate_durations(manifest([35.0, 5.0]), 20.0)
        assert [r.duration for r in out] == [20.0, 5.0]

    def test_truncate_needs_finite_cap(self):
        with pytest.raises(DataError):
            truncate_durations(manifest([1.0]), math.inf)


class TestTrialsScores:
    def test_trial_round_trip(self, tmp_path):
        t = TrialList(["a", "b", "c"], ["x", "y", "z"], [1, 0, -1])
        save_trials(t, tmp_path / "t.txt")
        assert (tmp_path / "t.txt").read_text() == "1 a x\n0 b y\n- c z\n"
        assert load_trials(tmp_path / "t.txt") == t

    def test_score_file_six_decimals(self, tmp_path):
        s = ScoreSet(["a"], ["b"], [0.123456789])
        save_scores(s, tmp_path / "s.txt")
        assert (tmp_path / "s.txt").read_text() == "a b 0.123457\n"
        assert load_scores(tmp_path / "s.txt").scores[0] == 0.123457

    def test_unknown_labels_block_metrics(self):
        with pytest.raises(DataError):
            TrialList(["a"], ["b"], [-1]).target_mask()
