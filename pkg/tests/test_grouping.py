"""Greedy similarity grouping: examples, oracle equivalence, invariants."""

import math

import numpy as np
import pytest

from ipf.boxes import InstanceFeature, ScoredBox, padded_box
from ipf.grouping import (
    aggregate_group,
    build_prompt_set,
    canonical_order,
    cosine_similarity,
    group_instances,
)


def feat(vector, frame=0, score=0.5, valid=True):
    box = padded_box(frame) if not valid else ScoredBox(0.0, 0.0, 0.1, 0.1, score, frame=frame)
    return InstanceFeature(np.asarray(vector, dtype=float), frame, box, valid=valid)


def cosine_oracle(u, v):
    du = math.sqrt(sum(x * x for x in u))
    dv = math.sqrt(sum(x * x for x in v))
    if du == 0.0 or dv == 0.0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (du * dv)


def grouping_oracle(features, threshold):
    """Independent seed-scan: returns member index lists in creation order."""
    remaining = [i for i, f in enumerate(features) if f.valid]
    result = []
    while remaining:
        seed, rest = remaining[0], remaining[1:]
        members = [seed]
        leftover = []
        for j in rest:
            sim = cosine_oracle(features[seed].vector.tolist(), features[j].vector.tolist())
            (members if sim > threshold else leftover).append(j)
        result.append(members)
        remaining = leftover
    return result


def planted_unit_vectors(rng, clusters=4, per_cluster=3, extras=8, dim=32, jitter=0.02):
    """Unit vectors with near-duplicate clusters (intra sim > 0.95) plus
    mutually distant singletons (inter sim < 0.5)."""
    base = np.linalg.qr(rng.normal(size=(dim, clusters + extras)))[0].T
    vectors, labels = [], []
    for c in range(clusters):
        for _ in range(per_cluster):
            v = base[c] + jitter * rng.normal(size=dim)
            vectors.append(v / np.linalg.norm(v))
            labels.append(c)
    for e in range(extras):
        vectors.append(base[clusters + e])
        labels.append(clusters + e)
    return vectors, labels


class TestCosineSimilarity:
    def test_identical_nonzero(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0

    def test_zero_norm_convention(self):
        assert cosine_similarity(np.zeros(4), np.ones(4)) == 0.0

    def test_range(self):
        rng = np.random.default_rng(30)
        for _ in range(100):
            u, v = rng.normal(size=(2, 6))
            assert -1.0 - 1e-12 <= cosine_similarity(u, v) <= 1.0 + 1e-12


class TestCanonicalOrder:
    def test_frame_ascending_score_descending(self):
        feats = [feat([1.0], frame=1, score=0.2), feat([2.0], frame=0, score=0.1),
                 feat([3.0], frame=0, score=0.9), feat([4.0], frame=1, score=0.8)]
        ordered = canonical_order(feats)
        assert [(f.frame, f.box.score) for f in ordered] == [(0, 0.9), (0, 0.1), (1, 0.8), (1, 0.2)]


class TestGroupInstances:
    def test_identical_vectors_single_group(self):
        feats = [feat([1.0, 2.0])] * 3
        groups = group_instances(feats, 0.9)
        assert len(groups) == 1
        assert groups[0].member_indices == [0, 1, 2]

    def test_orthogonal_vectors_singletons(self):
        feats = [feat([1.0, 0.0, 0.0]), feat([0.0, 1.0, 0.0]), feat([0.0, 0.0, 1.0])]
        groups = group_instances(feats, 0.9)
        assert [g.member_indices for g in groups] == [[0], [1], [2]]

    def test_empty_input(self):
        assert group_instances([], 0.9) == []

    def test_invalid_features_excluded(self):
        feats = [feat([1.0, 0.0]), feat([0.0, 0.0], valid=False), feat([1.0, 0.0])]
        groups = group_instances(feats, 0.9)
        assert len(groups) == 1
        assert groups[0].member_indices == [0, 2]

    def test_planted_clusters_match_oracle(self):
        rng = np.random.default_rng(31)
        vectors, labels = planted_unit_vectors(rng)
        feats = [feat(v, frame=i // 4, score=1.0 - 0.01 * i) for i, v in enumerate(vectors)]
        groups = group_instances(feats, 0.9)
        oracle = grouping_oracle(feats, 0.9)
        assert [g.member_indices for g in groups] == oracle
        # grouping recovers the planted partition: 4 clusters + 8 singletons
        assert len(groups) == 12
        for g in groups:
            assert len({labels[i] for i in g.member_indices}) == 1

    def test_matches_oracle_on_random_inputs(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            n = int(rng.integers(0, 25))
            feats = [feat(rng.normal(size=4), frame=int(rng.integers(0, 8))) for _ in range(n)]
            got = [g.member_indices for g in group_instances(feats, 0.9)]
            assert got == grouping_oracle(feats, 0.9)

    def test_partition_disjoint_exhaustive(self):
        rng = np.random.default_rng(33)
        feats = [feat(rng.normal(size=3)) for _ in range(40)]
        groups = group_instances(feats, 0.8)
        seen = [i for g in groups for i in g.member_indices]
        assert sorted(seen) == list(range(40))
        assert len(seen) == len(set(seen))

    def test_members_exceed_threshold_to_seed(self):
        rng = np.random.default_rng(34)
        feats = [feat(rng.normal(size=3)) for _ in range(60)]
        for g in group_instances(feats, 0.7):
            seed_vec = feats[g.seed_index].vector
            for m in g.member_indices:
                if m != g.seed_index:
                    assert cosine_similarity(seed_vec, feats[m].vector) > 0.7

    def test_seeds_below_threshold_to_earlier_seeds(self):
        rng = np.random.default_rng(35)
        feats = [feat(rng.normal(size=3)) for _ in range(60)]
        groups = group_instances(feats, 0.7)
        for i, g in enumerate(groups):
            for earlier in groups[:i]:
                sim = cosine_similarity(feats[earlier.seed_index].vector, feats[g.seed_index].vector)
                assert sim <= 0.7

    def test_deterministic(self):
        rng = np.random.default_rng(36)
        feats = [feat(rng.normal(size=5)) for _ in range(30)]
        a = group_instances(feats, 0.9)
        b = group_instances(feats, 0.9)
        assert [g.member_indices for g in a] == [g.member_indices for g in b]
        for ga, gb in zip(a, b):
            assert ga.aggregate.tobytes() == gb.aggregate.tobytes()

    def test_group_count_monotone_in_threshold(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            feats = [feat(rng.normal(size=6)) for _ in range(20)]
            counts = [len(group_instances(feats, t)) for t in (0.5, 0.9, 0.99)]
            assert counts[0] <= counts[1] <= counts[2]

    def test_frequent_identity_does_not_overwhelm_sparse_one(self):
        # identity A planted in 8 frames, identity B in 1: one token each
        rng = np.random.default_rng(38)
        a_sig = np.array([1.0, 0.0, 0.0, 0.0])
        b_sig = np.array([0.0, 1.0, 0.0, 0.0])
        feats = [feat(a_sig + 0.01 * rng.normal(size=4), frame=f) for f in range(8)]
        feats.append(feat(b_sig, frame=4, score=0.9))
        groups = group_instances(canonical_order(feats), 0.9)
        assert len(groups) == 2
        assert sorted(len(g.member_indices) for g in groups) == [1, 8]


class TestAggregateGroup:
    def test_single_member_unchanged(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(aggregate_group([v]), v)

    def test_opposite_vectors_cancel(self):
        v = np.array([1.0, -2.0])
        np.testing.assert_array_equal(aggregate_group([v, -v]), np.zeros(2))

    def test_against_mean_oracle(self):
        rng = np.random.default_rng(39)
        members = [rng.normal(size=7) for _ in range(5)]
        expected = np.zeros(7)
        for m in members:
            expected += m
        expected /= 5
        assert np.abs(aggregate_group(members) - expected).max() < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(40)
        members = [rng.normal(size=4) for _ in range(6)]
        forward = aggregate_group(members)
        # same multiset summed in reverse order; tolerance covers reordering
        np.testing.assert_allclose(aggregate_group(members[::-1]), forward, atol=1e-12)

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            aggregate_group([])


class TestBuildPromptSet:
    def test_pads_to_v_max(self):
        rng = np.random.default_rng(41)
        feats = [feat(v) for v in np.linalg.qr(rng.normal(size=(16, 3)))[0].T]
        groups = group_instances(feats, 0.9)
        prompts = build_prompt_set(groups, 80, 16)
        assert prompts.tokens.shape == (80, 16)
        assert prompts.valid_count == 3
        assert np.any(prompts.tokens[:3] != 0.0)
        np.testing.assert_array_equal(prompts.tokens[3:], 0.0)

    def test_empty_groups(self):
        prompts = build_prompt_set([], 80, 8)
        assert prompts.valid_count == 0
        np.testing.assert_array_equal(prompts.tokens, np.zeros((80, 8)))

    def test_overflow_keeps_earliest_created(self):
        rng = np.random.default_rng(42)
        feats = [feat(v) for v in np.linalg.qr(rng.normal(size=(96, 85)))[0].T]
        groups = group_instances(feats, 0.9)
        assert len(groups) == 85
        prompts = build_prompt_set(groups, 80, 96)
        assert prompts.valid_count == 80
        for row in range(80):
            np.testing.assert_array_equal(prompts.tokens[row], groups[row].aggregate)

    def test_rows_match_creation_order(self):
        feats = [feat([1.0, 0.0]), feat([0.0, 1.0])]
        groups = group_instances(feats, 0.9)
        prompts = build_prompt_set(groups, 4, 2)
        np.testing.assert_array_equal(prompts.tokens[0], [1.0, 0.0])
        np.testing.assert_array_equal(prompts.tokens[1], [0.0, 1.0])

    def test_v_max_validated(self):
        with pytest.raises(ValueError):
            build_prompt_set([], 0, 4)
