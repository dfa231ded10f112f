import json

import numpy as np
import pytest

from refgame.errors import InputError
from refgame.world import (
    AttributeSchema,
    Vocabulary,
    build_challenging_context,
    build_simple_context,
    contexts_to_lines,
    default_cluster_count,
    generate_domain,
    kmeans_partition,
    make_object,
    pool_to_lines,
    realize_captions,
    slot_overlap,
)

SCHEMA = AttributeSchema()


class TestSchemaAndVocabulary:
    def test_default_vocabulary_is_29_words(self):
        vocab = Vocabulary.from_schema(SCHEMA)
        assert len(vocab) == 29
        assert vocab.words[:3] == ("<bos>", "<eos>", "<unk>")
        assert {"the", "a", "with"} <= set(vocab.words)

    def test_feature_dim_is_23(self):
        assert SCHEMA.feature_dim == 23

    def test_shape_mention_probability_must_stay_one(self):
        with pytest.raises(InputError):
            AttributeSchema(
                mention_probs={"det": 0.5, "size": 0.1, "color": 0.5, "pattern": 0.1, "shape": 0.5}
            )

    def test_tokenize_text_reports_unknown_words(self):
        vocab = Vocabulary.from_schema(SCHEMA)
        ids, unknown = vocab.tokenize_text("the big zorp square")
        assert unknown == ("zorp",)
        assert ids[-1] == 1  # EOS
        assert vocab.words[ids[2]] == "<unk>"


class TestGenerateDomain:
    def test_single_object_has_23_dim_features(self):
        pool = generate_domain(SCHEMA, 1, seed=0)
        assert len(pool) == 1
        assert pool.objects[0].features.shape == (23,)

    def test_one_hot_blocks_sum_to_one(self):
        pool = generate_domain(SCHEMA, 10, seed=3)
        sizes = (len(SCHEMA.sizes), len(SCHEMA.colors), len(SCHEMA.patterns), len(SCHEMA.shapes))
        for obj in pool.objects:
            offset = 0
            for block in sizes:
                assert obj.features[offset : offset + block].sum() == 1.0
                offset += block

    def test_same_seed_reproduces_pool(self):
        a = generate_domain(SCHEMA, 25, seed=11)
        b = generate_domain(SCHEMA, 25, seed=11)
        assert [o.to_dict() for o in a.objects] == [o.to_dict() for o in b.objects]

    def test_profiles_are_distinct(self):
        pool = generate_domain(SCHEMA, 200, seed=5)
        profiles = {(o.size, o.color, o.pattern, o.shape) for o in pool.objects}
        assert len(profiles) == 200

    def test_oversized_request_is_input_error(self):
        with pytest.raises(InputError):
            generate_domain(SCHEMA, SCHEMA.combination_count + 1, seed=0)

    def test_feature_encoding_is_injective(self):
        pool = generate_domain(SCHEMA, 300, seed=2)
        keys = {tuple(o.features.tolist()) for o in pool.objects}
        assert len(keys) == 300


class TestRealizeCaptions:
    OBJ = make_object(SCHEMA, 0, ("big", "red", "striped", "square"))

    def test_zero_count_gives_empty_list(self):
        assert realize_captions(self.OBJ, SCHEMA, 0, seed=0) == []

    def test_full_mention_probabilities_realize_the_template(self):
        schema = AttributeSchema(
            mention_probs={"det": 1.0, "size": 1.0, "color": 1.0, "pattern": 1.0}
        )
        caps = realize_captions(self.OBJ, schema, 3, seed=0)
        assert caps == [("the", "big", "red", "striped", "square")] * 3

    def test_pattern_word_frequency_tracks_mention_probability(self):
        caps = realize_captions(self.OBJ, SCHEMA, 10_000, seed=42)
        freq = sum("striped" in c for c in caps) / len(caps)
        assert abs(freq - 0.15) <= 0.02

    def test_shape_always_present(self):
        caps = realize_captions(self.OBJ, SCHEMA, 500, seed=9)
        assert all(c[-1] == "square" for c in caps)


class TestKMeans:
    def test_k_equal_to_pool_size_gives_singletons(self):
        pool = generate_domain(SCHEMA, 12, seed=1)
        labels = kmeans_partition(pool, 12, seed=0)
        assert len(set(labels.tolist())) == 12

    def test_assignment_matches_nearest_centroid_recomputation(self):
        pool = generate_domain(SCHEMA, 80, seed=4)
        labels = kmeans_partition(pool, 8, seed=0)
        # recompute centroids from the assignment and verify each object maps
        # to its nearest one
        x = pool.features
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(8)])
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(labels, dists.argmin(axis=1))

    def test_default_cluster_count_scales_as_pool_over_ten(self):
        assert default_cluster_count(200) == 20
        assert default_cluster_count(1000) == 100  # the full-scale reference point
        assert default_cluster_count(5) == 1

    def test_zero_k_is_input_error(self):
        pool = generate_domain(SCHEMA, 8, seed=0)
        with pytest.raises(InputError):
            kmeans_partition(pool, 0, seed=0)


class TestContexts:
    def test_challenging_context_has_four_members(self):
        pool = generate_domain(SCHEMA, 40, seed=6)
        labels = kmeans_partition(pool, 4, seed=0)
        ctx = build_challenging_context(pool, labels, seed=0)
        assert len(ctx.object_ids) == 4
        assert len(set(ctx.object_ids)) == 4

    def test_pool_of_exactly_four_returns_all(self):
        pool = generate_domain(SCHEMA, 4, seed=7)
        labels = kmeans_partition(pool, 1, seed=0)
        ctx = build_challenging_context(pool, labels, seed=0)
        assert sorted(ctx.object_ids) == [0, 1, 2, 3]

    def test_members_are_near_neighbors_in_dense_pools(self):
        pool = generate_domain(SCHEMA, 500, seed=8)
        labels = kmeans_partition(pool, 50, seed=0)
        for seed in range(20):
            ctx = build_challenging_context(pool, labels, seed=seed)
            objs = [pool.by_id(i) for i in ctx.object_ids]
            anchor = objs[0]
            for other in objs[1:]:
                assert 4 - slot_overlap(anchor, other) <= 2

    def test_simple_context_has_distinct_shapes(self):
        pool = generate_domain(SCHEMA, 60, seed=9)
        for seed in range(10):
            ctx = build_simple_context(pool, seed=seed)
            shapes = {pool.by_id(i).shape for i in ctx.object_ids}
            assert len(shapes) == 4

    def test_simple_context_deterministic(self):
        pool = generate_domain(SCHEMA, 60, seed=9)
        assert build_simple_context(pool, seed=5) == build_simple_context(pool, seed=5)

    def test_insufficient_shape_diversity_is_input_error(self):
        combos = [("big", "red", "striped", s) for s in SCHEMA.shapes[:3]] * 2
        objects = tuple(
            make_object(SCHEMA, i, ("big", SCHEMA.colors[i], "striped", SCHEMA.shapes[i % 3]))
            for i in range(6)
        )
        from refgame.world import DomainPool

        pool = DomainPool(schema=SCHEMA, objects=objects, seed=0)
        with pytest.raises(InputError):
            build_simple_context(pool, seed=0)

    def test_challenging_members_share_more_slots_than_simple(self):
        pool = generate_domain(SCHEMA, 300, seed=10)
        labels = kmeans_partition(pool, 30, seed=0)

        def mean_overlap(ctx):
            objs = [pool.by_id(i) for i in ctx.object_ids]
            pairs = [
                slot_overlap(objs[i], objs[j])
                for i in range(4)
                for j in range(i + 1, 4)
            ]
            return float(np.mean(pairs))

        challenging = np.mean(
            [mean_overlap(build_challenging_context(pool, labels, seed=s)) for s in range(50)]
        )
        simple = np.mean([mean_overlap(build_simple_context(pool, seed=s)) for s in range(50)])
        assert challenging > simple


def test_pool_and_context_serialization_lines():
    pool = generate_domain(SCHEMA, 5, seed=0)
    lines = pool_to_lines(pool)
    assert len(lines) == 5
    assert json.loads(lines[0])["id"] == 0
    labels = kmeans_partition(pool, 1, seed=0)
    ctx = build_challenging_context(pool, labels, seed=0)
    (line,) = contexts_to_lines([ctx])
    parsed = json.loads(line)
    assert parsed["kind"] == "challenging"
    assert len(parsed["object_ids"]) == 4
