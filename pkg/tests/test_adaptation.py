import logging
import math

import numpy as np
import pytest

from refgame.adaptation import (
    AdaptationConfig,
    Lexicon,
    Observation,
    RehearsalBuffer,
    augment,
    build_map_cache,
    contrastive_loss,
    freetext_chunks,
    grammar_chunks,
    init_buffer,
    is_noun_phrase,
    kl_regularizer,
    sample_regularizer_objects,
    update_step,
    utterance_loss,
)
from refgame.captioner import CaptionerParams, FrozenSnapshot, utterance_logprob
from refgame.errors import ConfigurationError, InputError, InternalError
from refgame.numerics import ascent_step, finite_difference, max_relative_error
from refgame.world import EOS_ID, AttributeSchema, Vocabulary, generate_domain

SCHEMA = AttributeSchema()
LEX = Lexicon.from_schema(SCHEMA)


def small_model(rng, pool, vocab, embed=5, hidden=8, scale=0.4):
    return CaptionerParams.random(len(vocab), SCHEMA.feature_dim, embed, hidden, rng, scale)


class TestAugment:
    def test_template_caption_yields_suffix_chunks(self):
        words = ("the", "big", "red", "striped", "square")
        out = augment(words, "grammar", LEX)
        assert out == [
            ("the", "big", "red", "striped", "square"),
            ("big", "red", "striped", "square"),
            ("red", "striped", "square"),
            ("striped", "square"),
            ("square",),
        ]

    def test_single_word_is_fixed_point(self):
        assert augment(("square",), "grammar", LEX) == [("square",)]

    def test_paper_style_free_text_extracts_noun_phrases(self):
        # the documented example needs an English-ish lexicon
        lex = Lexicon(
            determiners=frozenset({"two", "a"}),
            adjectives=frozenset(),
            nouns=frozenset({"men", "bench"}),
        )
        words = ("two", "men", "are", "sitting", "on", "a", "bench")
        chunks = freetext_chunks(words, lex)
        assert ("two", "men") in chunks
        assert ("a", "bench") in chunks

    def test_freetext_compound_includes_inner_noun_phrases(self):
        words = ("a", "big", "square", "with", "a", "red", "circle")
        chunks = freetext_chunks(words, LEX)
        assert ("a", "big", "square", "with", "a", "red", "circle") in chunks
        assert ("a", "big", "square") in chunks
        assert ("a", "red", "circle") in chunks

    def test_freetext_on_plain_template_is_single_span(self):
        out = augment(("the", "red", "square"), "freetext", LEX)
        assert out == [("the", "red", "square")]

    def test_unknown_tokens_break_freetext_spans(self):
        chunks = freetext_chunks(("<unk>", "red", "square", "<unk>"), LEX)
        assert chunks == [("red", "square")]

    def test_empty_utterance_is_input_error(self):
        with pytest.raises(InputError):
            augment((), "grammar", LEX)

    def test_always_contains_full_utterance_first(self):
        words = ("red", "square")
        for mode in ("grammar", "freetext"):
            out = augment(words, mode, LEX)
            assert out[0] == words

    def test_is_noun_phrase(self):
        assert is_noun_phrase(("the", "big", "red", "square"), LEX)
        assert is_noun_phrase(("square",), LEX)
        assert is_noun_phrase(("a", "square", "with", "the", "circle"), LEX)
        assert not is_noun_phrase(("the", "big", "red"), LEX)
        assert not is_noun_phrase(("square", "square"), LEX)
        assert not is_noun_phrase((), LEX)


class TestLosses:
    @pytest.fixture(scope="class")
    def setup(self):
        vocab = Vocabulary.from_schema(SCHEMA)
        pool = generate_domain(SCHEMA, 30, seed=17)
        rng = np.random.default_rng(5)
        params = small_model(rng, pool, vocab)
        return vocab, pool, params

    def test_utterance_loss_zero_weight_model(self, setup):
        vocab, pool, _ = setup
        params = CaptionerParams.zeros(len(vocab), SCHEMA.feature_dim, 4, 6)
        value, _ = utterance_loss(params, (5, 6, EOS_ID), pool.objects[0])
        assert value == pytest.approx(3 * math.log(len(vocab)), rel=1e-12)

    def test_utterance_loss_gradient_matches_finite_differences(self, setup):
        vocab, pool, params = setup
        utterance = (4, 9, EOS_ID)
        obj = pool.objects[0]
        value, grads = utterance_loss(params, utterance, obj)
        worst = 0.0
        for name, arr in params.tensors().items():
            fd = finite_difference(lambda: utterance_loss(params, utterance, obj)[0], arr)
            worst = max(worst, max_relative_error(grads[name], fd))
        assert worst <= 1e-4

    def test_utterance_loss_strictly_decreases_after_one_ascent_step(self, setup):
        vocab, pool, _ = setup
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            params = small_model(rng, pool, vocab)
            obj = pool.objects[seed % len(pool)]
            utterance = tuple(int(t) for t in rng.integers(3, len(vocab), size=3)) + (EOS_ID,)
            before, grads = utterance_loss(params, utterance, obj)
            ascent_step(params.tensors(), {k: -g for k, g in grads.items()}, 0.01)
            after, _ = utterance_loss(params, utterance, obj)
            hits += after < before
        assert hits == 100

    def test_contrastive_identical_objects_give_log4(self, setup):
        vocab, pool, params = setup
        obj = pool.objects[0]
        value, grads = contrastive_loss(params, (4, EOS_ID), obj, [obj, obj, obj, obj])
        assert value == pytest.approx(math.log(4), rel=1e-12)
        assert all(np.allclose(g, 0.0) for g in grads.values())

    def test_contrastive_singleton_context_is_zero(self, setup):
        vocab, pool, params = setup
        obj = pool.objects[1]
        value, grads = contrastive_loss(params, (4, EOS_ID), obj, [obj])
        assert value == 0.0
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())

    def test_contrastive_gradient_matches_finite_differences(self, setup):
        vocab, pool, params = setup
        context = list(pool.objects[:4])
        obj = context[2]
        utterance = (7, 5, EOS_ID)
        _, grads = contrastive_loss(params, utterance, obj, context)
        worst = 0.0
        for name, arr in params.tensors().items():
            fd = finite_difference(
                lambda: contrastive_loss(params, utterance, obj, context)[0], arr
            )
            worst = max(worst, max_relative_error(grads[name], fd))
        assert worst <= 1e-4


class TestKLRegularizer:
    @pytest.fixture(scope="class")
    def setup(self):
        vocab = Vocabulary.from_schema(SCHEMA)
        pool = generate_domain(SCHEMA, 30, seed=23)
        rng = np.random.default_rng(3)
        params = small_model(rng, pool, vocab)
        snapshot = FrozenSnapshot.capture(params)
        cache = build_map_cache(snapshot, pool, max_len=8)
        return vocab, pool, params, snapshot, cache

    def test_exactly_zero_at_snapshot(self, setup):
        _, pool, params, snapshot, cache = setup
        sample = list(pool.objects[:7])
        value, grads = kl_regularizer(params, snapshot, cache, sample)
        assert value == 0.0
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())

    def test_nonnegative_under_perturbations(self, setup):
        _, pool, params, snapshot, cache = setup
        rng = np.random.default_rng(0)
        sample = list(pool.objects[:5])
        for _ in range(50):
            live = params.copy()
            for arr in live.tensors().values():
                arr += rng.standard_normal(arr.shape) * 0.02
            value, _ = kl_regularizer(live, snapshot, cache, sample)
            assert value >= 0.0

    def test_gradient_matches_finite_differences(self, setup):
        _, pool, params, snapshot, cache = setup
        rng = np.random.default_rng(8)
        live = params.copy()
        for arr in live.tensors().values():
            arr += rng.standard_normal(arr.shape) * 0.05
        sample = list(pool.objects[:5])
        _, grads = kl_regularizer(live, snapshot, cache, sample)
        worst = 0.0
        for name, arr in live.tensors().items():
            fd = finite_difference(
                lambda: kl_regularizer(live, snapshot, cache, sample)[0], arr
            )
            worst = max(worst, max_relative_error(grads[name], fd))
        assert worst <= 1e-4

    def test_cache_miss_is_internal_error(self, setup):
        _, pool, params, snapshot, cache = setup
        partial = {k: v for k, v in cache.items() if k != pool.objects[0].object_id}
        with pytest.raises(InternalError):
            kl_regularizer(params, snapshot, partial, [pool.objects[0]])

    def test_default_sample_size_is_50(self, setup):
        _, pool, *_ = setup
        assert AdaptationConfig().reg_pool_sample == 50
        big = generate_domain(SCHEMA, 120, seed=1)
        sample = sample_regularizer_objects(big, 50, np.random.default_rng(0))
        assert len(sample) == 50
        assert len({o.object_id for o in sample}) == 50


class TestConfig:
    def test_reference_defaults(self):
        cfg = AdaptationConfig()
        assert cfg.learning_rate == 0.0005
        assert cfg.steps_per_trial == 6
        assert cfg.augment_batch == 8
        assert cfg.reg_pool_sample == 50
        assert (cfg.lambda_utterance, cfg.lambda_contrastive, cfg.lambda_kl, cfg.lambda_rehearsal) == (
            1.0,
            0.1,
            0.5,
            0.3,
        )
        assert cfg.max_decode_len == 12
        assert cfg.listener_prior == "uniform"

    def test_negative_coefficient_rejected(self):
        with pytest.raises(ConfigurationError):
            AdaptationConfig(lambda_kl=-0.1)

    def test_loadable_from_config_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"adaptation": {"learning_rate": 0.001, "lambda_kl": 0.0}}')
        cfg = AdaptationConfig.from_file(path)
        assert cfg.learning_rate == 0.001
        assert cfg.lambda_kl == 0.0
        assert cfg.steps_per_trial == 6

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError):
            AdaptationConfig.from_dict({"nope": 1})


class TestBufferAndUpdate:
    @pytest.fixture()
    def setup(self):
        vocab = Vocabulary.from_schema(SCHEMA)
        pool = generate_domain(SCHEMA, 60, seed=31)
        rng = np.random.default_rng(11)
        params = small_model(rng, pool, vocab, embed=8, hidden=16, scale=0.5)
        params.frozen = frozenset({"enc_w", "enc_b"})
        snapshot = FrozenSnapshot.capture(params)
        live = snapshot.thaw()
        cache = build_map_cache(snapshot, pool, max_len=8)
        context = list(pool.objects[:4])
        buffer = init_buffer(live, context, max_len=8, seed=0)
        return vocab, pool, live, snapshot, cache, context, buffer

    def test_init_buffer_one_caption_per_object(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        assert len(buffer) == 4
        assert {o.target_id for o in buffer.items} == {o.object_id for o in context}
        assert all(o.trial_index == 0 for o in buffer.items)

    def test_init_buffer_deterministic(self, setup):
        vocab, pool, live, snapshot, cache, context, _ = setup
        a = init_buffer(live, context, max_len=8, seed=0)
        b = init_buffer(live, context, max_len=8, seed=0)
        assert [o.utterance for o in a.items] == [o.utterance for o in b.items]

    def test_update_step_appends_observation_and_augmentations(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        target = context[0]
        words = ("the", target.size, target.color, target.shape)
        obs = Observation(
            utterance=vocab.to_utterance(words),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=3,
        )
        before = len(buffer)
        update_step(
            live, obs, context, buffer, AdaptationConfig(), snapshot, cache, pool, vocab, (0, 3, 1)
        )
        added = buffer.items[before:]
        assert added[0] == obs
        # suffix chunks of a 4-word caption: 3 proper sub-phrases
        assert len(added) == 4
        assert all(o.target_id == target.object_id for o in added)

    def test_update_step_increases_observed_logprob(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        target = context[1]
        obs = Observation(
            utterance=vocab.to_utterance(("the", target.color, target.shape)),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=1,
        )
        before = utterance_logprob(live, target.features, obs.utterance)
        update_step(
            live, obs, context, buffer, AdaptationConfig(), snapshot, cache, pool, vocab, (0, 1, 1)
        )
        after = utterance_logprob(live, target.features, obs.utterance)
        assert after > before

    def test_encoder_untouched_by_update(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        enc_before = live.enc_w.copy()
        target = context[2]
        obs = Observation(
            utterance=vocab.to_utterance((target.shape,)),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=0,
        )
        update_step(
            live, obs, context, buffer, AdaptationConfig(), snapshot, cache, pool, vocab, (0, 0, 1)
        )
        assert np.array_equal(live.enc_w, enc_before)

    def test_same_rng_key_reproduces_update_bit_exactly(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        target = context[0]
        obs = Observation(
            utterance=vocab.to_utterance((target.color, target.shape)),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=2,
        )
        import copy

        live2 = snapshot.thaw()
        live2_t = live2.tensors()
        for name, arr in live.tensors().items():
            live2_t[name][...] = arr
        buffer2 = RehearsalBuffer(items=list(buffer.items), seed=buffer.seed)
        update_step(
            live, obs, context, buffer, AdaptationConfig(), snapshot, cache, pool, vocab, (9, 2, 1)
        )
        update_step(
            live2, obs, context, buffer2, AdaptationConfig(), snapshot, cache, pool, vocab, (9, 2, 1)
        )
        assert live.digest() == live2.digest()

    def test_lambda_zero_skips_term_entirely(self, setup, monkeypatch):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        import refgame.adaptation as adaptation

        def boom(*args, **kwargs):
            raise AssertionError("regularizer evaluated despite lambda_kl = 0")

        monkeypatch.setattr(adaptation, "kl_regularizer", boom)
        target = context[0]
        obs = Observation(
            utterance=vocab.to_utterance((target.shape,)),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=0,
        )
        update_step(
            live,
            obs,
            context,
            buffer,
            AdaptationConfig(lambda_kl=0.0),
            snapshot,
            cache,
            pool,
            vocab,
            (0, 0, 1),
        )

    def test_non_finite_objective_restores_and_skips(self, setup, caplog):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        # drive the target token's probability to exactly zero so the
        # objective becomes -inf
        live.out_b[5] = -2000.0
        digest_before = live.digest()
        target = context[0]
        obs = Observation(
            utterance=(5, EOS_ID),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=0,
        )
        with caplog.at_level(logging.WARNING):
            update_step(
                live,
                obs,
                context,
                buffer,
                AdaptationConfig(lambda_kl=0.0, lambda_rehearsal=0.0),
                snapshot,
                cache,
                pool,
                vocab,
                (0, 0, 1),
            )
        assert live.digest() == digest_before
        assert any("non-finite" in rec.message for rec in caplog.records)

    def test_frozen_snapshot_params_rejected(self, setup):
        vocab, pool, live, snapshot, cache, context, buffer = setup
        obs = buffer.items[0]
        with pytest.raises(ConfigurationError):
            update_step(
                snapshot.params,
                obs,
                context,
                buffer,
                AdaptationConfig(),
                snapshot,
                cache,
                pool,
                vocab,
                (0, 0, 1),
            )


class TestBatchComposition:
    def test_full_utterance_participates_in_every_gradient_step(self, monkeypatch):
        import refgame.adaptation as adaptation

        vocab = Vocabulary.from_schema(SCHEMA)
        pool = generate_domain(SCHEMA, 30, seed=41)
        rng = np.random.default_rng(3)
        params = small_model(rng, pool, vocab)
        params.frozen = frozenset({"enc_w", "enc_b"})
        snapshot = FrozenSnapshot.capture(params)
        live = snapshot.thaw()
        cache = build_map_cache(snapshot, pool, max_len=8)
        context = list(pool.objects[:4])
        buffer = init_buffer(live, context, max_len=8)
        target = context[0]
        obs = Observation(
            utterance=vocab.to_utterance(("the", target.color, target.shape)),
            target_id=target.object_id,
            context_ids=tuple(o.object_id for o in context),
            trial_index=0,
        )

        step_rows: list[set] = []
        real_forward = adaptation.RowBatch.forward

        def spy_forward(self):
            step_rows.append(set(self._index))
            return real_forward(self)

        monkeypatch.setattr(adaptation.RowBatch, "forward", spy_forward)
        config = AdaptationConfig(lambda_kl=0.0)  # keep only the main batch forward
        update_step(live, obs, context, buffer, config, snapshot, cache, pool, vocab, (0, 0, 1))
        assert len(step_rows) == config.steps_per_trial
        for rows in step_rows:
            assert (target.object_id, obs.utterance) in rows
