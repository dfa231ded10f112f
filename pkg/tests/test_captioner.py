import itertools
import math

import numpy as np
import pytest

from refgame.captioner import (
    CaptionerParams,
    FrozenSnapshot,
    PretrainConfig,
    beam_decode,
    content_length,
    encode,
    greedy_decode,
    load_checkpoint,
    next_token_dist,
    pretrain,
    save_checkpoint,
    utterance_logprob,
    utterance_logprob_and_grad,
    validate_utterance,
)
from refgame.errors import InputError, TrainingError
from refgame.numerics import finite_difference, max_relative_error
from refgame.world import EOS_ID, Vocabulary, build_pretrain_corpus, generate_domain


def tiny_params(rng, vocab_size=12, feature_dim=23, embed=5, hidden=7, scale=0.4):
    return CaptionerParams.random(vocab_size, feature_dim, embed, hidden, rng, scale)


class TestEncode:
    def test_zero_features_zero_encoder_give_zero_state(self, small_world):
        params = CaptionerParams.zeros(29, 23, 4, 6)
        state = encode(params, np.zeros(23))
        assert np.array_equal(state, np.zeros(6))

    def test_matches_affine_tanh_recomputation(self, rng, small_world):
        obj = small_world["pool"].objects[0]
        params = tiny_params(rng)
        expected = np.tanh(obj.features @ params.enc_w + params.enc_b)
        np.testing.assert_allclose(encode(params, obj.features), expected, rtol=1e-14)

    def test_encoder_output_unchanged_after_adaptation_steps(self, rng, small_world):
        from refgame import numerics

        obj = small_world["pool"].objects[1]
        params = tiny_params(rng)
        params.frozen = frozenset({"enc_w", "enc_b"})
        before = encode(params, obj.features).copy()
        grads = {name: np.ones_like(arr) for name, arr in params.tensors().items()}
        for _ in range(5):
            numerics.ascent_step(params.tensors(), grads, 0.01, params.frozen)
        assert np.array_equal(encode(params, obj.features), before)


class TestNextTokenDist:
    def test_sums_to_one(self, rng, small_world):
        obj = small_world["pool"].objects[0]
        params = tiny_params(rng)
        dist = next_token_dist(params, obj.features, (3, 4))
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)

    def test_zero_decoder_weights_give_uniform(self, small_world):
        obj = small_world["pool"].objects[0]
        params = CaptionerParams.zeros(29, 23, 4, 6)
        dist = next_token_dist(params, obj.features, ())
        np.testing.assert_allclose(dist, np.full(29, 1.0 / 29), atol=1e-15)

    def test_matches_stepwise_recomputation(self, rng, small_world):
        from refgame.numerics import cell_step, softmax

        obj = small_world["pool"].objects[2]
        params = tiny_params(rng, vocab_size=29)
        prefix = (5, 9, 3)
        h = np.tanh(obj.features @ params.enc_w + params.enc_b)
        for tok in (0, *prefix):
            h, _ = cell_step(params.cell, params.emb[tok], h)
        expected = softmax(h @ params.out_w + params.out_b)
        np.testing.assert_allclose(
            next_token_dist(params, obj.features, prefix), expected, rtol=1e-14
        )


class TestUtteranceLogprob:
    def test_zero_weight_model_scores_minus_len_log_vocab(self, small_world):
        obj = small_world["pool"].objects[0]
        params = CaptionerParams.zeros(29, 23, 4, 6)
        utterance = (5, 6, EOS_ID)  # total scored length 3
        assert utterance_logprob(params, obj.features, utterance) == pytest.approx(
            -3 * math.log(29), rel=1e-12
        )

    def test_equals_chain_of_next_token_dists(self, rng, small_world):
        obj = small_world["pool"].objects[3]
        params = tiny_params(rng, vocab_size=29)
        utterance = (4, 8, 2, EOS_ID)
        total = 0.0
        for i, tok in enumerate(utterance):
            dist = next_token_dist(params, obj.features, utterance[:i])
            total += math.log(dist[tok])
        assert utterance_logprob(params, obj.features, utterance) == pytest.approx(
            total, abs=1e-9
        )

    def test_empty_utterance_is_input_error(self, rng, small_world):
        params = tiny_params(rng)
        with pytest.raises(InputError):
            utterance_logprob(params, small_world["pool"].objects[0].features, ())

    def test_validate_rejects_bos_and_unterminated(self):
        with pytest.raises(InputError):
            validate_utterance((0, 5, EOS_ID), 29)
        with pytest.raises(InputError):
            validate_utterance((5, 6), 29)

    def test_gradients_match_finite_differences(self, small_world):
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            obj = small_world["pool"].objects[seed]
            params = tiny_params(rng)
            utterance = (3, 7, 5, EOS_ID)
            _, grads = utterance_logprob_and_grad(params, obj.features, utterance)
            for name, arr in params.tensors().items():
                fd = finite_difference(
                    lambda: utterance_logprob(params, obj.features, utterance), arr
                )
                worst = max(worst, max_relative_error(grads[name], fd))
        assert worst <= 1e-4


class TestDecoding:
    def test_greedy_equals_beam_width_one(self, rng, small_world):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params = tiny_params(rng, vocab_size=29)
            obj = small_world["pool"].objects[seed % len(small_world["pool"])]
            greedy = greedy_decode(params, obj.features, max_len=6)
            beam = beam_decode(params, obj.features, width=1, max_len=6)
            assert greedy == beam[0][0]

    def test_length_bounded_by_max_len(self, rng, small_world):
        params = tiny_params(rng, vocab_size=29)
        for obj in small_world["pool"].objects[:10]:
            out = greedy_decode(params, obj.features, max_len=4)
            assert content_length(out) <= 4
            assert out[-1] == EOS_ID

    def test_greedy_deterministic(self, rng, small_world):
        params = tiny_params(rng, vocab_size=29)
        obj = small_world["pool"].objects[0]
        assert greedy_decode(params, obj.features, 8) == greedy_decode(params, obj.features, 8)

    def test_beam_returns_sorted_normalized_scores(self, rng, small_world):
        params = tiny_params(rng, vocab_size=29)
        obj = small_world["pool"].objects[4]
        ranked = beam_decode(params, obj.features, width=10, max_len=5)
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)

    def test_beam_top1_matches_exhaustive_argmax_small_vocab(self, small_world):
        obj = small_world["pool"].objects[0]
        for seed in range(5):
            rng = np.random.default_rng(seed)
            params = tiny_params(rng, vocab_size=5, embed=4, hidden=6, scale=0.6)
            ranked = beam_decode(params, obj.features, width=130, max_len=4)
            best = None
            for length in range(5):
                for combo in itertools.product(range(2, 5), repeat=length):
                    seq = tuple(combo) + (EOS_ID,)
                    score = utterance_logprob(params, obj.features, seq) / len(seq)
                    if best is None or score > best[1]:
                        best = (seq, score)
            assert ranked[0][0] == best[0]
            assert ranked[0][1] == pytest.approx(best[1], abs=1e-12)


class TestPretrain:
    @pytest.fixture(scope="class")
    def corpus(self):
        from refgame.world import AttributeSchema

        schema = AttributeSchema()
        vocab = Vocabulary.from_schema(schema)
        pool = generate_domain(schema, 40, seed=3)
        return vocab, build_pretrain_corpus(pool, vocab, captions_per_object=3, seed=5)

    def test_beats_unigram_baseline_perplexity(self, corpus):
        vocab, pairs = corpus
        cfg = PretrainConfig(embed_dim=12, hidden_dim=24, learning_rate=0.1, epochs=12, patience=12)
        params, _, report = pretrain(pairs, vocab, cfg, seed=1)
        counts = np.zeros(len(vocab))
        for _, ids in pairs:
            for tok in ids:
                counts[tok] += 1
        unigram = counts / counts.sum()
        held = pairs[:60]
        model_nll = np.mean(
            [-utterance_logprob(params, o.features, ids) / len(ids) for o, ids in held]
        )
        unigram_nll = np.mean(
            [-np.mean([math.log(unigram[t]) for t in ids]) for _, ids in held]
        )
        assert math.exp(model_nll) < math.exp(unigram_nll)

    def test_same_seed_gives_bit_identical_checkpoints(self, corpus):
        vocab, pairs = corpus
        cfg = PretrainConfig(embed_dim=8, hidden_dim=12, learning_rate=0.1, epochs=3, patience=3)
        _, snap_a, _ = pretrain(pairs, vocab, cfg, seed=9)
        _, snap_b, _ = pretrain(pairs, vocab, cfg, seed=9)
        assert snap_a.digest == snap_b.digest

    def test_encoder_frozen_after_pretraining(self, corpus):
        vocab, pairs = corpus
        cfg = PretrainConfig(embed_dim=8, hidden_dim=12, epochs=1, learning_rate=0.05)
        params, snapshot, _ = pretrain(pairs, vocab, cfg, seed=0)
        assert params.frozen == frozenset({"enc_w", "enc_b"})
        assert not snapshot.params.enc_w.flags.writeable

    def test_divergence_raises_training_error(self, corpus):
        vocab, pairs = corpus
        cfg = PretrainConfig(embed_dim=8, hidden_dim=12, learning_rate=1e9, epochs=3)
        with pytest.raises(TrainingError):
            pretrain(pairs, vocab, cfg, seed=0)

    def test_empty_corpus_is_input_error(self, corpus):
        vocab, _ = corpus
        with pytest.raises(InputError):
            pretrain([], vocab, PretrainConfig(), seed=0)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, rng, small_world):
        vocab = small_world["vocab"]
        params = tiny_params(rng, vocab_size=len(vocab))
        params.frozen = frozenset({"enc_w", "enc_b"})
        stem = tmp_path / "ckpt"
        save_checkpoint(params, vocab, stem)
        loaded, loaded_vocab = load_checkpoint(stem)
        assert loaded.digest() == params.digest()
        assert loaded.frozen == params.frozen
        assert tuple(loaded_vocab.words) == tuple(vocab.words)
        for name, arr in params.tensors().items():
            assert np.array_equal(loaded.tensors()[name], arr)

    def test_frozen_snapshot_is_immutable_and_hash_stable(self, rng, small_world):
        params = tiny_params(rng)
        snapshot = FrozenSnapshot.capture(params)
        digest = snapshot.digest
        with pytest.raises(ValueError):
            snapshot.params.emb[0, 0] = 1.0
        live = snapshot.thaw()
        live.emb += 0.5
        assert snapshot.params.digest() == digest

    def test_payload_corruption_detected(self, tmp_path, rng, small_world):
        from refgame.errors import ConfigurationError

        vocab = small_world["vocab"]
        params = tiny_params(rng, vocab_size=len(vocab))
        stem = tmp_path / "ckpt"
        save_checkpoint(params, vocab, stem)
        payload = bytearray(stem.with_suffix(".bin").read_bytes())
        payload[10] ^= 0xFF
        stem.with_suffix(".bin").write_bytes(bytes(payload))
        with pytest.raises(ConfigurationError):
            load_checkpoint(stem)
