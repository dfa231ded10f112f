"""Shared fixtures.

The benchmark checkpoints (shallow listener-regime, converged speaker-regime)
are deterministic but take seconds to minutes to train, so they are cached on
disk under tests/_cache keyed by their settings; reruns load instantly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from refgame import benchmarks
from refgame.adaptation import build_map_cache
from refgame.captioner import FrozenSnapshot, load_checkpoint, save_checkpoint
from refgame.game import WorldBundle
from refgame.world import AttributeSchema, Vocabulary, generate_domain

CACHE_DIR = Path(__file__).parent / "_cache"


def _profile_key(profile: benchmarks.BenchmarkProfile) -> str:
    payload = {
        "schema": profile.schema.to_dict(),
        "captions_per_object": profile.captions_per_object,
        "pretrain": profile.pretrain.to_dict(),
        "corpus_seed": profile.corpus_seed,
        "pretrain_seed": profile.pretrain_seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _load_or_build(profile: benchmarks.BenchmarkProfile):
    CACHE_DIR.mkdir(exist_ok=True)
    stem = CACHE_DIR / f"{profile.name}-{_profile_key(profile)}"
    bundle = WorldBundle.build(schema=profile.schema)
    if stem.with_suffix(".json").exists():
        params, vocab = load_checkpoint(stem)
        assert tuple(vocab.words) == tuple(bundle.vocab.words)
        snapshot = FrozenSnapshot.capture(params)
    else:
        _, snapshot, _ = profile.build()
        save_checkpoint(snapshot.params, bundle.vocab, stem)
    return bundle, snapshot


@pytest.fixture(scope="session")
def listener_artifacts():
    profile = benchmarks.listener_benchmark()
    bundle, snapshot = _load_or_build(profile)
    map_cache = build_map_cache(snapshot, bundle.pool, profile.adaptation.max_decode_len)
    return {
        "profile": profile,
        "bundle": bundle,
        "snapshot": snapshot,
        "map_cache": map_cache,
    }


@pytest.fixture(scope="session")
def speaker_artifacts():
    profile = benchmarks.speaker_benchmark()
    bundle, snapshot = _load_or_build(profile)
    map_cache = build_map_cache(snapshot, bundle.pool, profile.adaptation.max_decode_len)
    return {
        "profile": profile,
        "bundle": bundle,
        "snapshot": snapshot,
        "map_cache": map_cache,
    }


@pytest.fixture(scope="session")
def small_world():
    """A tiny pool with the default schema for unit tests."""
    schema = AttributeSchema()
    vocab = Vocabulary.from_schema(schema)
    pool = generate_domain(schema, 60, seed=99)
    return {"schema": schema, "vocab": vocab, "pool": pool}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
