"""Named benchmark profiles: the world, corpus, and pretraining settings each
evaluation regime runs on.

The listener regime wants a shallowly pretrained model whose attribute
discrimination starts soft (challenging contexts begin near chance and
adaptation has headroom); the speaker regime wants a converged, saturated
model that captions cleanly but verbosely, so augmentation-driven shortening
is measurable. Both stay at desk scale; the listener profile uses the stock
model dimensions, the speaker profile a wider recurrent state (the shortening
dynamics need the extra gradient mass per step at the fixed adaptation
learning rate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .adaptation import AdaptationConfig
from .captioner import FrozenSnapshot, PretrainConfig, pretrain
from .game import WorldBundle
from .world import AttributeSchema, build_pretrain_corpus

SPEAKER_SCHEMA = AttributeSchema(
    mention_probs={"det": 0.75, "size": 0.15, "color": 1.0, "pattern": 0.15}
)


@dataclass
class BenchmarkProfile:
    """Everything needed to reproduce one evaluation regime."""

    name: str
    schema: AttributeSchema
    captions_per_object: int
    pretrain: PretrainConfig
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    corpus_seed: int = 42
    pretrain_seed: int = 7

    def build(self) -> tuple[WorldBundle, FrozenSnapshot, dict]:
        bundle = WorldBundle.build(schema=self.schema)
        corpus = build_pretrain_corpus(
            bundle.pool, bundle.vocab, self.captions_per_object, self.corpus_seed
        )
        _, snapshot, report = pretrain(corpus, bundle.vocab, self.pretrain, self.pretrain_seed)
        return bundle, snapshot, report


def listener_benchmark() -> BenchmarkProfile:
    """Adaptive-listener regime: shallow pretraining over the default world."""
    return BenchmarkProfile(
        name="listener",
        schema=AttributeSchema(),
        captions_per_object=3,
        pretrain=PretrainConfig(
            learning_rate=0.02, epochs=1, patience=99, init_scale=0.6
        ),
    )


def speaker_benchmark() -> BenchmarkProfile:
    """Adaptive-speaker regime: converged, saturated model; augmentation
    batches sample proper sub-phrases."""
    return BenchmarkProfile(
        name="speaker",
        schema=SPEAKER_SCHEMA,
        captions_per_object=20,
        pretrain=PretrainConfig(
            embed_dim=48,
            hidden_dim=128,
            learning_rate=0.02,
            epochs=12,
            patience=99,
            init_scale=1.6,
        ),
        adaptation=AdaptationConfig(augment_sample_pool="subphrases"),
    )


PROFILES = {
    "listener": listener_benchmark,
    "speaker": speaker_benchmark,
}
