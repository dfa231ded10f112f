"""Speaker and listener policies around the caption model, plus scripted
partners used for self-play runs.

The listener scores each context object by the utterance's log-likelihood and
takes the softmax posterior (uniform prior); the speaker beam-decodes and can
optionally re-rank the top candidates with an explicit length penalty. The
scripted speaker realizes the full template caption on the first repetition
and drops one leading modifier per repetition, never reducing past the
shortest suffix that still uniquely identifies the target; the scripted
listener applies literal semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import (
    AdaptationConfig,
    MapEntry,
    Observation,
    RehearsalBuffer,
    update_step,
)
from .captioner import CaptionerParams, FrozenSnapshot, beam_decode, content_length, utterance_logprob
from .errors import InputError
from .numerics import Array
from .world import DomainPool, ObjectSpec, Vocabulary

SLOT_ORDER = ("size", "color", "pattern", "shape")


@dataclass
class DecodeConfig:
    width: int = 50
    max_len: int = 12

    def __post_init__(self) -> None:
        if self.width < 1:
            raise InputError("beam width must be at least 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RerankConfig:
    """Re-rank the top_k beam candidates by normalized score minus
    length_penalty * content length; 0 disables re-ranking."""

    top_k: int = 25
    length_penalty: float = 0.0

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise InputError("top_k must be at least 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ListenerPolicy:
    params: CaptionerParams
    prior: str = "uniform"


@dataclass
class SpeakerPolicy:
    params: CaptionerParams
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)

    def __post_init__(self) -> None:
        if self.rerank.top_k > self.decode.width:
            raise InputError("rerank top_k cannot exceed beam width")


def listener_choose(
    policy: ListenerPolicy, utterance: Sequence[int], context: Sequence[ObjectSpec]
) -> tuple[int, Array]:
    """Posterior over the context (softmax of per-object log-likelihoods) and
    the argmax choice; ties break to the lowest index."""
    logps = np.array(
        [utterance_logprob(policy.params, obj.features, utterance) for obj in context]
    )
    shifted = logps - logps.max()
    ex = np.exp(shifted)
    posterior = ex / ex.sum()
    choice = int(np.argmax(posterior))
    return context[choice].object_id, posterior


def speaker_produce(
    policy: SpeakerPolicy, target: ObjectSpec, context: Sequence[ObjectSpec]
) -> tuple[int, ...]:
    """Top beam candidate; with a positive length penalty, the top_k list is
    re-ranked by U = normalizedScore - penalty * content length."""
    if target.object_id not in {o.object_id for o in context}:
        raise InputError("target must be a member of the context")
    ranked = beam_decode(policy.params, target.features, policy.decode.width, policy.decode.max_len)
    if policy.rerank.length_penalty <= 0.0:
        return ranked[0][0]
    pool = ranked[: policy.rerank.top_k]
    utilities = [
        score - policy.rerank.length_penalty * content_length(tokens)
        for tokens, score in pool
    ]
    best = int(np.argmax(np.array(utilities)))
    return pool[best][0]


def speaker_feedback(
    params: CaptionerParams,
    utterance: tuple[int, ...],
    target: ObjectSpec,
    context: Sequence[ObjectSpec],
    listener_correct: bool,
    buffer: RehearsalBuffer,
    config: AdaptationConfig,
    snapshot: FrozenSnapshot,
    map_cache: dict[int, MapEntry],
    pool: DomainPool,
    vocab: Vocabulary,
    trial_index: int,
    rng_key: Sequence[int],
    augment_mode: str | None = None,
) -> bool:
    """Success-gated speaker update: adapt only after a correct selection.

    Returns whether an update was applied.
    """
    if not listener_correct:
        return False
    obs = Observation(
        utterance=utterance,
        target_id=target.object_id,
        context_ids=tuple(o.object_id for o in context),
        trial_index=trial_index,
    )
    update_step(
        params,
        obs,
        context,
        buffer,
        config,
        snapshot,
        map_cache,
        pool,
        vocab,
        rng_key,
        augment_mode=augment_mode,
    )
    return True


@dataclass
class ScriptedPartner:
    """Deterministic stand-in for a human partner.

    Speaking: the full template caption on repetition 1, one leading modifier
    dropped per repetition, stopping at the minimal phrase that still
    uniquely identifies the target in context. Listening: literal semantics
    (the unique object consistent with all attribute words; with zero or
    several consistent objects, a seeded uniform choice among the candidates).
    """

    vocab: Vocabulary
    seed: int = 0

    def full_caption(self, target: ObjectSpec) -> tuple[str, ...]:
        return ("the", target.size, target.color, target.pattern, target.shape)

    def _attribute_words(self, words: Sequence[str]) -> set[str]:
        return {w for w in words if w not in ("the", "a", "with")}

    def _consistent(self, words: Sequence[str], context: Sequence[ObjectSpec]) -> list[ObjectSpec]:
        attrs = self._attribute_words(words)
        return [o for o in context if attrs <= o.attribute_words()]

    def reduction_chain(
        self, target: ObjectSpec, context: Sequence[ObjectSpec]
    ) -> list[tuple[str, ...]]:
        """Suffixes of the full caption that still uniquely identify the
        target, longest first."""
        full = self.full_caption(target)
        chain = []
        for start in range(len(full)):
            words = full[start:]
            if [o.object_id for o in self._consistent(words, context)] == [target.object_id]:
                chain.append(words)
        if not chain:
            raise InputError("context contains an object identical to the target")
        return chain

    def speak(
        self, target: ObjectSpec, context: Sequence[ObjectSpec], repetition: int
    ) -> tuple[int, ...]:
        if not 1 <= repetition:
            raise InputError("repetition starts at 1")
        chain = self.reduction_chain(target, context)
        words = chain[min(repetition - 1, len(chain) - 1)]
        return self.vocab.to_utterance(words)

    def listen(
        self, utterance: Sequence[int], context: Sequence[ObjectSpec], rng: np.random.Generator
    ) -> int:
        words = self.vocab.decode(utterance)
        consistent = self._consistent(words, context)
        if len(consistent) == 1:
            return consistent[0].object_id
        candidates = consistent if consistent else list(context)
        return candidates[int(rng.integers(len(candidates)))].object_id
