"""Per-trial adaptation: compositional augmentation, utterance and contrastive
losses, an incremental-KL regularizer against the frozen snapshot, local
rehearsal over the interaction history, and the combined gradient-ascent
update.

Each gradient step maximizes

    f = lu * mean logP(u'|o)  over the augmentation batch
      + lc * mean logP(o|u')  over the same batch
      - lk * mean_j sum_i KL( P_snapshot(w_i|o_j, w*_<i) || P_live(...) )
      + lr * mean over a rehearsal batch of (logP(u|o) + logP(o|u))

where the KL runs along the snapshot's greedy (MAP) captions for objects
sampled fresh from the domain each step. All stochastic draws come from
counter-based rng keys, so a replay under the same seed consumes identical
streams and reproduces parameter trajectories bit-exactly.

Note on exactness: BLAS results for one row depend on batch shape, so the
regularizer evaluates the live and snapshot models on identically shaped
batches; at live == snapshot the divergence and its gradient are then
exactly zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .captioner import (
    CaptionerParams,
    FrozenSnapshot,
    TeacherCache,
    backward_teacher,
    forward_teacher,
    greedy_decode,
    pad_rows,
    validate_utterance,
    xent_dlogits,
)
from .errors import ConfigurationError, InputError, InternalError
from .numerics import Array
from .world import DomainPool, ObjectSpec, Vocabulary

logger = logging.getLogger(__name__)

GRAMMAR_MODE = "grammar"
FREETEXT_MODE = "freetext"

# rng stream tags, one per stochastic term inside a gradient step
_AUG_STREAM = 1
_REHEARSAL_STREAM = 2
_KL_STREAM = 3


@dataclass
class AdaptationConfig:
    """Hyper-parameters of the per-trial update; defaults are the reference
    settings (learning rate 0.0005, 6 steps, batch 8, 50-object regularizer
    sample, loss weights 1.0/0.1/0.5/0.3)."""

    learning_rate: float = 0.0005
    steps_per_trial: int = 6
    augment_batch: int = 8
    reg_pool_sample: int = 50
    lambda_utterance: float = 1.0
    lambda_contrastive: float = 0.1
    lambda_kl: float = 0.5
    lambda_rehearsal: float = 0.3
    max_decode_len: int = 12
    listener_prior: str = "uniform"
    augment_enabled: bool = True
    augment_mode: str = GRAMMAR_MODE
    augment_listener: bool = True
    augment_sample_pool: str = "all"
    rehearsal_utterance_only: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_utterance", "lambda_contrastive", "lambda_kl", "lambda_rehearsal"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.steps_per_trial < 1:
            raise ConfigurationError("steps_per_trial must be at least 1")
        if self.augment_batch < 1:
            raise ConfigurationError("augment_batch must be at least 1")
        if self.listener_prior != "uniform":
            raise ConfigurationError("only the uniform listener prior is supported")
        if self.augment_mode not in (GRAMMAR_MODE, FREETEXT_MODE):
            raise ConfigurationError(f"unknown augment mode {self.augment_mode!r}")
        if self.augment_sample_pool not in ("all", "subphrases"):
            raise ConfigurationError("augment_sample_pool must be 'all' or 'subphrases'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown adaptation config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "AdaptationConfig":
        data = json.loads(Path(path).read_text())
        if "adaptation" in data:
            data = data["adaptation"]
        return cls.from_dict(data)


@dataclass(frozen=True)
class Observation:
    """One (utterance, intended object) pair observed in a context."""

    utterance: tuple[int, ...]
    target_id: int
    context_ids: tuple[int, ...]
    trial_index: int

    def __post_init__(self) -> None:
        if self.target_id not in self.context_ids:
            raise InputError("observation target must be a member of its context")


@dataclass
class RehearsalBuffer:
    """Append-only history of observations for local rehearsal."""

    items: list[Observation] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def append(self, obs: Observation) -> None:
        self.items.append(obs)

    def sample(self, k: int, rng: np.random.Generator) -> list[Observation]:
        if not self.items:
            return []
        idx = rng.integers(0, len(self.items), size=k)
        return [self.items[int(i)] for i in idx]


@dataclass(frozen=True)
class Lexicon:
    """Word classes for the rule-based chunker."""

    determiners: frozenset[str]
    adjectives: frozenset[str]
    nouns: frozenset[str]
    connectives: frozenset[str] = frozenset({"with"})

    @classmethod
    def from_schema(cls, schema) -> "Lexicon":
        return cls(
            determiners=frozenset({"the", "a"}),
            adjectives=frozenset(schema.sizes) | frozenset(schema.colors) | frozenset(schema.patterns),
            nouns=frozenset(schema.shapes),
        )


def _parse_core(words: Sequence[str], start: int, lex: Lexicon) -> int | None:
    """Parse det? adj* noun from `start`; returns the index just past the
    noun, or None."""
    j = start
    if j < len(words) and words[j] in lex.determiners:
        j += 1
    while j < len(words) and words[j] in lex.adjectives:
        j += 1
    if j < len(words) and words[j] in lex.nouns:
        return j + 1
    return None


def freetext_chunks(words: Sequence[str], lex: Lexicon) -> list[tuple[str, ...]]:
    """Maximal spans matching det? adj* noun (with det? adj* noun)?, plus the
    inner noun phrases of compound spans. Unclassified words break spans."""
    chunks: list[tuple[str, ...]] = []
    i = 0
    n = len(words)
    while i < n:
        end = _parse_core(words, i, lex)
        if end is None:
            i += 1
            continue
        span_end = end
        inner: list[tuple[int, int]] = []
        if end < n and words[end] in lex.connectives:
            end2 = _parse_core(words, end + 1, lex)
            if end2 is not None:
                span_end = end2
                inner = [(i, end), (end + 1, end2)]
        chunks.append(tuple(words[i:span_end]))
        for a, b in inner:
            chunks.append(tuple(words[a:b]))
        i = span_end
    return chunks


def grammar_chunks(words: Sequence[str]) -> list[tuple[str, ...]]:
    """All suffix chunks of a template caption, dropping the leading word one
    at a time down to the bare head noun."""
    return [tuple(words[s:]) for s in range(len(words))]


def is_noun_phrase(words: Sequence[str], lex: Lexicon) -> bool:
    """True when the whole word sequence is det? adj* noun (with det? adj*
    noun)?."""
    if not words:
        return False
    end = _parse_core(words, 0, lex)
    if end is None:
        return False
    if end == len(words):
        return True
    if words[end] in lex.connectives:
        end2 = _parse_core(words, end + 1, lex)
        return end2 == len(words)
    return False


def augment(words: Sequence[str], mode: str, lex: Lexicon) -> list[tuple[str, ...]]:
    """The utterance plus its extracted sub-phrases (deduplicated, full
    utterance first)."""
    words = tuple(words)
    if not words:
        raise InputError("cannot augment an empty utterance")
    if mode == GRAMMAR_MODE:
        raw = grammar_chunks(words)
    elif mode == FREETEXT_MODE:
        raw = freetext_chunks(words, lex)
    else:
        raise ConfigurationError(f"unknown augment mode {mode!r}")
    out: list[tuple[str, ...]] = [words]
    seen = {words}
    for chunk in raw:
        if chunk and chunk not in seen:
            seen.add(chunk)
            out.append(chunk)
    return out


@dataclass(frozen=True)
class MapEntry:
    """Greedy caption under the frozen snapshot plus its per-position
    next-token distributions; fixed for the whole game."""

    caption: tuple[int, ...]
    probs: Array  # (len(caption), vocab)


def build_map_cache(
    snapshot: FrozenSnapshot, pool: DomainPool, max_len: int
) -> dict[int, MapEntry]:
    """Computed once per game from the snapshot; never changes thereafter."""
    cache: dict[int, MapEntry] = {}
    for obj in pool.objects:
        caption = greedy_decode(snapshot.params, obj.features, max_len)
        targets, mask = pad_rows([caption])
        fwd = forward_teacher(snapshot.params, obj.features[None, :], targets, mask)
        probs = fwd.probs[0].copy()
        probs.flags.writeable = False
        cache[obj.object_id] = MapEntry(caption=caption, probs=probs)
    return cache


class RowBatch:
    """Deduplicated teacher-forced rows sharing one forward/backward pass.

    Callers add (object, token-sequence) chains, run `forward`, then register
    per-row cross-entropy weights or KL reference terms, and finally collect
    the combined gradient from `backward`.
    """

    def __init__(self, params: CaptionerParams):
        self.params = params
        self._index: dict[tuple, int] = {}
        self._feats: list[Array] = []
        self._rows: list[tuple[int, ...]] = []
        self.cache: TeacherCache | None = None

    def add(self, obj: ObjectSpec, tokens: tuple[int, ...]) -> int:
        key = (obj.object_id, tokens)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._rows)
            self._index[key] = idx
            self._feats.append(obj.features)
            self._rows.append(tokens)
        return idx

    def __len__(self) -> int:
        return len(self._rows)

    def forward(self) -> None:
        targets, mask = pad_rows(self._rows)
        self.cache = forward_teacher(self.params, np.stack(self._feats), targets, mask)
        self.logps = self.cache.row_logprobs
        self._xent_w = np.zeros(len(self._rows))
        self._kl: list[tuple[int, Array, float]] = []

    def row_length(self, idx: int) -> int:
        return len(self._rows[idx])

    def row_probs(self, idx: int) -> Array:
        return self.cache.probs[idx, : self.row_length(idx)]

    def add_xent(self, idx: int, weight: float) -> None:
        self._xent_w[idx] += weight

    def add_kl(self, idx: int, ref: Array, weight: float) -> None:
        if ref.shape[0] != self.row_length(idx):
            raise InternalError("KL reference length mismatch")
        self._kl.append((idx, ref, weight))

    def backward(self) -> dict[str, Array]:
        dlogits = xent_dlogits(self.cache, self._xent_w)
        for idx, ref, weight in self._kl:
            p = self.cache.probs[idx, : ref.shape[0]]
            dlogits[idx, : ref.shape[0]] += weight * (p - ref)
        return backward_teacher(self.params, self.cache, dlogits)


def kl_rows_value(ref: Array, live: Array) -> float:
    """Sum over positions of KL(ref || live); exact zero when bitwise equal."""
    val = 0.0
    for pos in range(ref.shape[0]):
        val += numerics.kl_categorical(ref[pos], live[pos])
    return val


def _negate(grads: dict[str, Array]) -> dict[str, Array]:
    return {name: -grad for name, grad in grads.items()}


def utterance_loss(
    params: CaptionerParams, utterance: Sequence[int], obj: ObjectSpec
) -> tuple[float, dict[str, Array]]:
    """Negative utterance log-likelihood and exact gradients."""
    ids = validate_utterance(utterance, params.vocab_size)
    batch = RowBatch(params)
    idx = batch.add(obj, ids)
    batch.forward()
    batch.add_xent(idx, -1.0)
    return -float(batch.logps[idx]), batch.backward()


def contrastive_loss(
    params: CaptionerParams,
    utterance: Sequence[int],
    target: ObjectSpec,
    context: Sequence[ObjectSpec],
) -> tuple[float, dict[str, Array]]:
    """Negative log posterior of the target given the utterance, against a
    uniform prior over the context."""
    ids = validate_utterance(utterance, params.vocab_size)
    if target.object_id not in {o.object_id for o in context}:
        raise InputError("target must be a member of the context")
    batch = RowBatch(params)
    idxs = [batch.add(obj, ids) for obj in context]
    batch.forward()
    logps = batch.logps[idxs]
    shifted = logps - logps.max()
    post = np.exp(shifted) / np.exp(shifted).sum()
    lse = float(logps.max() + np.log(np.exp(shifted).sum()))
    target_pos = next(i for i, o in enumerate(context) if o.object_id == target.object_id)
    value = -(float(logps[target_pos]) - lse)
    for i, idx in enumerate(idxs):
        batch.add_xent(idx, float(post[i] - (1.0 if i == target_pos else 0.0)))
    return value, batch.backward()


def sample_regularizer_objects(pool: DomainPool, k: int, rng: np.random.Generator) -> list[ObjectSpec]:
    """Fresh sample of min(k, |pool|) objects without replacement."""
    k = min(k, len(pool))
    idx = rng.permutation(len(pool))[:k]
    return [pool.objects[int(i)] for i in idx]


def kl_regularizer(
    params: CaptionerParams,
    snapshot: FrozenSnapshot,
    map_cache: dict[int, MapEntry],
    objects: Sequence[ObjectSpec],
) -> tuple[float, dict[str, Array]]:
    """Mean over objects of the positionwise KL between the snapshot's and the
    live model's next-token distributions along the snapshot's MAP captions.

    Both models run on identically shaped batches so the result (and its
    gradient) is exactly zero when the live parameters equal the snapshot.
    """
    if not objects:
        return 0.0, params.zero_grads()
    live = RowBatch(params)
    ref = RowBatch(snapshot.params)
    idxs = []
    for obj in objects:
        entry = map_cache.get(obj.object_id)
        if entry is None:
            raise InternalError(f"MAP cache is missing object {obj.object_id}")
        idxs.append((live.add(obj, entry.caption), ref.add(obj, entry.caption)))
    live.forward()
    ref.forward()
    scale = 1.0 / len(idxs)
    value = 0.0
    for live_idx, ref_idx in idxs:
        ref_probs = ref.row_probs(ref_idx)
        value += kl_rows_value(ref_probs, live.row_probs(live_idx))
        live.add_kl(live_idx, ref_probs, scale)
    return value * scale, live.backward()


def init_buffer(
    params: CaptionerParams,
    context: Sequence[ObjectSpec],
    max_len: int,
    seed: int = 0,
) -> RehearsalBuffer:
    """Seed the history with one self-generated greedy caption per context
    object, tagged trial 0."""
    context_ids = tuple(o.object_id for o in context)
    buffer = RehearsalBuffer(seed=seed)
    for obj in context:
        caption = greedy_decode(params, obj.features, max_len)
        buffer.append(
            Observation(
                utterance=caption,
                target_id=obj.object_id,
                context_ids=context_ids,
                trial_index=0,
            )
        )
    return buffer


def _augmented_utterances(
    observation: Observation,
    vocab: Vocabulary,
    lexicon: Lexicon,
    mode: str | None,
) -> list[tuple[int, ...]]:
    if mode is None:
        return [observation.utterance]
    words = vocab.decode(observation.utterance)
    if not words:
        return [observation.utterance]
    phrases = augment(words, mode, lexicon)
    out = [observation.utterance]
    seen = {observation.utterance}
    for phrase in phrases:
        ids = vocab.to_utterance(phrase)
        if ids not in seen:
            seen.add(ids)
            out.append(ids)
    return out


def _group_rows(
    batch: RowBatch,
    utterance: tuple[int, ...],
    target: ObjectSpec,
    context: Sequence[ObjectSpec],
    with_contrastive: bool,
) -> tuple[int, list[int], int]:
    target_idx = batch.add(target, utterance)
    ctx_idxs = [batch.add(obj, utterance) for obj in context] if with_contrastive else []
    target_pos = next(
        i for i, o in enumerate(context) if o.object_id == target.object_id
    )
    return target_idx, ctx_idxs, target_pos


def _posterior(logps: Array) -> tuple[Array, float]:
    # -inf rows (zero-probability chains) propagate NaN here by design; the
    # caller's finiteness guard then rolls the step back
    with np.errstate(invalid="ignore"):
        shifted = logps - logps.max()
        ex = np.exp(shifted)
        post = ex / ex.sum()
        lse = float(logps.max() + np.log(ex.sum()))
    return post, lse


def update_step(
    params: CaptionerParams,
    observation: Observation,
    context: Sequence[ObjectSpec],
    buffer: RehearsalBuffer,
    config: AdaptationConfig,
    snapshot: FrozenSnapshot,
    map_cache: dict[int, MapEntry],
    pool: DomainPool,
    vocab: Vocabulary,
    rng_key: Sequence[int],
    augment_mode: str | None = None,
) -> CaptionerParams:
    """Run the per-trial update (config.steps_per_trial ascent steps), then
    append the observation and its sub-phrases to the rehearsal buffer.

    `rng_key` is a tuple of ints namespacing all stochastic draws; every term
    consumes its own counter-derived stream, so identical keys reproduce the
    update bit-exactly and ablated variants share the surviving streams.

    A non-finite objective aborts that step (parameters restored to the step
    start) and is logged; remaining steps still run on fresh samples.
    """
    tensors = params.tensors()
    if any(not arr.flags.writeable for arr in tensors.values()):
        raise ConfigurationError("cannot adapt frozen (read-only) parameters")
    by_id = {o.object_id: o for o in context}
    if observation.target_id not in by_id:
        raise InputError("observation target not in the supplied context")
    target = by_id[observation.target_id]
    lexicon = Lexicon.from_schema(pool.schema)

    if augment_mode is None and config.augment_enabled:
        augment_mode = config.augment_mode
    if not config.augment_enabled:
        augment_mode = None
    augmented = _augmented_utterances(observation, vocab, lexicon, augment_mode)

    key = tuple(int(x) for x in rng_key)
    lam_u, lam_c = config.lambda_utterance, config.lambda_contrastive
    lam_k, lam_r = config.lambda_kl, config.lambda_rehearsal

    for step in range(config.steps_per_trial):
        backup = {name: arr.copy() for name, arr in tensors.items()}

        # the observed utterance anchors slot 0 of every step's batch; the
        # remaining slots sample from the augmentation set ("all") or from
        # the proper sub-phrases only ("subphrases")
        aug_rng = np.random.default_rng(key + (step, _AUG_STREAM))
        batch_utts = [augmented[0]]
        if config.augment_sample_pool == "subphrases" and len(augmented) > 1:
            sub_pool = augmented[1:]
        else:
            sub_pool = augmented
        if config.augment_batch > 1:
            picks = aug_rng.integers(0, len(sub_pool), size=config.augment_batch - 1)
            batch_utts.extend(sub_pool[int(i)] for i in picks)

        rehearsal: list[Observation] = []
        if lam_r > 0 and len(buffer):
            reh_rng = np.random.default_rng(key + (step, _REHEARSAL_STREAM))
            rehearsal = buffer.sample(config.augment_batch, reh_rng)

        main = RowBatch(params)
        with_contrastive = lam_c > 0
        groups = [
            _group_rows(main, utt, target, context, with_contrastive) for utt in batch_utts
        ]
        reh_groups = []
        for obs in rehearsal:
            obs_ctx = [pool.by_id(i) for i in obs.context_ids]
            reh_groups.append(
                (
                    obs,
                    _group_rows(
                        main,
                        obs.utterance,
                        pool.by_id(obs.target_id),
                        obs_ctx,
                        with_contrastive and not config.rehearsal_utterance_only,
                    ),
                )
            )
        main.forward()

        value = 0.0
        n_main = len(batch_utts)
        for target_idx, ctx_idxs, target_pos in groups:
            value += lam_u / n_main * float(main.logps[target_idx])
            main.add_xent(target_idx, lam_u / n_main)
            if ctx_idxs:
                post, lse = _posterior(main.logps[ctx_idxs])
                value += lam_c / n_main * (float(main.logps[target_idx]) - lse)
                for i, idx in enumerate(ctx_idxs):
                    delta = 1.0 if i == target_pos else 0.0
                    main.add_xent(idx, lam_c / n_main * (delta - float(post[i])))

        if reh_groups:
            n_reh = len(reh_groups)
            for obs, (target_idx, ctx_idxs, target_pos) in reh_groups:
                value += lam_r / n_reh * float(main.logps[target_idx])
                main.add_xent(target_idx, lam_r / n_reh)
                if ctx_idxs:
                    post, lse = _posterior(main.logps[ctx_idxs])
                    value += lam_r / n_reh * (float(main.logps[target_idx]) - lse)
                    for i, idx in enumerate(ctx_idxs):
                        delta = 1.0 if i == target_pos else 0.0
                        main.add_xent(idx, lam_r / n_reh * (delta - float(post[i])))

        grads = main.backward()

        if lam_k > 0:
            kl_rng = np.random.default_rng(key + (step, _KL_STREAM))
            sample = sample_regularizer_objects(pool, config.reg_pool_sample, kl_rng)
            kl_value, kl_grads = kl_regularizer(params, snapshot, map_cache, sample)
            value -= lam_k * kl_value
            numerics.accumulate(grads, kl_grads, scale=-lam_k)

        if not np.isfinite(value):
            for name, arr in tensors.items():
                arr[...] = backup[name]
            logger.warning(
                "non-finite adaptation objective at step %d of trial %d; step skipped",
                step,
                observation.trial_index,
            )
            continue

        numerics.ascent_step(tensors, grads, config.learning_rate, params.frozen)

    buffer.append(observation)
    for ids in augmented[1:]:
        buffer.append(
            Observation(
                utterance=ids,
                target_id=observation.target_id,
                context_ids=observation.context_ids,
                trial_index=observation.trial_index,
            )
        )
    return params
