"""Trial scheduling, the per-trial state machine for every role
configuration, transcript logging, per-trial parameter snapshots, and offline
replay for ablation studies.

Determinism contract: every stochastic draw inside a game comes from a
counter-based stream derived from (game seed, trial index, stream tag), so a
replay under the recorded config consumes identical streams and reproduces
posteriors bit-exactly. Offline transcripts record `wall_times` as null so
identical seeds yield byte-identical files; the live service fills real
timings instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adaptation import (
    AdaptationConfig,
    MapEntry,
    Observation,
    RehearsalBuffer,
    build_map_cache,
    init_buffer,
    update_step,
)
from .agents import (
    DecodeConfig,
    ListenerPolicy,
    RerankConfig,
    ScriptedPartner,
    SpeakerPolicy,
    listener_choose,
    speaker_produce,
)
from .captioner import CaptionerParams, FrozenSnapshot, validate_utterance
from .errors import ConfigurationError, InputError, ProtocolError
from .world import (
    AttributeSchema,
    Context,
    DomainPool,
    ObjectSpec,
    Vocabulary,
    build_challenging_context,
    build_simple_context,
    default_cluster_count,
    generate_domain,
    kmeans_partition,
)

ROLE_AGENT_LISTENER = "agent_listener"
ROLE_AGENT_SPEAKER = "agent_speaker"
ROLES = (ROLE_AGENT_LISTENER, ROLE_AGENT_SPEAKER)

TRANSCRIPT_FORMAT = "refgame-transcript"
TRANSCRIPT_VERSION = 1

# per-trial stream tags (tag 1 is the adaptation key consumed by update_step)
_UPDATE_STREAM = 1
_DISPLAY_STREAM = 2
_PARTNER_STREAM = 3

SpeakerMove = "tuple[int, ...] | Callable[..., tuple[int, ...]] | None"
ListenerMove = "int | Callable[..., int] | None"


@dataclass(frozen=True)
class TrialSchedule:
    """Block-structured target order: every context object appears exactly
    once per block and no target repeats back to back."""

    target_ids: tuple[int, ...]
    blocks: int
    targets_per_block: int

    def __post_init__(self) -> None:
        if len(self.target_ids) != self.blocks * self.targets_per_block:
            raise InputError("schedule length must equal blocks * targets_per_block")
        members = sorted(set(self.target_ids))
        for b in range(self.blocks):
            block = self.target_ids[b * self.targets_per_block : (b + 1) * self.targets_per_block]
            if sorted(block) != members:
                raise InputError("each target must appear exactly once per block")
        for i in range(len(self.target_ids) - 1):
            if self.target_ids[i] == self.target_ids[i + 1]:
                raise InputError("schedule repeats a target back to back")


def make_schedule(context: Context, blocks: int, seed) -> TrialSchedule:
    """Uniform per-block permutations, resampled until the cross-block
    boundary constraint holds."""
    if blocks < 1:
        raise InputError("blocks must be at least 1")
    targets = context.object_ids
    if len(set(targets)) == 1 and blocks > 1:
        raise InputError("cannot avoid immediate repeats with a single target")
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(blocks):
        while True:
            perm = [targets[int(i)] for i in rng.permutation(len(targets))]
            if not order or order[-1] != perm[0]:
                break
        order.extend(perm)
    return TrialSchedule(
        target_ids=tuple(order), blocks=blocks, targets_per_block=len(targets)
    )


RECORD_FIELDS = (
    "game_id",
    "trial_index",
    "repetition_block",
    "context_object_ids",
    "target_id",
    "role_config",
    "utterance_tokens",
    "listener_posterior",
    "choice_id",
    "correct",
    "update_applied",
    "wall_times",
    "seed",
    "display_order",
)


@dataclass(frozen=True)
class TranscriptRecord:
    game_id: str
    trial_index: int
    repetition_block: int
    context_object_ids: tuple[int, ...]
    target_id: int
    role_config: str
    utterance_tokens: tuple[str, ...]
    listener_posterior: tuple[float, ...]
    choice_id: int
    correct: bool
    update_applied: bool
    wall_times: dict | None
    seed: int
    display_order: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.correct != (self.choice_id == self.target_id):
            raise InputError("correct flag must equal (choice == target)")
        if abs(sum(self.listener_posterior) - 1.0) > 1e-6:
            raise InputError("listener posterior must sum to 1")

    def to_dict(self) -> dict:
        out = {}
        for name in RECORD_FIELDS:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = list(value)
            out[name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TranscriptRecord":
        kwargs = dict(data)
        for name in (
            "context_object_ids",
            "utterance_tokens",
            "listener_posterior",
            "display_order",
        ):
            kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass
class GameSession:
    """One adaptive agent playing one partner over a fixed schedule."""

    session_id: str
    role: str
    pool: DomainPool
    vocab: Vocabulary
    context: Context
    context_objects: tuple[ObjectSpec, ...]
    schedule: TrialSchedule
    params: CaptionerParams
    snapshot: FrozenSnapshot
    map_cache: dict[int, MapEntry]
    buffer: RehearsalBuffer
    config: AdaptationConfig
    decode: DecodeConfig
    rerank: RerankConfig
    seed: int
    update_on_error: bool = True
    trial_index: int = 0
    records: list[TranscriptRecord] = field(default_factory=list)
    param_snapshots: list[CaptionerParams] | None = None

    @property
    def finished(self) -> bool:
        return self.trial_index >= len(self.schedule.target_ids)

    @property
    def current_target_id(self) -> int:
        if self.finished:
            raise ProtocolError("game is over")
        return self.schedule.target_ids[self.trial_index]

    @property
    def current_repetition(self) -> int:
        return self.trial_index // self.schedule.targets_per_block + 1

    def display_order(self, trial_index: int) -> tuple[int, ...]:
        rng = np.random.default_rng([self.seed, trial_index, _DISPLAY_STREAM])
        return tuple(int(i) for i in rng.permutation(len(self.context_objects)))


def create_session(
    snapshot: FrozenSnapshot,
    vocab: Vocabulary,
    pool: DomainPool,
    context: Context,
    role: str,
    config: AdaptationConfig,
    seed: int,
    session_id: str,
    decode: DecodeConfig | None = None,
    rerank: RerankConfig | None = None,
    snapshots_enabled: bool = False,
    update_on_error: bool = True,
    map_cache: dict[int, MapEntry] | None = None,
    blocks: int = 6,
) -> GameSession:
    """Fresh session: parameters copied from the snapshot, rehearsal buffer
    seeded with self-captions, MAP cache built over the full pool."""
    if role not in ROLES:
        raise ConfigurationError(f"unknown role config {role!r}")
    params = snapshot.thaw()
    if map_cache is None:
        map_cache = build_map_cache(snapshot, pool, config.max_decode_len)
    context_objects = tuple(pool.by_id(i) for i in context.object_ids)
    buffer = init_buffer(params, context_objects, config.max_decode_len, seed=seed)
    schedule = make_schedule(context, blocks=blocks, seed=[seed, 13])
    return GameSession(
        session_id=session_id,
        role=role,
        pool=pool,
        vocab=vocab,
        context=context,
        context_objects=context_objects,
        schedule=schedule,
        params=params,
        snapshot=snapshot,
        map_cache=map_cache,
        buffer=buffer,
        config=config,
        decode=decode or DecodeConfig(),
        rerank=rerank or RerankConfig(),
        seed=seed,
        update_on_error=update_on_error,
        param_snapshots=[] if snapshots_enabled else None,
    )


def run_trial(
    session: GameSession,
    speaker_move=None,
    listener_move=None,
    wall_times: dict | None = None,
    augment_mode: str | None = None,
    forced_correct: bool | None = None,
) -> TranscriptRecord:
    """Produce -> choose -> feedback -> adapt for the current trial.

    The agent's side is computed from the session; the partner's side comes
    from `speaker_move` (EOS-terminated ids, or a callable
    (target, context, repetition) -> ids) or `listener_move` (object id, or a
    callable (utterance_ids, context) -> object id) depending on role.
    `forced_correct` overrides success feedback for speaker-side analyses.
    """
    if session.finished:
        raise ProtocolError("game is over")
    t = session.trial_index
    target_id = session.current_target_id
    target = session.pool.by_id(target_id)
    repetition = session.current_repetition
    context = session.context_objects

    if session.role == ROLE_AGENT_SPEAKER:
        if speaker_move is not None:
            raise ProtocolError("agent is the speaker; no speaker move expected")
        policy = SpeakerPolicy(session.params, session.decode, session.rerank)
        utterance = speaker_produce(policy, target, context)
    else:
        if speaker_move is None:
            raise ProtocolError("a speaker move is required")
        if callable(speaker_move):
            utterance = speaker_move(target, context, repetition)
        else:
            utterance = speaker_move
        utterance = validate_utterance(utterance, session.params.vocab_size)

    agent_choice_id, posterior = listener_choose(
        ListenerPolicy(session.params), utterance, context
    )

    if session.role == ROLE_AGENT_LISTENER:
        if listener_move is not None:
            raise ProtocolError("agent is the listener; no listener move expected")
        choice_id = agent_choice_id
    else:
        if listener_move is None and forced_correct is None:
            raise ProtocolError("a listener move is required")
        if forced_correct is not None:
            choice_id = target_id if forced_correct else agent_choice_id
        elif callable(listener_move):
            choice_id = int(listener_move(utterance, context))
        else:
            choice_id = int(listener_move)
        if choice_id not in set(session.context.object_ids):
            raise InputError("listener choice must be a context member")

    correct = choice_id == target_id
    rng_key = (session.seed, t, _UPDATE_STREAM)
    update_applied = False
    if session.role == ROLE_AGENT_LISTENER:
        if correct or session.update_on_error:
            obs = Observation(
                utterance=utterance,
                target_id=target_id,
                context_ids=session.context.object_ids,
                trial_index=t,
            )
            update_step(
                session.params,
                obs,
                context,
                session.buffer,
                session.config,
                session.snapshot,
                session.map_cache,
                session.pool,
                session.vocab,
                rng_key,
                augment_mode=augment_mode,
            )
            update_applied = True
    else:
        if correct:
            obs = Observation(
                utterance=utterance,
                target_id=target_id,
                context_ids=session.context.object_ids,
                trial_index=t,
            )
            update_step(
                session.params,
                obs,
                context,
                session.buffer,
                session.config,
                session.snapshot,
                session.map_cache,
                session.pool,
                session.vocab,
                rng_key,
                augment_mode=augment_mode,
            )
            update_applied = True

    record = TranscriptRecord(
        game_id=session.session_id,
        trial_index=t,
        repetition_block=repetition,
        context_object_ids=session.context.object_ids,
        target_id=target_id,
        role_config=session.role,
        utterance_tokens=session.vocab.decode(utterance),
        listener_posterior=tuple(float(p) for p in posterior),
        choice_id=choice_id,
        correct=correct,
        update_applied=update_applied,
        wall_times=wall_times,
        seed=session.seed,
        display_order=session.display_order(t),
    )
    session.records.append(record)
    if session.param_snapshots is not None:
        session.param_snapshots.append(session.params.copy())
    session.trial_index += 1
    return record


DEFAULT_POOL_N = 200
DEFAULT_POOL_SEED = 1000


@dataclass(eq=False)
class WorldBundle:
    """One shared domain: the pool both pretraining and games draw from, plus
    its k-means partition (used for challenging-context construction)."""

    schema: AttributeSchema
    vocab: Vocabulary
    pool: DomainPool
    labels: np.ndarray

    @classmethod
    def build(
        cls,
        schema: AttributeSchema | None = None,
        pool_n: int = DEFAULT_POOL_N,
        pool_seed: int = DEFAULT_POOL_SEED,
    ) -> "WorldBundle":
        schema = schema or AttributeSchema()
        vocab = Vocabulary.from_schema(schema)
        pool = generate_domain(schema, pool_n, pool_seed)
        labels = kmeans_partition(pool, default_cluster_count(pool_n), [pool_seed, 11])
        return cls(schema=schema, vocab=vocab, pool=pool, labels=labels)


def sample_context(bundle: WorldBundle, kind: str, seed) -> Context:
    if kind == "challenging":
        return build_challenging_context(bundle.pool, bundle.labels, seed)
    if kind == "simple":
        return build_simple_context(bundle.pool, seed)
    raise ConfigurationError(f"unknown context kind {kind!r}")


@dataclass
class SelfplayConfig:
    seed: int = 0
    role: str = ROLE_AGENT_LISTENER
    context_kind: str = "challenging"
    blocks: int = 6
    pool_n: int = DEFAULT_POOL_N
    pool_seed: int = DEFAULT_POOL_SEED
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    snapshots_enabled: bool = False
    update_on_error: bool = True
    force_success_feedback: bool = False
    session_id: str | None = None


def selfplay_header(session: GameSession, cfg: SelfplayConfig) -> dict:
    return {
        "format": TRANSCRIPT_FORMAT,
        "version": TRANSCRIPT_VERSION,
        "session_id": session.session_id,
        "seed": cfg.seed,
        "role": cfg.role,
        "context_kind": cfg.context_kind,
        "pool": {"n": cfg.pool_n, "seed": cfg.pool_seed},
        "context_ids": list(session.context.object_ids),
        "schedule": list(session.schedule.target_ids),
        "blocks": cfg.blocks,
        "adaptation": session.config.to_dict(),
        "decode": session.decode.to_dict(),
        "rerank": session.rerank.to_dict(),
        "update_on_error": session.update_on_error,
        "force_success_feedback": cfg.force_success_feedback,
        "snapshot_digest": session.snapshot.digest,
        "schema": session.pool.schema.to_dict(),
        "utterance_augment_mode": None,
    }


def run_selfplay(
    snapshot: FrozenSnapshot,
    bundle: WorldBundle,
    cfg: SelfplayConfig,
    map_cache: dict[int, MapEntry] | None = None,
) -> tuple[dict, list[TranscriptRecord], GameSession]:
    """A full game between the adaptive agent and a scripted partner."""
    if len(bundle.pool) != cfg.pool_n or bundle.pool.seed != cfg.pool_seed:
        raise ConfigurationError("world bundle does not match the selfplay pool spec")
    context = sample_context(bundle, cfg.context_kind, [cfg.seed, 12])
    session_id = cfg.session_id or f"selfplay-{cfg.role}-{cfg.context_kind}-{cfg.seed}"
    session = create_session(
        snapshot,
        bundle.vocab,
        bundle.pool,
        context,
        cfg.role,
        cfg.adaptation,
        cfg.seed,
        session_id,
        decode=cfg.decode,
        rerank=cfg.rerank,
        snapshots_enabled=cfg.snapshots_enabled,
        update_on_error=cfg.update_on_error,
        map_cache=map_cache,
        blocks=cfg.blocks,
    )
    partner = ScriptedPartner(bundle.vocab, seed=cfg.seed)
    while not session.finished:
        t = session.trial_index
        if cfg.role == ROLE_AGENT_LISTENER:
            run_trial(session, speaker_move=lambda tgt, ctx, rep: partner.speak(tgt, ctx, rep))
        else:
            if cfg.force_success_feedback:
                run_trial(session, forced_correct=True)
            else:
                rng = np.random.default_rng([cfg.seed, t, _PARTNER_STREAM])
                run_trial(
                    session,
                    listener_move=lambda utt, ctx: partner.listen(utt, ctx, rng),
                )
    return selfplay_header(session, cfg), session.records, session


def write_transcript(path: str | Path, header: dict, records: Sequence[TranscriptRecord]) -> Path:
    """One JSON record per line below a versioned header line; field order is
    fixed (see RECORD_FIELDS)."""
    path = Path(path)
    lines = [json.dumps(header, separators=(",", ":"))]
    lines.extend(json.dumps(r.to_dict(), separators=(",", ":")) for r in records)
    path.write_text("\n".join(lines) + "\n")
    return path


def append_transcript_record(path: str | Path, record: TranscriptRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record.to_dict(), separators=(",", ":")) + "\n")


def read_transcript(path: str | Path) -> tuple[dict, list[TranscriptRecord]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise InputError(f"empty transcript: {path}")
    header = json.loads(lines[0])
    if header.get("format") != TRANSCRIPT_FORMAT:
        raise InputError("not a refgame transcript")
    records = [TranscriptRecord.from_dict(json.loads(line)) for line in lines[1:] if line]
    return header, records


@dataclass
class ReplayTrial:
    trial_index: int
    repetition_block: int
    target_id: int
    utterance_tokens: tuple[str, ...]
    posterior: tuple[float, ...]
    target_posterior: float
    choice_id: int
    correct: bool
    update_applied: bool


@dataclass
class ReplayResult:
    trials: list[ReplayTrial]
    session: GameSession

    @property
    def mean_target_posterior(self) -> float:
        if not self.trials:
            return float("nan")
        return float(np.mean([t.target_posterior for t in self.trials]))

    @property
    def accuracy(self) -> float:
        if not self.trials:
            return float("nan")
        return float(np.mean([t.correct for t in self.trials]))


def rebuild_world(header: dict) -> tuple[AttributeSchema, Vocabulary, DomainPool, Context]:
    schema = AttributeSchema.from_dict(header["schema"])
    vocab = Vocabulary.from_schema(schema)
    pool = generate_domain(schema, header["pool"]["n"], header["pool"]["seed"])
    context = Context(object_ids=tuple(header["context_ids"]), kind=header["context_kind"])
    return schema, vocab, pool, context


def replay(
    header: dict,
    records: Sequence[TranscriptRecord],
    snapshot: FrozenSnapshot,
    overrides: dict | None = None,
    adapt: bool = True,
    snapshots_enabled: bool = False,
) -> ReplayResult:
    """Re-run adaptation against the recorded partner side under a possibly
    ablated config; the recorded human side (utterances for listener games,
    correctness feedback for speaker games) is never altered.

    With no overrides and `adapt=True` this reproduces the recorded
    posteriors bit-exactly.
    """
    if snapshot.digest != header.get("snapshot_digest"):
        raise InputError("snapshot does not match the transcript's checkpoint digest")
    schema, vocab, pool, context = rebuild_world(header)
    cfg_data = dict(header["adaptation"])
    if overrides:
        unknown = set(overrides) - set(cfg_data)
        if unknown:
            raise InputError(f"unknown adaptation overrides: {sorted(unknown)}")
        cfg_data.update(overrides)
    config = AdaptationConfig.from_dict(cfg_data)
    role = header["role"]
    seed = header["seed"]

    params = snapshot.thaw()
    map_cache = build_map_cache(snapshot, pool, config.max_decode_len)
    context_objects = tuple(pool.by_id(i) for i in context.object_ids)
    buffer = init_buffer(params, context_objects, config.max_decode_len, seed=seed)
    session = GameSession(
        session_id=header["session_id"],
        role=role,
        pool=pool,
        vocab=vocab,
        context=context,
        context_objects=context_objects,
        schedule=TrialSchedule(
            target_ids=tuple(header["schedule"]),
            blocks=header["blocks"],
            targets_per_block=len(context.object_ids),
        ),
        params=params,
        snapshot=snapshot,
        map_cache=map_cache,
        buffer=buffer,
        config=config,
        decode=DecodeConfig(**header["decode"]),
        rerank=RerankConfig(**header["rerank"]),
        seed=seed,
        update_on_error=header.get("update_on_error", True),
        param_snapshots=[] if snapshots_enabled else None,
    )

    augment_mode = header.get("utterance_augment_mode")
    trials: list[ReplayTrial] = []
    for record in records:
        t = record.trial_index
        if t != session.trial_index:
            raise InputError("transcript records are out of order")
        target_id = record.target_id
        target = pool.by_id(target_id)
        if role == ROLE_AGENT_LISTENER:
            utterance = vocab.to_utterance(record.utterance_tokens)
        else:
            policy = SpeakerPolicy(session.params, session.decode, session.rerank)
            utterance = speaker_produce(policy, target, context_objects)
        choice_id, posterior = listener_choose(
            ListenerPolicy(session.params), utterance, context_objects
        )
        if role == ROLE_AGENT_LISTENER:
            correct = choice_id == target_id
        else:
            # the recorded partner's feedback is replayed as-is
            correct = record.correct
            choice_id = record.choice_id
        update_applied = False
        if adapt:
            should_update = (
                (correct or session.update_on_error)
                if role == ROLE_AGENT_LISTENER
                else correct
            )
            if should_update:
                obs = Observation(
                    utterance=utterance,
                    target_id=target_id,
                    context_ids=context.object_ids,
                    trial_index=t,
                )
                update_step(
                    session.params,
                    obs,
                    context_objects,
                    session.buffer,
                    config,
                    snapshot,
                    map_cache,
                    pool,
                    vocab,
                    (seed, t, _UPDATE_STREAM),
                    augment_mode=augment_mode,
                )
                update_applied = True
        target_pos = context.object_ids.index(target_id)
        trials.append(
            ReplayTrial(
                trial_index=t,
                repetition_block=record.repetition_block,
                target_id=target_id,
                utterance_tokens=vocab.decode(utterance),
                posterior=tuple(float(p) for p in posterior),
                target_posterior=float(posterior[target_pos]),
                choice_id=choice_id,
                correct=correct,
                update_applied=update_applied,
            )
        )
        if session.param_snapshots is not None:
            session.param_snapshots.append(session.params.copy())
        session.trial_index += 1
    return ReplayResult(trials=trials, session=session)
