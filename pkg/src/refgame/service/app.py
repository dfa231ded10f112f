"""Live game server.

FastAPI application wrapping the engine: session lifecycle over HTTP, the
game protocol over WebSocket (with an HTTP mirror for thin clients),
per-session sequential adaptation off the event loop, and append-only
transcript persistence with resume-from-disk recovery.

Sessions never share mutable state; the frozen snapshot, domain pool, and MAP
cache are shared read-only. A session's moves are serialized by its own lock,
so adaptation for trial t always completes before trial t+1's state goes out,
while other sessions stay responsive.
"""

from __future__ import annotations

import asyncio
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import ValidationError

from ..adaptation import FREETEXT_MODE, AdaptationConfig, MapEntry, build_map_cache
from ..agents import DecodeConfig, RerankConfig, SpeakerPolicy, speaker_produce
from ..captioner import FrozenSnapshot, load_checkpoint, content_length
from ..errors import InputError, ProtocolError, RefgameError
from ..game import (
    ROLE_AGENT_LISTENER,
    ROLE_AGENT_SPEAKER,
    GameSession,
    SelfplayConfig,
    TranscriptRecord,
    WorldBundle,
    append_transcript_record,
    create_session,
    read_transcript,
    replay,
    run_trial,
    sample_context,
    selfplay_header,
    write_transcript,
)
from ..world import AttributeSchema
from . import protocol as p

HUMAN_TO_AGENT_ROLE = {
    p.HUMAN_SPEAKER: ROLE_AGENT_LISTENER,
    p.HUMAN_LISTENER: ROLE_AGENT_SPEAKER,
}
AGENT_TO_HUMAN_ROLE = {v: k for k, v in HUMAN_TO_AGENT_ROLE.items()}


@dataclass
class ServiceSettings:
    checkpoint: str
    data_dir: str = "refgame-data"
    seed: int = 0
    pool_n: int = 200
    pool_seed: int = 1000
    schema: AttributeSchema = field(default_factory=AttributeSchema)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    blocks: int = 6

    @classmethod
    def from_config_file(cls, checkpoint: str, path: str | Path | None, **overrides) -> "ServiceSettings":
        import json

        data = {}
        if path is not None:
            data = json.loads(Path(path).read_text())
        kwargs = {"checkpoint": checkpoint}
        if "world" in data:
            world = data["world"]
            if "schema" in world:
                kwargs["schema"] = AttributeSchema.from_dict(world["schema"])
            kwargs["pool_n"] = world.get("pool_n", 200)
            kwargs["pool_seed"] = world.get("pool_seed", 1000)
        if "adaptation" in data:
            kwargs["adaptation"] = AdaptationConfig.from_dict(data["adaptation"])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class LiveSession:
    session: GameSession
    human_role: str
    context_kind: str
    transcript_path: Path
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)

    @property
    def awaiting(self) -> str:
        return "utterance" if self.human_role == p.HUMAN_SPEAKER else "selection"


class Engine:
    """Shared read-only model state plus the session registry."""

    def __init__(self, settings: ServiceSettings):
        self.settings = settings
        params, vocab = load_checkpoint(settings.checkpoint)
        self.snapshot = FrozenSnapshot.capture(params)
        self.bundle = WorldBundle.build(
            schema=settings.schema, pool_n=settings.pool_n, pool_seed=settings.pool_seed
        )
        if tuple(vocab.words) != tuple(self.bundle.vocab.words):
            raise InputError("checkpoint vocabulary does not match the configured world")
        self.map_cache: dict[int, MapEntry] = build_map_cache(
            self.snapshot, self.bundle.pool, settings.adaptation.max_decode_len
        )
        self.sessions: dict[str, LiveSession] = {}
        self.registry_lock = asyncio.Lock()
        self.data_dir = Path(settings.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._session_counter = 0

    def _new_session_id(self) -> str:
        self._session_counter += 1
        return f"live-{self._session_counter}-{uuid.uuid4().hex[:8]}"

    def create(self, request: p.CreateSessionRequest) -> LiveSession:
        seed = request.seed if request.seed is not None else self.settings.seed + self._session_counter
        session_id = self._new_session_id()
        context = sample_context(self.bundle, request.context_kind, [seed, 12])
        agent_role = HUMAN_TO_AGENT_ROLE[request.role]
        session = create_session(
            self.snapshot,
            self.bundle.vocab,
            self.bundle.pool,
            context,
            agent_role,
            replace(self.settings.adaptation),
            seed,
            session_id,
            decode=replace(self.settings.decode),
            rerank=replace(self.settings.rerank),
            map_cache=self.map_cache,
            blocks=self.settings.blocks,
        )
        cfg = SelfplayConfig(
            seed=seed,
            role=agent_role,
            context_kind=request.context_kind,
            blocks=self.settings.blocks,
            pool_n=self.settings.pool_n,
            pool_seed=self.settings.pool_seed,
            adaptation=session.config,
            decode=session.decode,
            rerank=session.rerank,
            session_id=session_id,
        )
        header = selfplay_header(session, cfg)
        header["service"] = {"human_role": request.role, "context_kind": request.context_kind}
        if request.role == p.HUMAN_SPEAKER:
            # the agent adapts on live human text, chunked with the free-text
            # grammar; replay must mirror that
            header["utterance_augment_mode"] = FREETEXT_MODE
        path = self.data_dir / f"{session_id}.jsonl"
        write_transcript(path, header, [])
        live = LiveSession(
            session=session,
            human_role=request.role,
            context_kind=request.context_kind,
            transcript_path=path,
        )
        self.sessions[session_id] = live
        return live

    def resume_from_disk(self, session_id: str) -> Optional[LiveSession]:
        """Rebuild a persisted session to its exact trial boundary by
        replaying the recorded trials under the recorded config."""
        path = self.data_dir / f"{session_id}.jsonl"
        if not path.exists():
            return None
        header, records = read_transcript(path)
        result = replay(header, records, self.snapshot)
        service_info = header.get("service", {})
        human_role = service_info.get("human_role") or AGENT_TO_HUMAN_ROLE[header["role"]]
        live = LiveSession(
            session=result.session,
            human_role=human_role,
            context_kind=header.get("context_kind", "challenging"),
            transcript_path=path,
        )
        # carry the recorded rows so summaries and transcripts stay complete
        live.session.records = list(records)
        self.sessions[session_id] = live
        return live

    async def get(self, session_id: str) -> Optional[LiveSession]:
        async with self.registry_lock:
            live = self.sessions.get(session_id)
            if live is None:
                live = self.resume_from_disk(session_id)
            return live


def object_views(live: LiveSession) -> list[p.ObjectView]:
    return [
        p.ObjectView(id=o.object_id, size=o.size, color=o.color, pattern=o.pattern, shape=o.shape)
        for o in live.session.context_objects
    ]


def state_message(live: LiveSession) -> p.StateMessage:
    session = live.session
    target_id = None
    agent_utterance = None
    if live.human_role == p.HUMAN_SPEAKER:
        target_id = session.current_target_id
    else:
        policy = SpeakerPolicy(session.params, session.decode, session.rerank)
        target = session.pool.by_id(session.current_target_id)
        utterance = speaker_produce(policy, target, session.context_objects)
        agent_utterance = list(session.vocab.decode(utterance))
    return p.StateMessage(
        session_id=session.session_id,
        trial_index=session.trial_index,
        total_trials=len(session.schedule.target_ids),
        repetition_block=session.current_repetition,
        role=live.human_role,
        context=object_views(live),
        display_order=list(session.display_order(session.trial_index)),
        awaiting=live.awaiting,
        target_id=target_id,
        agent_utterance=agent_utterance,
    )


def game_over_message(live: LiveSession) -> p.GameOverMessage:
    session = live.session
    records = session.records
    accuracy = sum(r.correct for r in records) / len(records) if records else 0.0
    mean_len = (
        sum(len(r.utterance_tokens) for r in records) / len(records) if records else 0.0
    )
    return p.GameOverMessage(
        session_id=session.session_id,
        trial_index=session.trial_index,
        accuracy=accuracy,
        mean_content_length=mean_len,
        transcript_path=str(live.transcript_path),
    )


def summary(live: LiveSession) -> p.SessionSummary:
    session = live.session
    records = session.records
    return p.SessionSummary(
        session_id=session.session_id,
        role=live.human_role,
        context_kind=live.context_kind,
        seed=session.seed,
        trial_index=session.trial_index,
        total_trials=len(session.schedule.target_ids),
        finished=session.finished,
        accuracy_so_far=(sum(r.correct for r in records) / len(records)) if records else None,
    )


def _run_move(live: LiveSession, msg) -> tuple[TranscriptRecord, tuple[str, ...]]:
    """Execute one trial synchronously (called via a worker thread)."""
    session = live.session
    unknown: tuple[str, ...] = ()
    started = time.perf_counter()
    if isinstance(msg, p.UtteranceMessage):
        if live.human_role != p.HUMAN_SPEAKER:
            raise ProtocolError("this session expects selections, not utterances")
        ids, unknown = session.vocab.tokenize_text(msg.text)
        if len(ids) == 1:
            raise InputError("the utterance is empty")
        record = run_trial(
            session,
            speaker_move=ids,
            wall_times=None,
            augment_mode=FREETEXT_MODE,
        )
    else:
        if live.human_role != p.HUMAN_LISTENER:
            raise ProtocolError("this session expects utterances, not selections")
        record = run_trial(session, listener_move=msg.object_id)
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    record = replace(record, wall_times={"trial_ms": round(elapsed_ms, 3)})
    session.records[-1] = record
    return record, unknown


async def handle_move(live: LiveSession, msg) -> list:
    """Validate, run the trial off the event loop, persist, and build the
    response frames (feedback plus either the next state or gameOver)."""
    session = live.session
    async with live.lock:
        if session.finished:
            return [
                p.ErrorMessage(
                    session_id=session.session_id,
                    trial_index=session.trial_index,
                    code="protocol",
                    message="game is over",
                )
            ]
        try:
            record, unknown = await asyncio.to_thread(_run_move, live, msg)
        except ProtocolError as exc:
            return [
                p.ErrorMessage(
                    session_id=session.session_id,
                    trial_index=session.trial_index,
                    code="protocol",
                    message=str(exc),
                )
            ]
        except (InputError, RefgameError) as exc:
            return [
                p.ErrorMessage(
                    session_id=session.session_id,
                    trial_index=session.trial_index,
                    code="badRequest",
                    message=str(exc),
                )
            ]
        try:
            append_transcript_record(live.transcript_path, record)
        except OSError as exc:
            return [
                p.ErrorMessage(
                    session_id=session.session_id,
                    trial_index=session.trial_index,
                    code="storage",
                    message=f"could not persist the trial: {exc}",
                )
            ]
        feedback = p.FeedbackMessage(
            session_id=session.session_id,
            trial_index=record.trial_index,
            correct=record.correct,
            choice_id=record.choice_id,
            target_id=record.target_id,
            listener_posterior=list(record.listener_posterior),
            utterance_tokens=list(record.utterance_tokens),
            unknown_words=list(unknown),
            update_applied=record.update_applied,
            wall_ms=record.wall_times["trial_ms"] if record.wall_times else None,
        )
        if session.finished:
            return [feedback, game_over_message(live)]
        return [feedback, state_message(live)]


def parse_client_message(data: dict):
    kind = data.get("type")
    if kind == "join":
        return p.JoinMessage(**data)
    if kind == "utterance":
        return p.UtteranceMessage(**data)
    if kind == "selection":
        return p.SelectionMessage(**data)
    raise ValidationError.from_exception_data("ClientMessage", [])


def create_app(settings: ServiceSettings) -> FastAPI:
    app = FastAPI(title="refgame service")
    engine = Engine(settings)
    app.state.engine = engine

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "sessions": len(engine.sessions)}

    @app.post("/sessions", response_model=p.SessionCreated)
    async def create_session_endpoint(request: p.CreateSessionRequest):
        async with engine.registry_lock:
            live = engine.create(request)
        return p.SessionCreated(session_id=live.session.session_id, state=state_message(live))

    @app.get("/sessions", response_model=list[p.SessionSummary])
    async def list_sessions():
        return [summary(live) for live in engine.sessions.values()]

    @app.get("/sessions/{session_id}", response_model=p.SessionSummary)
    async def get_session(session_id: str):
        live = await engine.get(session_id)
        if live is None:
            return JSONResponse(
                status_code=404,
                content=p.ErrorMessage(code="notFound", message="unknown session").model_dump(),
            )
        return summary(live)

    @app.get("/sessions/{session_id}/state", response_model=p.StateMessage)
    async def get_state(session_id: str):
        live = await engine.get(session_id)
        if live is None:
            return JSONResponse(
                status_code=404,
                content=p.ErrorMessage(code="notFound", message="unknown session").model_dump(),
            )
        if live.session.finished:
            return JSONResponse(content=game_over_message(live).model_dump())
        return state_message(live)

    @app.get("/sessions/{session_id}/transcript")
    async def get_transcript(session_id: str):
        live = await engine.get(session_id)
        if live is None:
            return PlainTextResponse("unknown session", status_code=404)
        return PlainTextResponse(live.transcript_path.read_text())

    @app.post("/sessions/{session_id}/move")
    async def post_move(session_id: str, body: dict):
        live = await engine.get(session_id)
        if live is None:
            return JSONResponse(
                status_code=404,
                content=[p.ErrorMessage(code="notFound", message="unknown session").model_dump()],
            )
        body = dict(body)
        body.setdefault("session_id", session_id)
        try:
            msg = parse_client_message(body)
        except (ValidationError, TypeError):
            return JSONResponse(
                status_code=400,
                content=[
                    p.ErrorMessage(
                        session_id=session_id, code="badRequest", message="malformed message"
                    ).model_dump()
                ],
            )
        if isinstance(msg, p.JoinMessage):
            if live.session.finished:
                return [game_over_message(live).model_dump()]
            return [state_message(live).model_dump()]
        responses = await handle_move(live, msg)
        return [r.model_dump() for r in responses]

    @app.websocket("/ws/{session_id}")
    async def websocket_endpoint(ws: WebSocket, session_id: str):
        await ws.accept()
        live = await engine.get(session_id)
        if live is None:
            await ws.send_json(
                p.ErrorMessage(code="notFound", message="unknown session").model_dump()
            )
            await ws.close()
            return
        try:
            while True:
                data = await ws.receive_json()
                if not isinstance(data, dict):
                    await ws.send_json(
                        p.ErrorMessage(
                            session_id=session_id, code="badRequest", message="malformed message"
                        ).model_dump()
                    )
                    continue
                data.setdefault("session_id", session_id)
                try:
                    msg = parse_client_message(data)
                except (ValidationError, TypeError):
                    await ws.send_json(
                        p.ErrorMessage(
                            session_id=session_id, code="badRequest", message="malformed message"
                        ).model_dump()
                    )
                    continue
                if isinstance(msg, p.JoinMessage):
                    if live.session.finished:
                        await ws.send_json(game_over_message(live).model_dump())
                    else:
                        await ws.send_json(state_message(live).model_dump())
                    continue
                for response in await handle_move(live, msg):
                    await ws.send_json(response.model_dump())
        except WebSocketDisconnect:
            return

    return app
