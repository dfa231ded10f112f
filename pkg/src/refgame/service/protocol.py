"""Wire protocol for the live game service.

JSON messages over a persistent WebSocket (one frame per message) with an
HTTP mirror for thin clients; every server message carries the session id,
trial index, and schema version. Errors carry machine-readable codes.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

PROTOCOL_VERSION = 1

HUMAN_SPEAKER = "human_speaker"
HUMAN_LISTENER = "human_listener"


class ObjectView(BaseModel):
    id: int
    size: str
    color: str
    pattern: str
    shape: str


class CreateSessionRequest(BaseModel):
    role: Literal["human_speaker", "human_listener"]
    seed: Optional[int] = None
    context_kind: Literal["challenging", "simple"] = "challenging"


class JoinMessage(BaseModel):
    type: Literal["join"]
    session_id: str


class UtteranceMessage(BaseModel):
    type: Literal["utterance"]
    session_id: str
    text: str


class SelectionMessage(BaseModel):
    type: Literal["selection"]
    session_id: str
    object_id: int


class StateMessage(BaseModel):
    type: Literal["state"] = "state"
    version: int = PROTOCOL_VERSION
    session_id: str
    trial_index: int
    total_trials: int
    repetition_block: int
    role: str
    context: list[ObjectView]
    display_order: list[int]
    awaiting: Literal["utterance", "selection"]
    target_id: Optional[int] = None  # human-speaker view only
    agent_utterance: Optional[list[str]] = None  # human-listener view only


class FeedbackMessage(BaseModel):
    type: Literal["feedback"] = "feedback"
    version: int = PROTOCOL_VERSION
    session_id: str
    trial_index: int
    correct: bool
    choice_id: int
    target_id: int
    listener_posterior: list[float]
    utterance_tokens: list[str]
    unknown_words: list[str] = Field(default_factory=list)
    update_applied: bool
    wall_ms: Optional[float] = None


class GameOverMessage(BaseModel):
    type: Literal["gameOver"] = "gameOver"
    version: int = PROTOCOL_VERSION
    session_id: str
    trial_index: int
    accuracy: float
    mean_content_length: float
    transcript_path: Optional[str] = None


class ErrorMessage(BaseModel):
    type: Literal["error"] = "error"
    version: int = PROTOCOL_VERSION
    session_id: Optional[str] = None
    trial_index: Optional[int] = None
    code: Literal["badRequest", "protocol", "notFound", "storage", "internal"]
    message: str


class SessionSummary(BaseModel):
    session_id: str
    role: str
    context_kind: str
    seed: int
    trial_index: int
    total_trials: int
    finished: bool
    accuracy_so_far: Optional[float] = None


class SessionCreated(BaseModel):
    session_id: str
    state: StateMessage
