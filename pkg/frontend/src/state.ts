// Client-side game state: a thin mirror of the server's messages. The client
// holds no game logic; every transition is driven by a server frame, and a
// reconnect (join -> state) rebuilds the identical view.

import {
  FeedbackMessage,
  GameOverMessage,
  ServerMessage,
  StateMessage,
} from "./protocol.js";

export interface ChatLine {
  who: "you" | "agent" | "system";
  text: string;
}

export interface ClientGameState {
  sessionId: string;
  phase: "connecting" | "your_turn" | "waiting" | "finished" | "error";
  role: "human_speaker" | "human_listener" | null;
  trialIndex: number;
  totalTrials: number;
  repetitionBlock: number;
  state: StateMessage | null;
  lastFeedback: FeedbackMessage | null;
  gameOver: GameOverMessage | null;
  chat: ChatLine[];
  banner: string | null;
  // true exactly while this trial's single message is in flight
  moveLocked: boolean;
}

export function initialState(sessionId: string): ClientGameState {
  return {
    sessionId,
    phase: "connecting",
    role: null,
    trialIndex: 0,
    totalTrials: 0,
    repetitionBlock: 0,
    state: null,
    lastFeedback: null,
    gameOver: null,
    chat: [],
    banner: null,
    moveLocked: false,
  };
}

export function canSubmit(state: ClientGameState): boolean {
  return state.phase === "your_turn" && !state.moveLocked && state.state !== null;
}

/** Mark the trial's one message as sent; input stays disabled until the
 * server's feedback arrives. */
export function lockMove(state: ClientGameState): ClientGameState {
  return { ...state, moveLocked: true, phase: "waiting" };
}

export function applyServer(state: ClientGameState, msg: ServerMessage): ClientGameState {
  switch (msg.type) {
    case "state": {
      const next: ClientGameState = {
        ...state,
        phase: "your_turn",
        role: msg.role,
        trialIndex: msg.trial_index,
        totalTrials: msg.total_trials,
        repetitionBlock: msg.repetition_block,
        state: msg,
        banner: null,
        moveLocked: false,
      };
      if (msg.role === "human_listener" && msg.agent_utterance) {
        next.chat = [...state.chat, { who: "agent", text: msg.agent_utterance.join(" ") }];
      }
      return next;
    }
    case "feedback": {
      const lines: ChatLine[] = [
        ...state.chat,
        {
          who: "system",
          text: msg.correct ? "correct!" : "incorrect",
        },
      ];
      if (msg.unknown_words.length > 0) {
        lines.push({
          who: "system",
          text: `words the agent does not know: ${msg.unknown_words.join(", ")}`,
        });
      }
      return { ...state, lastFeedback: msg, chat: lines };
    }
    case "gameOver":
      return {
        ...state,
        phase: "finished",
        gameOver: msg,
        moveLocked: false,
        banner: `game over - accuracy ${(msg.accuracy * 100).toFixed(0)}%`,
      };
    case "error": {
      // a rejected move re-enables input with an explanation
      return {
        ...state,
        phase: state.state !== null ? "your_turn" : "error",
        moveLocked: false,
        banner: msg.message,
      };
    }
  }
}

export function utteranceMessage(state: ClientGameState, text: string) {
  return { type: "utterance" as const, session_id: state.sessionId, text };
}

export function selectionMessage(state: ClientGameState, objectId: number) {
  return { type: "selection" as const, session_id: state.sessionId, object_id: objectId };
}
