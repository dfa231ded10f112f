// Wire protocol shared with the game service: JSON frames over a WebSocket.

export interface ObjectView {
  id: number;
  size: string;
  color: string;
  pattern: string;
  shape: string;
}

export interface StateMessage {
  type: "state";
  version: number;
  session_id: string;
  trial_index: number;
  total_trials: number;
  repetition_block: number;
  role: "human_speaker" | "human_listener";
  context: ObjectView[];
  display_order: number[];
  awaiting: "utterance" | "selection";
  target_id: number | null;
  agent_utterance: string[] | null;
}

export interface FeedbackMessage {
  type: "feedback";
  version: number;
  session_id: string;
  trial_index: number;
  correct: boolean;
  choice_id: number;
  target_id: number;
  listener_posterior: number[];
  utterance_tokens: string[];
  unknown_words: string[];
  update_applied: boolean;
  wall_ms: number | null;
}

export interface GameOverMessage {
  type: "gameOver";
  version: number;
  session_id: string;
  trial_index: number;
  accuracy: number;
  mean_content_length: number;
}

export interface ErrorMessage {
  type: "error";
  version: number;
  session_id: string | null;
  trial_index: number | null;
  code: string;
  message: string;
}

export type ServerMessage = StateMessage | FeedbackMessage | GameOverMessage | ErrorMessage;

export type ClientMessage =
  | { type: "join"; session_id: string }
  | { type: "utterance"; session_id: string; text: string }
  | { type: "selection"; session_id: string; object_id: number };

export function parseServerMessage(raw: unknown): ServerMessage | null {
  if (typeof raw !== "object" || raw === null) return null;
  const data = raw as Record<string, unknown>;
  switch (data.type) {
    case "state":
      if (!Array.isArray(data.context) || !Array.isArray(data.display_order)) return null;
      return data as unknown as StateMessage;
    case "feedback":
      if (typeof data.correct !== "boolean") return null;
      return data as unknown as FeedbackMessage;
    case "gameOver":
      return data as unknown as GameOverMessage;
    case "error":
      return data as unknown as ErrorMessage;
    default:
      return null;
  }
}
