// Pure view-model construction: referents are rendered from their attribute
// slots (shape path, color fill, pattern overlay, size scale) with no image
// assets. The grid follows the server-supplied display permutation; the
// target border appears only in the speaker role.

import { ObjectView } from "./protocol.js";
import { ClientGameState } from "./state.js";

const SHAPE_PATHS: Record<string, string> = {
  square: "M -35 -35 H 35 V 35 H -35 Z",
  circle: "M 0 -38 A 38 38 0 1 0 0.01 -38 Z",
  triangle: "M 0 -38 L 38 32 H -38 Z",
  star: "M 0 -38 L 9 -12 H 36 L 14 4 L 22 32 L 0 14 L -22 32 L -14 4 L -36 -12 H -9 Z",
  hexagon: "M 19 -33 H -19 L -38 0 L -19 33 H 19 L 38 0 Z",
  diamond: "M 0 -38 L 30 0 L 0 38 L -30 0 Z",
  oval: "M 0 -26 A 38 26 0 1 0 0.01 -26 Z",
  cross: "M -12 -38 H 12 V -12 H 38 V 12 H 12 V 38 H -12 V 12 H -38 V -12 H -12 Z",
};

const COLOR_HEX: Record<string, string> = {
  red: "#d62728",
  blue: "#1f77b4",
  green: "#2ca02c",
  yellow: "#e6c229",
  purple: "#9467bd",
  orange: "#ff7f0e",
  black: "#2b2b2b",
  white: "#f4f4f4",
};

const SIZE_SCALE: Record<string, number> = {
  small: 0.55,
  medium: 0.8,
  big: 1.05,
};

export interface ReferentCell {
  objectId: number;
  shapePath: string;
  fill: string;
  scale: number;
  pattern: "striped" | "spotted" | "checkered" | "plain";
  isTarget: boolean;
  label: string;
}

export interface TrialView {
  cells: ReferentCell[];
  awaiting: "utterance" | "selection" | null;
  inputEnabled: boolean;
  progress: string;
  banner: string | null;
  chat: { who: string; text: string }[];
  feedback: { correct: boolean; choiceId: number; targetId: number } | null;
}

export function referentCell(obj: ObjectView, isTarget: boolean): ReferentCell {
  return {
    objectId: obj.id,
    shapePath: SHAPE_PATHS[obj.shape] ?? SHAPE_PATHS.square,
    fill: COLOR_HEX[obj.color] ?? "#888888",
    scale: SIZE_SCALE[obj.size] ?? 0.8,
    pattern: (obj.pattern as ReferentCell["pattern"]) ?? "plain",
    isTarget,
    label: `${obj.size} ${obj.color} ${obj.pattern} ${obj.shape}`,
  };
}

export function renderTrial(state: ClientGameState): TrialView {
  const msg = state.state;
  if (msg === null) {
    return {
      cells: [],
      awaiting: null,
      inputEnabled: false,
      progress: "",
      banner: state.banner,
      chat: state.chat,
      feedback: null,
    };
  }
  if (msg.context.length !== 4 || msg.display_order.length !== 4) {
    // malformed state: show the error banner, never a partial grid
    return {
      cells: [],
      awaiting: null,
      inputEnabled: false,
      progress: "",
      banner: "malformed state from server",
      chat: state.chat,
      feedback: null,
    };
  }
  const speaker = msg.role === "human_speaker";
  const cells = msg.display_order.map((slot) => {
    const obj = msg.context[slot];
    return referentCell(obj, speaker && obj.id === msg.target_id);
  });
  const feedback = state.lastFeedback
    ? {
        correct: state.lastFeedback.correct,
        choiceId: state.lastFeedback.choice_id,
        targetId: state.lastFeedback.target_id,
      }
    : null;
  return {
    cells,
    awaiting: msg.awaiting,
    inputEnabled: state.phase === "your_turn" && !state.moveLocked,
    progress: `trial ${msg.trial_index + 1} / ${msg.total_trials} - repetition ${msg.repetition_block}`,
    banner: state.banner,
    chat: state.chat,
    feedback,
  };
}
