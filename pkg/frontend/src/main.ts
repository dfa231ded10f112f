// DOM wiring: the 2x2 referent grid, chatbox, selection clicks, feedback
// highlights, and repetition progress. All state transitions come from the
// server via state.ts; this file only paints and forwards input.

import {
  applyServer,
  canSubmit,
  ClientGameState,
  initialState,
  lockMove,
  selectionMessage,
  utteranceMessage,
} from "./state.js";
import { GameSocket } from "./ws.js";
import { ReferentCell, renderTrial } from "./view.js";

const SVG_NS = "http://www.w3.org/2000/svg";

function patternOverlay(cell: ReferentCell, svg: SVGSVGElement, clipId: string): void {
  const group = document.createElementNS(SVG_NS, "g");
  group.setAttribute("clip-path", `url(#${clipId})`);
  const stroke = cell.fill === "#f4f4f4" ? "#999999" : "#ffffff";
  if (cell.pattern === "striped") {
    for (let x = -40; x <= 40; x += 12) {
      const line = document.createElementNS(SVG_NS, "line");
      line.setAttribute("x1", String(x));
      line.setAttribute("y1", "-45");
      line.setAttribute("x2", String(x + 20));
      line.setAttribute("y2", "45");
      line.setAttribute("stroke", stroke);
      line.setAttribute("stroke-width", "4");
      line.setAttribute("opacity", "0.65");
      group.appendChild(line);
    }
  } else if (cell.pattern === "spotted") {
    for (let x = -30; x <= 30; x += 15) {
      for (let y = -30; y <= 30; y += 15) {
        const dot = document.createElementNS(SVG_NS, "circle");
        dot.setAttribute("cx", String(x));
        dot.setAttribute("cy", String(y));
        dot.setAttribute("r", "4");
        dot.setAttribute("fill", stroke);
        dot.setAttribute("opacity", "0.7");
        group.appendChild(dot);
      }
    }
  } else if (cell.pattern === "checkered") {
    for (let x = -40; x < 40; x += 16) {
      for (let y = -40; y < 40; y += 16) {
        if (((x + y) / 16) % 2 === 0) {
          const rect = document.createElementNS(SVG_NS, "rect");
          rect.setAttribute("x", String(x));
          rect.setAttribute("y", String(y));
          rect.setAttribute("width", "16");
          rect.setAttribute("height", "16");
          rect.setAttribute("fill", stroke);
          rect.setAttribute("opacity", "0.5");
          group.appendChild(rect);
        }
      }
    }
  }
  svg.appendChild(group);
}

function drawCell(cell: ReferentCell, index: number, onClick: (id: number) => void): HTMLElement {
  const wrap = document.createElement("div");
  wrap.className = "cell" + (cell.isTarget ? " target" : "");
  wrap.dataset.objectId = String(cell.objectId);
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", "-50 -50 100 100");
  const defs = document.createElementNS(SVG_NS, "defs");
  const clip = document.createElementNS(SVG_NS, "clipPath");
  const clipId = `clip-${index}-${cell.objectId}`;
  clip.setAttribute("id", clipId);
  const clipShape = document.createElementNS(SVG_NS, "path");
  clipShape.setAttribute("d", cell.shapePath);
  clipShape.setAttribute("transform", `scale(${cell.scale})`);
  clip.appendChild(clipShape);
  defs.appendChild(clip);
  svg.appendChild(defs);
  const path = document.createElementNS(SVG_NS, "path");
  path.setAttribute("d", cell.shapePath);
  path.setAttribute("fill", cell.fill);
  path.setAttribute("stroke", "#333");
  path.setAttribute("stroke-width", "2");
  path.setAttribute("transform", `scale(${cell.scale})`);
  svg.appendChild(path);
  const overlay = document.createElementNS(SVG_NS, "g");
  overlay.setAttribute("transform", `scale(${cell.scale})`);
  svg.appendChild(overlay);
  patternOverlay(cell, svg, clipId);
  svg.setAttribute("aria-label", cell.label);
  wrap.appendChild(svg);
  wrap.addEventListener("click", () => onClick(cell.objectId));
  return wrap;
}

function paint(state: ClientGameState, socket: GameSocket): void {
  const view = renderTrial(state);
  const grid = document.getElementById("grid")!;
  grid.innerHTML = "";
  view.cells.forEach((cell, i) => {
    grid.appendChild(
      drawCell(cell, i, (objectId) => {
        if (view.awaiting === "selection" && canSubmit(current)) {
          current = lockMove(current);
          socket.send(selectionMessage(current, objectId));
          paint(current, socket);
        }
      })
    );
  });
  document.getElementById("progress")!.textContent = view.progress;
  const banner = document.getElementById("banner")!;
  banner.textContent = view.banner ?? "";
  banner.style.display = view.banner ? "block" : "none";
  const chat = document.getElementById("chat")!;
  chat.innerHTML = "";
  for (const line of view.chat.slice(-12)) {
    const div = document.createElement("div");
    div.className = `line ${line.who}`;
    div.textContent = `${line.who}: ${line.text}`;
    chat.appendChild(div);
  }
  chat.scrollTop = chat.scrollHeight;
  const input = document.getElementById("utterance") as HTMLInputElement;
  const send = document.getElementById("send") as HTMLButtonElement;
  const speaking = view.awaiting === "utterance";
  input.disabled = !(speaking && view.inputEnabled);
  send.disabled = input.disabled;
  if (state.lastFeedback) {
    for (const el of Array.from(grid.children) as HTMLElement[]) {
      const id = Number(el.dataset.objectId);
      if (id === state.lastFeedback.choice_id) {
        el.classList.add(state.lastFeedback.correct ? "chosen-correct" : "chosen-wrong");
      }
      if (!state.lastFeedback.correct && id === state.lastFeedback.target_id) {
        el.classList.add("was-target");
      }
    }
  }
}

let current: ClientGameState;

async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("server") ?? window.location.origin;
  let sessionId = params.get("session");
  if (!sessionId) {
    const role = params.get("role") === "listener" ? "human_listener" : "human_speaker";
    const created = await fetch(`${base}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ role }),
    });
    const payload = await created.json();
    sessionId = payload.session_id as string;
    const url = new URL(window.location.href);
    url.searchParams.set("session", sessionId);
    window.history.replaceState(null, "", url.toString());
  }
  current = initialState(sessionId);
  const socket = new GameSocket(base, sessionId, {
    onMessage: (msg) => {
      current = applyServer(current, msg);
      paint(current, socket);
    },
  });
  socket.connect();
  const input = document.getElementById("utterance") as HTMLInputElement;
  const send = document.getElementById("send") as HTMLButtonElement;
  const submit = () => {
    if (canSubmit(current) && input.value.trim()) {
      current = lockMove(current);
      socket.send(utteranceMessage(current, input.value.trim()));
      input.value = "";
      paint(current, socket);
    }
  };
  send.addEventListener("click", submit);
  input.addEventListener("keydown", (e) => {
    if (e.key === "Enter") submit();
  });
}

start();
