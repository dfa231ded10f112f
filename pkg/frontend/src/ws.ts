// Socket wrapper: one WebSocket per session, strict in-order handling, and a
// join on every (re)connect so the server restores the current state.

import { ClientMessage, parseServerMessage, ServerMessage } from "./protocol.js";

export interface SocketHooks {
  onMessage: (msg: ServerMessage) => void;
  onClose?: () => void;
}

export class GameSocket {
  private ws: WebSocket | null = null;
  private readonly url: string;
  private readonly sessionId: string;
  private readonly hooks: SocketHooks;
  private reconnectDelay = 500;

  constructor(baseUrl: string, sessionId: string, hooks: SocketHooks) {
    this.url = `${baseUrl.replace(/^http/, "ws").replace(/\/$/, "")}/ws/${sessionId}`;
    this.sessionId = sessionId;
    this.hooks = hooks;
  }

  connect(): void {
    this.ws = new WebSocket(this.url);
    this.ws.onopen = () => {
      this.reconnectDelay = 500;
      this.send({ type: "join", session_id: this.sessionId });
    };
    this.ws.onmessage = (event) => {
      const msg = parseServerMessage(JSON.parse(event.data as string));
      if (msg !== null) this.hooks.onMessage(msg);
    };
    this.ws.onclose = () => {
      this.hooks.onClose?.();
      setTimeout(() => this.connect(), this.reconnectDelay);
      this.reconnectDelay = Math.min(this.reconnectDelay * 2, 8000);
    };
  }

  send(msg: ClientMessage): void {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(JSON.stringify(msg));
    }
  }
}
