// NDJSON bridge client over TCP (Node side: the gateway server and tests).
// Reconnects with backoff; emits parsed dashboard frames and decode errors.

import * as net from "node:net";
import { BasestationCommand, DashboardFrame } from "./types.js";

export interface BridgeEvents {
  onFrame: (frame: DashboardFrame) => void;
  onDecodeError?: () => void;
  onConnect?: () => void;
  onDisconnect?: () => void;
}

export class NdjsonBridgeClient {
  private socket: net.Socket | null = null;
  private buffer = "";
  private closed = false;
  private backoffMs = 200;

  constructor(
    private host: string,
    private port: number,
    private events: BridgeEvents,
  ) {}

  connect(): void {
    if (this.closed) return;
    const socket = net.connect(this.port, this.host);
    this.socket = socket;
    socket.setEncoding("utf8");
    socket.on("connect", () => {
      this.backoffMs = 200;
      this.events.onConnect?.();
    });
    socket.on("data", (chunk: string) => this.feed(chunk));
    const retry = () => {
      this.events.onDisconnect?.();
      this.socket = null;
      if (!this.closed) {
        setTimeout(() => this.connect(), this.backoffMs);
        this.backoffMs = Math.min(this.backoffMs * 2, 5000);
      }
    };
    socket.on("error", () => socket.destroy());
    socket.on("close", retry);
  }

  private feed(chunk: string): void {
    this.buffer += chunk;
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, idx).trim();
      this.buffer = this.buffer.slice(idx + 1);
      if (!line) continue;
      try {
        this.events.onFrame(JSON.parse(line) as DashboardFrame);
      } catch {
        this.events.onDecodeError?.();
      }
    }
  }

  send(command: BasestationCommand): boolean {
    if (!this.socket || this.socket.destroyed) return false;
    this.socket.write(JSON.stringify(command) + "\n");
    return true;
  }

  close(): void {
    this.closed = true;
    this.socket?.destroy();
  }
}
