// Browser gateway: bridges the stack's NDJSON TCP socket to the page via
// server-sent events downstream and a command POST upstream, and serves the
// static console.

import express from "express";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { NdjsonBridgeClient } from "./bridge.js";
import { BasestationCommand, DashboardFrame } from "./types.js";

const BRIDGE_HOST = process.env.BRIDGE_HOST ?? "127.0.0.1";
const BRIDGE_PORT = Number(process.env.BRIDGE_PORT ?? 7780);
const HTTP_PORT = Number(process.env.PORT ?? 8080);

const here = path.dirname(fileURLToPath(import.meta.url));
const app = express();
app.use(express.json());
app.use(express.static(path.join(here, "..", "public")));
app.use("/dist", express.static(here));

type SseClient = { write: (chunk: string) => void };
const clients = new Set<SseClient>();
let latest: DashboardFrame | null = null;

const bridge = new NdjsonBridgeClient(BRIDGE_HOST, BRIDGE_PORT, {
  onFrame: (frame) => {
    latest = frame;
    const line = `data: ${JSON.stringify(frame)}\n\n`;
    for (const c of clients) c.write(line);
  },
  onConnect: () => console.log(`bridge connected ${BRIDGE_HOST}:${BRIDGE_PORT}`),
  onDisconnect: () => console.log("bridge lost, retrying"),
});
bridge.connect();

app.get("/stream", (req, res) => {
  res.setHeader("Content-Type", "text/event-stream");
  res.setHeader("Cache-Control", "no-cache");
  res.flushHeaders();
  if (latest) res.write(`data: ${JSON.stringify(latest)}\n\n`);
  const client: SseClient = { write: (chunk) => res.write(chunk) };
  clients.add(client);
  req.on("close", () => clients.delete(client));
});

app.post("/command", (req, res) => {
  const ok = bridge.send(req.body as BasestationCommand);
  res.json({ sent: ok });
});

app.listen(HTTP_PORT, () => {
  console.log(`console on http://127.0.0.1:${HTTP_PORT}`);
});
