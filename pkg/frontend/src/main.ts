// Browser entry: consumes the SSE stream, renders the dashboard table,
// track view, plots and alerts, and posts operator commands.

import { ConsoleState, DISCONNECT_AFTER_S } from "./state.js";
import {
  CommandDraft,
  buildCommand,
  initialDraft,
  stepVMax,
} from "./commands.js";
import {
  PlotModel,
  alertLines,
  crossTrackPlot,
  dashboardRows,
  velocityPlot,
} from "./viewmodel.js";
import { DashboardFrame, TrackFlag, VehFlag } from "./types.js";

const state = new ConsoleState();
let draft: CommandDraft = initialDraft();
let lastAck = "";

const el = (id: string) => document.getElementById(id)!;

const source = new EventSource("/stream");
source.onmessage = (ev) => {
  const frame = JSON.parse(ev.data) as DashboardFrame;
  state.applyFrame(frame, performance.now());
};
source.onerror = () => {
  /* staleness banner covers it */
};

async function sendDraft(): Promise<void> {
  const command = buildCommand(draft, Date.now() / 1000);
  await fetch("/command", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(command),
  });
  lastAck = `sent v_max=${command.v_max.toFixed(1)} flags t=${command.track_flag} v=${command.veh_flag}`;
}

function drawPlot(canvasId: string, model: PlotModel): void {
  const canvas = el(canvasId) as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const pts = model.points;
  if (pts.length < 2) return;
  const t0 = pts[0].t;
  const t1 = pts[pts.length - 1].t;
  const sx = (t: number) => ((t - t0) / Math.max(t1 - t0, 1e-9)) * width;
  const sy = (v: number) =>
    height - ((v - model.yMin) / (model.yMax - model.yMin)) * height;
  ctx.strokeStyle = "#d44";
  for (const th of model.thresholds) {
    ctx.beginPath();
    ctx.moveTo(0, sy(th));
    ctx.lineTo(width, sy(th));
    ctx.stroke();
  }
  ctx.strokeStyle = "#9cf";
  ctx.beginPath();
  pts.forEach((p, i) => (i ? ctx.lineTo(sx(p.t), sy(p.value)) : ctx.moveTo(sx(p.t), sy(p.value))));
  ctx.stroke();
}

function drawTrack(): void {
  const canvas = el("track") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const trail = state.trail;
  if (trail.length < 2) return;
  const xs = trail.map((p) => p.x);
  const ys = trail.map((p) => p.y);
  const minX = Math.min(...xs) - 30;
  const maxX = Math.max(...xs) + 30;
  const minY = Math.min(...ys) - 30;
  const maxY = Math.max(...ys) + 30;
  const scale = Math.min(
    canvas.width / (maxX - minX),
    canvas.height / (maxY - minY),
  );
  const px = (x: number) => (x - minX) * scale;
  const py = (y: number) => canvas.height - (y - minY) * scale;
  ctx.strokeStyle = "#6a6";
  ctx.beginPath();
  trail.forEach((p, i) => (i ? ctx.lineTo(px(p.x), py(p.y)) : ctx.moveTo(px(p.x), py(p.y))));
  ctx.stroke();
  const head = trail[trail.length - 1];
  ctx.fillStyle = "#fc3";
  ctx.beginPath();
  ctx.arc(px(head.x), py(head.y), 5, 0, 2 * Math.PI);
  ctx.fill();
}

function render(): void {
  const now = performance.now();
  el("banner").style.display = state.disconnectedBanner(now) ? "block" : "none";
  el("rxinfo").textContent = `frames ${state.frameCount}  decode errors ${state.decodeErrors}`;
  if (state.latest) {
    el("fields").innerHTML = dashboardRows(state.latest)
      .map((r) => `<tr><td>${r.name}</td><td>${r.value}</td></tr>`)
      .join("");
  }
  const alerts = alertLines(state.alerts);
  const alertBox = el("alerts");
  alertBox.innerHTML = alerts.length
    ? alerts.map((a) => `<div class="alert">${a}</div>`).join("")
    : '<div class="ok">all metrics in range</div>';
  el("draft").textContent = `draft: v_max ${draft.vMax.toFixed(1)} m/s, track flag ${draft.trackFlag}, veh flag ${draft.vehFlag}, joystick ${draft.joystickOn ? "ON" : "off"}`;
  el("ack").textContent = lastAck;
  drawPlot("plot-ct", crossTrackPlot(state));
  drawPlot("plot-v", velocityPlot(state));
  drawTrack();
  requestAnimationFrame(render);
}

function bind(): void {
  el("vmax-up").onclick = () => (draft = stepVMax(draft, +1));
  el("vmax-down").onclick = () => (draft = stepVMax(draft, -1));
  el("flag-green").onclick = () => (draft = { ...draft, trackFlag: TrackFlag.GREEN });
  el("flag-yellow").onclick = () => (draft = { ...draft, trackFlag: TrackFlag.YELLOW });
  el("flag-red").onclick = () => (draft = { ...draft, trackFlag: TrackFlag.RED });
  el("veh-stop").onclick = () => (draft = { ...draft, vehFlag: VehFlag.STOP });
  el("veh-clear").onclick = () => (draft = { ...draft, vehFlag: VehFlag.NONE });
  el("joy-toggle").onclick = () => (draft = { ...draft, joystickOn: !draft.joystickOn });
  el("send").onclick = () => void sendDraft();
  window.addEventListener("keydown", (ev) => {
    if (!draft.joystickOn) return;
    if (ev.key === "ArrowLeft") draft = { ...draft, joystickSteering: Math.min(draft.joystickSteering + 10, 230) };
    if (ev.key === "ArrowRight") draft = { ...draft, joystickSteering: Math.max(draft.joystickSteering - 10, -230) };
    if (ev.key === "ArrowDown") draft = { ...draft, joystickBrake: Math.min(draft.joystickBrake + 100, 1800) };
    if (ev.key === "ArrowUp") draft = { ...draft, joystickBrake: Math.max(draft.joystickBrake - 100, 0) };
    void sendDraft();
  });
}

bind();
requestAnimationFrame(render);
