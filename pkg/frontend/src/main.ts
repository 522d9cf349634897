/**
 * Browser entry point: connects the SessionView reducer to a WebSocket on
 * the page's own origin (the service multiplexes WebSocket upgrades, raw
 * NDJSON, and static files on one control port) and wires the operator
 * controls. All protocol and state logic lives in the imported modules;
 * this file is transport glue only.
 */

import { ControlKind, FormatError } from "./protocol.js";
import { RateMeter, SessionView } from "./state.js";
import { Elements, mountDashboard, render } from "./ui.js";

const view = new SessionView();
let elts: Elements;
let socket: WebSocket | null = null;
let retryDelayMs = 1000;
let renderQueued = false;

function scheduleRender(): void {
  if (renderQueued) {
    return;
  }
  renderQueued = true;
  requestAnimationFrame(() => {
    renderQueued = false;
    render(elts, view);
  });
}

function send(kind: ControlKind, args: Record<string, unknown> = {}): void {
  try {
    const line = view.action(kind, args);
    if (socket !== null && socket.readyState === WebSocket.OPEN) {
      socket.send(line);
    }
  } catch (e) {
    if (e instanceof FormatError || e instanceof Error) {
      view.toasts.push({ text: e.message, at: Date.now() });
    }
  }
  scheduleRender();
}

function connect(): void {
  view.onConnecting();
  scheduleRender();
  const proto = location.protocol === "https:" ? "wss:" : "ws:";
  const ws = new WebSocket(`${proto}//${location.host}/`);
  socket = ws;
  ws.onopen = () => {
    retryDelayMs = 1000;
    view.onOpen();
    send("subscribe");
    send("list_characters");
    scheduleRender();
  };
  ws.onmessage = (ev) => {
    if (typeof ev.data === "string") {
      for (const line of ev.data.split("\n")) {
        if (line.trim() !== "") {
          view.onLine(line);
        }
      }
    }
    scheduleRender();
  };
  ws.onclose = () => {
    socket = null;
    view.onClose();
    scheduleRender();
    setTimeout(connect, retryDelayMs);
    retryDelayMs = Math.min(retryDelayMs * 1.5, 10_000);
  };
  ws.onerror = () => {
    ws.close();
  };
}

function wireControls(): void {
  elts.charSelect.addEventListener("change", () => {
    send("set_character", { char: elts.charSelect.value });
  });
  elts.recalButton.addEventListener("click", () => {
    const frames = parseInt(elts.recalFrames.value, 10);
    send("recalibrate", { frames: Number.isFinite(frames) ? frames : 30 });
  });
  elts.paramsButton.addEventListener("click", () => {
    const args: Record<string, unknown> = {};
    const fps = parseFloat(elts.fpsInput.value);
    const stale = parseFloat(elts.staleInput.value);
    if (Number.isFinite(fps)) {
      args["target_fps"] = fps;
    }
    if (Number.isFinite(stale)) {
      args["stale_timeout"] = stale;
    }
    send("set_params", args);
  });
  elts.pauseButton.addEventListener("click", () => {
    if (view.paused) {
      view.resume();
    } else {
      view.pause();
    }
    scheduleRender();
  });
}

function startRateMeter(): void {
  const meter = new RateMeter();
  setInterval(() => {
    const rate = meter.tick(performance.now() / 1000, view.updates);
    elts.rate.textContent = `${rate.toFixed(1)}/s`;
  }, 500);
}

const root = document.getElementById("app");
if (root !== null) {
  elts = mountDashboard(root);
  wireControls();
  startRateMeter();
  render(elts, view);
  connect();
}
