/**
 * DOM rendering for the dashboard. Builds a static skeleton once, then
 * render() reconciles it against a SessionView snapshot. Displayed
 * controller values are exactly the received values — no client-side
 * smoothing or rounding of the underlying numbers.
 */

import { faceFromControllers, faceGeometry, polylinePath } from "./face.js";
import { SessionView } from "./state.js";

export const EMOTION_LABELS = [
  "neutral",
  "anger",
  "sadness",
  "fear",
  "disgust",
  "joy",
  "surprise",
] as const;

export interface Elements {
  root: HTMLElement;
  banner: HTMLElement;
  charSelect: HTMLSelectElement;
  recalFrames: HTMLInputElement;
  recalButton: HTMLButtonElement;
  fpsInput: HTMLInputElement;
  staleInput: HTMLInputElement;
  paramsButton: HTMLButtonElement;
  pauseButton: HTMLButtonElement;
  rate: HTMLElement;
  controllers: HTMLElement;
  face: HTMLElement;
  emotionPanel: HTMLElement;
  metricsStrip: HTMLElement;
  actionsLog: HTMLElement;
  toastBox: HTMLElement;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) {
    node.setAttribute(k, v);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export function mountDashboard(root: HTMLElement): Elements {
  const doc = root.ownerDocument;
  root.textContent = "";

  const banner = el(doc, "div", { class: "banner", "data-conn": "" }, "idle");
  root.appendChild(banner);

  const controls = el(doc, "div", { class: "controls" });
  const charSelect = el(doc, "select", { "data-char": "" });
  const recalFrames = el(doc, "input", {
    "data-in-frames": "",
    type: "number",
    min: "1",
    step: "1",
    value: "30",
  });
  const recalButton = el(doc, "button", { "data-act-recal": "" }, "recalibrate");
  const fpsInput = el(doc, "input", {
    "data-in-fps": "",
    type: "number",
    min: "1",
    step: "0.5",
    value: "24",
  });
  const staleInput = el(doc, "input", {
    "data-in-stale": "",
    type: "number",
    min: "0.05",
    step: "0.05",
    value: "0.2",
  });
  const paramsButton = el(doc, "button", { "data-act-params": "" }, "apply params");
  const pauseButton = el(doc, "button", { "data-act-pause": "" }, "pause");
  const rate = el(doc, "span", { class: "rate", "data-rate": "" }, "0.0/s");
  controls.append(
    charSelect,
    recalFrames,
    recalButton,
    fpsInput,
    staleInput,
    paramsButton,
    pauseButton,
    rate,
  );
  root.appendChild(controls);

  const main = el(doc, "div", { class: "main" });
  const controllers = el(doc, "div", { class: "controllers", "data-controllers": "" });
  const side = el(doc, "div", { class: "side" });
  const face = el(doc, "div", { class: "face", "data-face": "" });
  const emotionPanel = el(doc, "div", { class: "emotion hidden", "data-emotion": "" });
  side.append(face, emotionPanel);
  main.append(controllers, side);
  root.appendChild(main);

  const metricsStrip = el(doc, "div", { class: "metrics", "data-metrics": "" });
  const actionsLog = el(doc, "div", { class: "actions", "data-actions": "" });
  const toastBox = el(doc, "div", { class: "toasts", "data-toast": "" });
  root.append(metricsStrip, actionsLog, toastBox);

  return {
    root,
    banner,
    charSelect,
    recalFrames,
    recalButton,
    fpsInput,
    staleInput,
    paramsButton,
    pauseButton,
    rate,
    controllers,
    face,
    emotionPanel,
    metricsStrip,
    actionsLog,
    toastBox,
  };
}

interface Row {
  wrap: HTMLElement;
  fill: HTMLElement;
  value: HTMLElement;
  spark: HTMLCanvasElement;
}

const rowCache = new WeakMap<HTMLElement, { char: string; rows: Row[] }>();

function buildRows(container: HTMLElement, char: string, count: number): Row[] {
  const doc = container.ownerDocument;
  container.textContent = "";
  const rows: Row[] = [];
  for (let i = 0; i < count; i++) {
    const wrap = el(doc, "div", { class: "ctrl", "data-ctrl": String(i) });
    const name = el(doc, "span", { class: "name" }, `c${String(i).padStart(2, "0")}`);
    const bar = el(doc, "div", { class: "bar" });
    const fill = el(doc, "div", { class: "fill" });
    bar.appendChild(fill);
    const value = el(doc, "span", { class: "value" }, "0");
    const spark = el(doc, "canvas", { class: "spark", width: "96", height: "20" });
    wrap.append(name, bar, value, spark);
    container.appendChild(wrap);
    rows.push({ wrap, fill, value, spark });
  }
  rowCache.set(container, { char, rows });
  return rows;
}

function drawSparkline(canvas: HTMLCanvasElement, series: number[]): void {
  // happy-dom has no canvas 2D backend; skip drawing when unavailable.
  const anyCanvas = canvas as HTMLCanvasElement & {
    getContext?: (kind: string) => CanvasRenderingContext2D | null;
  };
  if (typeof anyCanvas.getContext !== "function") {
    return;
  }
  let ctx: CanvasRenderingContext2D | null = null;
  try {
    ctx = anyCanvas.getContext("2d");
  } catch {
    return;
  }
  if (!ctx) {
    return;
  }
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  if (series.length < 2) {
    return;
  }
  ctx.beginPath();
  for (let i = 0; i < series.length; i++) {
    const x = (i / (series.length - 1)) * (w - 2) + 1;
    const y = h - 2 - Math.min(1, Math.max(0, series[i])) * (h - 4);
    if (i === 0) {
      ctx.moveTo(x, y);
    } else {
      ctx.lineTo(x, y);
    }
  }
  ctx.strokeStyle = "#4a90d9";
  ctx.lineWidth = 1;
  ctx.stroke();
}

function renderControllers(elts: Elements, view: SessionView): void {
  const char = view.displayChar();
  const container = elts.controllers;
  if (char === null) {
    container.textContent = "";
    rowCache.delete(container);
    return;
  }
  const rec = view.latest.get(char);
  const values = rec ? rec.v : [];
  const cached = rowCache.get(container);
  const rows =
    cached !== undefined && cached.char === char && cached.rows.length === values.length
      ? cached.rows
      : buildRows(container, char, values.length);
  const hist = view.historyFor(char);
  for (let i = 0; i < values.length; i++) {
    const v = values[i];
    const pct = Math.min(1, Math.max(0, v)) * 100;
    rows[i].fill.style.width = `${pct}%`;
    rows[i].value.textContent = String(v);
    drawSparkline(
      rows[i].spark,
      hist.map((frame) => frame[i] ?? 0),
    );
  }
}

function renderFace(elts: Elements, view: SessionView): void {
  const char = view.displayChar();
  const rec = char !== null ? view.latest.get(char) : undefined;
  const params = faceFromControllers(rec ? rec.v : []);
  const g = faceGeometry(params);
  const svg =
    `<svg viewBox="0 0 100 100" class="face-svg">` +
    `<ellipse cx="50" cy="50" rx="34" ry="${(g.chinY - 10) / 2}" class="head"/>` +
    `<path d="${polylinePath(g.browLeft)}" class="brow"/>` +
    `<path d="${polylinePath(g.browRight)}" class="brow"/>` +
    `<ellipse cx="${g.eyeLeft.cx}" cy="${g.eyeLeft.cy}" rx="${g.eyeLeft.rx}" ry="${g.eyeLeft.ry}" class="eye"/>` +
    `<ellipse cx="${g.eyeRight.cx}" cy="${g.eyeRight.cy}" rx="${g.eyeRight.rx}" ry="${g.eyeRight.ry}" class="eye"/>` +
    `<path d="${polylinePath(g.mouthTop)}" class="mouth"/>` +
    `<path d="${polylinePath(g.mouthBottom)}" class="mouth"/>` +
    `</svg>`;
  elts.face.innerHTML = svg;
}

function renderEmotion(elts: Elements, view: SessionView): void {
  const panel = elts.emotionPanel;
  if (view.emotion === null || view.emotion.length !== EMOTION_LABELS.length) {
    panel.classList.add("hidden");
    panel.textContent = "";
    return;
  }
  panel.classList.remove("hidden");
  const doc = panel.ownerDocument;
  panel.textContent = "";
  for (let i = 0; i < EMOTION_LABELS.length; i++) {
    const row = el(doc, "div", { class: "emo", "data-emo": EMOTION_LABELS[i] });
    const name = el(doc, "span", { class: "name" }, EMOTION_LABELS[i]);
    const bar = el(doc, "div", { class: "bar" });
    const fill = el(doc, "div", { class: "fill" });
    fill.style.width = `${Math.min(1, Math.max(0, view.emotion[i])) * 100}%`;
    bar.appendChild(fill);
    const value = el(doc, "span", { class: "value" }, view.emotion[i].toFixed(3));
    row.append(name, bar, value);
    panel.appendChild(row);
  }
}

function renderCharacterSelect(elts: Elements, view: SessionView): void {
  const doc = elts.charSelect.ownerDocument;
  const groups = view.groups();
  const select = elts.charSelect;
  const want = JSON.stringify([groups.registered, groups.unregistered]);
  if (select.getAttribute("data-built") !== want) {
    select.textContent = "";
    for (const char of groups.registered) {
      select.appendChild(el(doc, "option", { value: char }, char));
    }
    if (groups.unregistered.length > 0) {
      const group = doc.createElement("optgroup");
      group.setAttribute("label", "unregistered");
      for (const char of groups.unregistered) {
        group.appendChild(el(doc, "option", { value: char }, char));
      }
      select.appendChild(group);
    }
    select.setAttribute("data-built", want);
  }
  if (view.active !== null && select.value !== view.active) {
    select.value = view.active;
  }
}

function fmtMetric(value: unknown): string {
  return typeof value === "number" ? String(value) : "-";
}

function renderMetrics(elts: Elements, view: SessionView): void {
  const m = view.metrics;
  if (m === null) {
    elts.metricsStrip.textContent = "no metrics yet";
    return;
  }
  elts.metricsStrip.textContent =
    `fps ${fmtMetric(m["fps"])} | ` +
    `latency ${fmtMetric(m["latency_mean_ms"])} ms ` +
    `(max ${fmtMetric(m["latency_max_ms"])}) | ` +
    `jitter ${fmtMetric(m["jitter"])} | ` +
    `in ${fmtMetric(m["frames_in"])} out ${fmtMetric(m["frames_out"])}`;
}

function renderActions(elts: Elements, view: SessionView): void {
  const doc = elts.actionsLog.ownerDocument;
  elts.actionsLog.textContent = "";
  const recent = view.actions.slice(-6);
  for (const act of recent) {
    const cls = `act act-${act.status}`;
    const label = act.error === null ? `${act.kind}: ${act.status}` : `${act.kind}: ${act.status} (${act.error})`;
    elts.actionsLog.appendChild(el(doc, "div", { class: cls }, label));
  }
}

function renderToasts(elts: Elements, view: SessionView): void {
  const doc = elts.toastBox.ownerDocument;
  elts.toastBox.textContent = "";
  const now = Date.now();
  for (const toast of view.toasts.slice(-3)) {
    if (now - toast.at < 6000) {
      elts.toastBox.appendChild(el(doc, "div", { class: "toast" }, toast.text));
    }
  }
}

export function render(elts: Elements, view: SessionView): void {
  elts.banner.textContent =
    view.conn === "disconnected" ? "disconnected — retrying…" : view.conn;
  elts.banner.className = `banner banner-${view.conn}`;

  const controlsEnabled = view.conn === "connected";
  elts.charSelect.disabled = !controlsEnabled;
  elts.recalButton.disabled = !controlsEnabled;
  elts.paramsButton.disabled = !controlsEnabled;
  elts.pauseButton.textContent = view.paused ? "resume" : "pause";

  renderCharacterSelect(elts, view);
  renderControllers(elts, view);
  renderFace(elts, view);
  renderEmotion(elts, view);
  renderMetrics(elts, view);
  renderActions(elts, view);
  renderToasts(elts, view);
}
