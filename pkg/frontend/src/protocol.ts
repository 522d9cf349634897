/**
 * Wire protocol codecs for the dashboard.
 *
 * Every encoder emits the canonical byte form used across the whole stack:
 * compact separators, fixed key order, shortest round-trip float repr.
 * Decode→encode is the identity on well-formed records, so the TypeScript
 * and Python sides can be compared byte-for-byte against shared fixtures.
 *
 * Known representational limits of JSON.parse relative to the service side:
 * the texts `30` and `30.0` both parse to the double 30, so an integer check
 * here accepts `30.0` where the service would reject it (the service stays
 * the authoritative validator for anything we receive); negative zero
 * stringifies as `0`. Neither case occurs in records the dashboard emits.
 */

export const CONTROL_KINDS = [
  "set_character",
  "recalibrate",
  "set_params",
  "subscribe",
  "list_characters",
] as const;

export type ControlKind = (typeof CONTROL_KINDS)[number];

export class FormatError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "FormatError";
  }
}

export interface Frame {
  t: number;
  w: number[];
}

export interface Broadcast {
  t: number;
  char: string;
  v: number[];
  stale: boolean;
}

export interface Control {
  kind: ControlKind;
  args: Record<string, unknown>;
}

export interface Ack {
  ok: boolean;
  kind: string;
  seq: number;
  data?: Record<string, unknown>;
  error?: string;
}

export type Metrics = Record<string, unknown>;

type Doc = Record<string, unknown>;

function loads(line: string): Doc {
  let doc: unknown;
  try {
    doc = JSON.parse(line);
  } catch (e) {
    throw new FormatError(`record is not valid JSON: ${(e as Error).message}`);
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new FormatError("record must be a JSON object");
  }
  return doc as Doc;
}

function dumps(obj: unknown): string {
  // JSON.stringify silently turns NaN/Infinity into null; reject instead.
  return JSON.stringify(obj, (_key, value) => {
    if (typeof value === "number" && !Number.isFinite(value)) {
      throw new FormatError("record not representable as JSON: non-finite number");
    }
    return value;
  });
}

function numberField(doc: Doc, key: string): number {
  const v = doc[key];
  if (typeof v !== "number") {
    throw new FormatError(`field '${key}' must be a number`);
  }
  if (!Number.isFinite(v)) {
    throw new FormatError(`field '${key}' must be finite`);
  }
  return v;
}

function numberList(doc: Doc, key: string): number[] {
  const v = doc[key];
  if (!Array.isArray(v) || v.length === 0) {
    throw new FormatError(`field '${key}' must be a non-empty array`);
  }
  const out: number[] = [];
  for (const x of v) {
    if (typeof x !== "number") {
      throw new FormatError(`field '${key}' must contain only numbers`);
    }
    if (!Number.isFinite(x)) {
      throw new FormatError(`field '${key}' must be finite`);
    }
    out.push(x);
  }
  return out;
}

// --- frame ingestion records: {"t": float, "w": [float...]} ---

export function encodeFrame(frame: Frame): string {
  return dumps({ t: frame.t, w: frame.w });
}

export function parseFrame(line: string): Frame {
  const doc = loads(line);
  return { t: numberField(doc, "t"), w: numberList(doc, "w") };
}

// --- broadcast records: {"t", "char", "v", "stale"} ---

export function encodeBroadcast(rec: Broadcast): string {
  return dumps({ t: rec.t, char: rec.char, v: rec.v, stale: rec.stale });
}

export function parseBroadcast(line: string): Broadcast {
  const doc = loads(line);
  const t = numberField(doc, "t");
  const char = doc["char"];
  if (typeof char !== "string" || char === "") {
    throw new FormatError("field 'char' must be a non-empty string");
  }
  const v = numberList(doc, "v");
  const stale = doc["stale"];
  if (typeof stale !== "boolean") {
    throw new FormatError("field 'stale' must be a boolean");
  }
  return { t, char, v, stale };
}

// --- control messages: {"kind", "args"} / acks {"ok", "kind", "seq"} ---

function validateControl(msg: Control): Control {
  if (!(CONTROL_KINDS as readonly string[]).includes(msg.kind)) {
    throw new FormatError(`unknown control kind '${msg.kind}'`);
  }
  const args = msg.args;
  if (typeof args !== "object" || args === null || Array.isArray(args)) {
    throw new FormatError("field 'args' must be an object");
  }
  if (msg.kind === "set_character") {
    const char = args["char"];
    if (typeof char !== "string" || char === "") {
      throw new FormatError("set_character needs a non-empty 'char' string");
    }
  } else if (msg.kind === "recalibrate") {
    const frames = "frames" in args ? args["frames"] : 30;
    if (typeof frames !== "number" || !Number.isInteger(frames) || frames < 1) {
      throw new FormatError("recalibrate 'frames' must be a positive integer");
    }
  } else if (msg.kind === "set_params") {
    for (const key of Object.keys(args)) {
      if (key !== "target_fps" && key !== "stale_timeout") {
        throw new FormatError(`set_params does not accept '${key}'`);
      }
    }
    for (const key of ["target_fps", "stale_timeout"]) {
      if (key in args) {
        const v = args[key];
        if (typeof v !== "number" || !Number.isFinite(v) || v <= 0.0) {
          throw new FormatError(`set_params '${key}' must be > 0`);
        }
      }
    }
  } else if (Object.keys(args).length > 0) {
    throw new FormatError(`${msg.kind} takes no arguments`);
  }
  return msg;
}

export function encodeControl(msg: Control): string {
  validateControl(msg);
  return dumps({ kind: msg.kind, args: msg.args });
}

export function parseControl(line: string): Control {
  const doc = loads(line);
  const kind = doc["kind"];
  if (typeof kind !== "string") {
    throw new FormatError("field 'kind' must be a string");
  }
  const args = "args" in doc ? doc["args"] : {};
  return validateControl({ kind: kind as ControlKind, args: args as Record<string, unknown> });
}

export function encodeAck(ack: Ack): string {
  const doc: Doc = { ok: ack.ok, kind: ack.kind, seq: ack.seq };
  if (ack.data !== undefined && ack.data !== null) {
    doc["data"] = ack.data;
  }
  if (ack.error !== undefined && ack.error !== null) {
    doc["error"] = ack.error;
  }
  return dumps(doc);
}

export function parseAck(line: string): Ack {
  const doc = loads(line);
  const ok = doc["ok"];
  if (typeof ok !== "boolean") {
    throw new FormatError("field 'ok' must be a boolean");
  }
  const kind = doc["kind"];
  if (typeof kind !== "string") {
    throw new FormatError("field 'kind' must be a string");
  }
  const seq = doc["seq"];
  if (typeof seq !== "number" || !Number.isInteger(seq)) {
    throw new FormatError("field 'seq' must be an integer");
  }
  const ack: Ack = { ok, kind, seq };
  if (doc["data"] !== undefined && doc["data"] !== null) {
    ack.data = doc["data"] as Record<string, unknown>;
  }
  if (doc["error"] !== undefined && doc["error"] !== null) {
    ack.error = String(doc["error"]);
  }
  return ack;
}

// --- metrics records: {"metrics": {...}} ---

export function encodeMetrics(metrics: Metrics): string {
  return dumps({ metrics });
}

export function parseMetrics(line: string): Metrics {
  const doc = loads(line);
  const m = doc["metrics"];
  if (typeof m !== "object" || m === null || Array.isArray(m)) {
    throw new FormatError("field 'metrics' must be an object");
  }
  return m as Metrics;
}

/** Which record family a broadcast-channel line belongs to. */
export function classify(line: string): string {
  const doc = loads(line);
  if ("metrics" in doc) return "metrics";
  if ("ok" in doc) return "ack";
  if ("char" in doc) return "broadcast";
  if ("kind" in doc) return "control";
  if ("w" in doc) return "frame";
  throw new FormatError("unrecognized record shape");
}
