/**
 * Session state for the operator dashboard.
 *
 * SessionView is a pure reducer over lines received from the subscriber
 * stream: broadcasts, acks, and metrics records. It owns no sockets and
 * touches no DOM, so every transition is unit-testable. All state is
 * derived solely from received messages plus explicit operator actions.
 */

import {
  Ack,
  Broadcast,
  Control,
  ControlKind,
  FormatError,
  Metrics,
  classify,
  encodeControl,
  parseAck,
  parseBroadcast,
  parseMetrics,
} from "./protocol.js";

/** Rolling per-controller history window, matched to the service metrics window. */
export const HISTORY_FRAMES = 48;

export type ConnState = "idle" | "connecting" | "connected" | "disconnected";

export type ActionStatus = "pending" | "applied" | "failed";

export interface ActionRecord {
  kind: ControlKind;
  args: Record<string, unknown>;
  status: ActionStatus;
  seq: number | null;
  error: string | null;
}

export interface Toast {
  text: string;
  at: number;
}

export interface CharacterGroups {
  registered: string[];
  unregistered: string[];
}

export class SessionView {
  conn: ConnState = "idle";
  /** Roster from the last list_characters ack. */
  characters: string[] = [];
  active: string | null = null;
  latest = new Map<string, Broadcast>();
  metrics: Metrics | null = null;
  paused = false;
  /** Instrumented count of view updates (non-stale frames applied). */
  updates = 0;
  /** Frames dropped by the per-character timestamp sequence check. */
  duplicates = 0;
  staleSeen = 0;
  /** Lines from the stream that failed to parse; never fatal. */
  protocolErrors = 0;
  toasts: Toast[] = [];
  /** Full action log, newest last; the pending queue indexes into it. */
  actions: ActionRecord[] = [];
  /**
   * Optional 7-way emotion distribution for the side panel. The live
   * broadcast stream does not carry one today; the panel renders only
   * when a diagnostic feed supplies it.
   */
  emotion: number[] | null = null;

  private history = new Map<string, number[][]>();
  private lastT = new Map<string, number>();
  private pendingQueue: ActionRecord[] = [];

  onConnecting(): void {
    this.conn = "connecting";
  }

  onOpen(): void {
    this.conn = "connected";
    // lastT survives reconnects on purpose: a repeat of an already-seen
    // frame after resubscribe must not be applied twice.
  }

  onClose(): void {
    this.conn = "disconnected";
    for (const act of this.pendingQueue) {
      act.status = "failed";
      act.error = "connection lost";
    }
    this.pendingQueue = [];
  }

  /** Feed one line from the subscriber stream. Never throws. */
  onLine(line: string): void {
    let family: string;
    try {
      family = classify(line);
    } catch {
      this.protocolErrors += 1;
      return;
    }
    try {
      if (family === "broadcast") {
        this.applyBroadcast(parseBroadcast(line));
      } else if (family === "ack") {
        this.applyAck(parseAck(line));
      } else if (family === "metrics") {
        this.metrics = parseMetrics(line);
      }
      // control/frame records are not expected on this stream; ignore.
    } catch (e) {
      if (e instanceof FormatError) {
        this.protocolErrors += 1;
        return;
      }
      throw e;
    }
  }

  private applyBroadcast(rec: Broadcast): void {
    if (this.paused) {
      return; // view frozen; resumed frames carry later timestamps
    }
    if (rec.stale) {
      this.staleSeen += 1;
      return; // repeats never advance the displayed values
    }
    const last = this.lastT.get(rec.char);
    if (last !== undefined && rec.t <= last) {
      this.duplicates += 1;
      return;
    }
    this.lastT.set(rec.char, rec.t);
    this.latest.set(rec.char, rec);
    let hist = this.history.get(rec.char);
    if (hist === undefined) {
      hist = [];
      this.history.set(rec.char, hist);
    }
    hist.push(rec.v);
    if (hist.length > HISTORY_FRAMES) {
      hist.splice(0, hist.length - HISTORY_FRAMES);
    }
    this.updates += 1;
  }

  private applyAck(ack: Ack): void {
    const act = this.pendingQueue.shift();
    if (act === undefined) {
      // Ack with nothing in flight (e.g. issued by another admin client
      // sharing the connection). Nothing of ours to resolve.
      this.protocolErrors += 1;
      return;
    }
    act.seq = ack.seq;
    if (!ack.ok) {
      act.status = "failed";
      act.error = ack.error ?? "rejected";
      this.pushToast(`${act.kind} failed: ${act.error}`);
      return; // negative ack leaves session state unchanged
    }
    act.status = "applied";
    if (act.kind === "set_character") {
      this.active = String(act.args["char"]);
    } else if (act.kind === "list_characters" && ack.data !== undefined) {
      const chars = ack.data["characters"];
      if (Array.isArray(chars)) {
        this.characters = chars.map((c) => String(c));
      }
      const active = ack.data["active"];
      if (typeof active === "string") {
        this.active = active;
      }
    }
  }

  /**
   * Record an operator action and return the canonical wire line for the
   * transport to send. Throws FormatError on invalid input and a plain
   * Error when not connected; neither mutates state.
   */
  action(kind: ControlKind, args: Record<string, unknown> = {}): string {
    if (this.conn !== "connected") {
      throw new Error("not connected");
    }
    const msg: Control = { kind, args };
    const line = encodeControl(msg); // validates; throws before any bookkeeping
    const act: ActionRecord = { kind, args, status: "pending", seq: null, error: null };
    this.actions.push(act);
    this.pendingQueue.push(act);
    return line;
  }

  pause(): void {
    this.paused = true;
  }

  resume(): void {
    this.paused = false;
  }

  setEmotion(dist: number[] | null): void {
    this.emotion = dist;
  }

  historyFor(char: string): number[][] {
    return this.history.get(char) ?? [];
  }

  /** Characters split by roster membership; unknown senders group separately. */
  groups(): CharacterGroups {
    const registered = [...this.characters];
    const unregistered: string[] = [];
    for (const char of this.latest.keys()) {
      if (!registered.includes(char)) {
        unregistered.push(char);
      }
    }
    unregistered.sort();
    return { registered, unregistered };
  }

  /** Character whose controllers the panels should show. */
  displayChar(): string | null {
    if (this.active !== null && this.latest.has(this.active)) {
      return this.active;
    }
    if (this.active !== null && this.latest.size === 0) {
      return this.active;
    }
    const first = this.latest.keys().next();
    return first.done ? this.active : first.value;
  }

  pendingCount(): number {
    return this.pendingQueue.length;
  }

  private pushToast(text: string): void {
    this.toasts.push({ text, at: Date.now() });
    if (this.toasts.length > 8) {
      this.toasts.splice(0, this.toasts.length - 8);
    }
  }
}

/**
 * Sliding-window rate estimate for the instrumented update counter.
 * Pure so the arithmetic is testable without timers.
 */
export class RateMeter {
  private samples: Array<[number, number]> = []; // [monotonic seconds, count]

  tick(nowSeconds: number, count: number): number {
    this.samples.push([nowSeconds, count]);
    const cutoff = nowSeconds - 2.0;
    while (this.samples.length > 1 && this.samples[0][0] < cutoff) {
      this.samples.shift();
    }
    const [t0, c0] = this.samples[0];
    const span = nowSeconds - t0;
    if (span <= 0) {
      return 0;
    }
    return (count - c0) / span;
  }
}
