/*
 * Console state: everything derives from the control plane, so a reload
 * reconstructs an equivalent view from the session list plus the feed.
 */

import type { ConnectionState, FeedEvent, SessionSummary } from "./protocol.js";

export const FEED_LIMIT = 200;
export const SPARKLINE_POINTS = 60;

export interface FeedEntry {
  seq: number;
  direction: string;
  kind: string;
  latency_s: number | null;
  injected: boolean;
  preview: string;
}

export interface AckMarker {
  label: string;
  // feed position after which the change applies; entries before it are
  // untouched by design (relay non-retroactivity), so the UI never offers
  // retroactive edits
  afterFeedIndex: number;
  afterSeq: { [direction: string]: number };
}

export interface SessionView {
  sessionId: string;
  modes: { target_to_server: string; server_to_target: string };
  transformSetId: string | null;
  feed: FeedEntry[];
  feedTotal: number;
  seqLog: { [direction: string]: number[] };
  latencies: number[];
  gaps: Array<{ intent?: string; reason?: string }>;
  ackMarkers: AckMarker[];
  orderingViolations: number;
}

export interface ConsoleState {
  connection: ConnectionState;
  sessions: Map<string, SessionView>;
}

function emptySession(sessionId: string): SessionView {
  return {
    sessionId,
    modes: { target_to_server: "passthrough", server_to_target: "passthrough" },
    transformSetId: null,
    feed: [],
    feedTotal: 0,
    seqLog: {},
    latencies: [],
    gaps: [],
    ackMarkers: [],
    orderingViolations: 0,
  };
}

export class ConsoleStore {
  readonly state: ConsoleState = { connection: "closed", sessions: new Map() };
  private listeners: Array<() => void> = [];

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  setConnection(state: ConnectionState): void {
    this.state.connection = state;
    this.notify();
  }

  session(sessionId: string): SessionView {
    let view = this.state.sessions.get(sessionId);
    if (!view) {
      view = emptySession(sessionId);
      this.state.sessions.set(sessionId, view);
    }
    return view;
  }

  applySessionList(list: SessionSummary[]): void {
    for (const summary of list) {
      const view = this.session(summary.session_id);
      view.modes.target_to_server = summary.target_to_server;
      view.modes.server_to_target = summary.server_to_target;
      view.transformSetId = summary.transform_set_id;
    }
    this.notify();
  }

  applyFeed(event: FeedEvent): void {
    if (!event.session_id) return;
    const view = this.session(event.session_id);
    if (event.event === "session_opened") {
      this.notify();
      return;
    }
    if (event.event === "session_closed") {
      this.notify();
      return;
    }
    if (event.event === "relay_gap") {
      view.gaps.push({ intent: event.intent, reason: (event as { reason?: string }).reason });
      this.notify();
      return;
    }
    if (event.event !== "relay_message") return;
    const direction = event.direction ?? "";
    const seq = event.seq ?? -1;
    const seqs = (view.seqLog[direction] ??= []);
    if (seqs.length > 0 && seq <= seqs[seqs.length - 1]) {
      view.orderingViolations += 1;
    }
    seqs.push(seq);
    const entry: FeedEntry = {
      seq,
      direction,
      kind: event.kind ?? "",
      latency_s: event.latency_s ?? null,
      injected: event.injected ?? false,
      preview: event.payload_preview ?? event.payload_b64 ?? "",
    };
    view.feed.push(entry);
    view.feedTotal += 1;
    if (view.feed.length > FEED_LIMIT) view.feed.shift();
    if (entry.latency_s !== null) {
      view.latencies.push(entry.latency_s);
      if (view.latencies.length > SPARKLINE_POINTS) view.latencies.shift();
    }
    this.notify();
  }

  recordMode(sessionId: string, direction: string, mode: string): void {
    const view = this.session(sessionId);
    if (direction === "target_to_server" || direction === "server_to_target") {
      view.modes[direction] = mode;
    }
    this.notify();
  }

  markAck(sessionId: string, label: string): AckMarker {
    const view = this.session(sessionId);
    const marker: AckMarker = {
      label,
      afterFeedIndex: view.feedTotal,
      afterSeq: Object.fromEntries(
        Object.entries(view.seqLog).map(([direction, seqs]) => [
          direction,
          seqs.length ? seqs[seqs.length - 1] : -1,
        ]),
      ),
    };
    view.ackMarkers.push(marker);
    this.notify();
    return marker;
  }
}

/** Unicode sparkline for the latency strip; pure so it is testable. */
export function sparkline(values: number[]): string {
  if (values.length === 0) return "";
  const blocks = "▁▂▃▄▅▆▇█";
  const min = Math.min(...values);
  const max = Math.max(...values);
  const span = max - min || 1;
  return values
    .map((v) => blocks[Math.min(blocks.length - 1, Math.floor(((v - min) / span) * blocks.length))])
    .join("");
}
