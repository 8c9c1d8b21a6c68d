/*
 * Control-plane client for the relay WebSocket.
 *
 * One socket carries both command responses ({ok, result|error}) and,
 * after subscribing, the read-only event feed ({event, ...envelope}).
 * Responses come back in command order, so pending calls resolve FIFO.
 * The client reconnects with exponential backoff and resubscribes, and
 * surfaces connection state for the banner.
 */

export interface ControlCommand {
  cmd: string;
  session_id?: string;
  args?: Record<string, unknown>;
}

export interface ControlResponse {
  ok: boolean;
  result?: unknown;
  error?: string;
}

export interface FeedEvent {
  event: string;
  session_id: string;
  seq?: number;
  direction?: string;
  kind?: string;
  latency_s?: number;
  injected?: boolean;
  payload_b64?: string;
  payload_preview?: string;
  intent?: string;
}

export interface SessionSummary {
  session_id: string;
  target_to_server: string;
  server_to_target: string;
  transform_set_id: string | null;
  delivered: number;
}

export type ConnectionState = "connecting" | "open" | "retrying" | "closed";

// Minimal socket surface shared by the browser WebSocket and the ws package.
export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "open" | "close" | "error", handler: () => void): void;
  addEventListener(type: "message", handler: (event: { data: unknown }) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

const defaultFactory: SocketFactory = (url) =>
  new (globalThis as { WebSocket: new (url: string) => SocketLike }).WebSocket(url);

export interface ControlClientOptions {
  socketFactory?: SocketFactory;
  backoffInitialMs?: number;
  backoffMaxMs?: number;
}

export class ControlClient {
  private url: string;
  private factory: SocketFactory;
  private socket: SocketLike | null = null;
  private pending: Array<(r: ControlResponse) => void> = [];
  private feedHandlers: Array<(e: FeedEvent) => void> = [];
  private stateHandlers: Array<(s: ConnectionState) => void> = [];
  private backoffMs: number;
  private readonly backoffInitialMs: number;
  private readonly backoffMaxMs: number;
  private subscribed = false;
  private closedByUser = false;

  constructor(url: string, options: ControlClientOptions = {}) {
    this.url = url;
    this.factory = options.socketFactory ?? defaultFactory;
    this.backoffInitialMs = options.backoffInitialMs ?? 250;
    this.backoffMaxMs = options.backoffMaxMs ?? 5000;
    this.backoffMs = this.backoffInitialMs;
  }

  onFeed(handler: (e: FeedEvent) => void): void {
    this.feedHandlers.push(handler);
  }

  onState(handler: (s: ConnectionState) => void): void {
    this.stateHandlers.push(handler);
  }

  private emitState(state: ConnectionState): void {
    for (const handler of this.stateHandlers) handler(state);
  }

  connect(): Promise<void> {
    this.closedByUser = false;
    this.emitState("connecting");
    return new Promise((resolve, reject) => {
      let settled = false;
      const socket = this.factory(this.url);
      this.socket = socket;
      socket.addEventListener("open", () => {
        settled = true;
        this.backoffMs = this.backoffInitialMs;
        this.emitState("open");
        if (this.subscribed) {
          // re-arm the feed after a reconnect
          void this.call({ cmd: "subscribe" });
        }
        resolve();
      });
      socket.addEventListener("message", (event) => this.handleMessage(String(event.data)));
      socket.addEventListener("close", () => {
        this.failPending("connection closed");
        if (!settled) {
          settled = true;
          reject(new Error("connect failed"));
        }
        this.scheduleReconnect();
      });
      socket.addEventListener("error", () => {
        /* close follows */
      });
    });
  }

  private scheduleReconnect(): void {
    if (this.closedByUser) {
      this.emitState("closed");
      return;
    }
    this.emitState("retrying");
    const delay = this.backoffMs;
    this.backoffMs = Math.min(this.backoffMs * 2, this.backoffMaxMs);
    setTimeout(() => {
      if (!this.closedByUser) this.connect().catch(() => undefined);
    }, delay);
  }

  private handleMessage(data: string): void {
    let parsed: unknown;
    try {
      parsed = JSON.parse(data);
    } catch {
      return;
    }
    const message = parsed as Record<string, unknown>;
    if ("ok" in message) {
      const resolver = this.pending.shift();
      if (resolver) resolver(message as unknown as ControlResponse);
      return;
    }
    if ("event" in message) {
      for (const handler of this.feedHandlers) handler(message as unknown as FeedEvent);
    }
  }

  private failPending(reason: string): void {
    while (this.pending.length) {
      const resolver = this.pending.shift();
      if (resolver) resolver({ ok: false, error: reason });
    }
  }

  call(command: ControlCommand): Promise<ControlResponse> {
    if (!this.socket) return Promise.resolve({ ok: false, error: "not connected" });
    return new Promise((resolve) => {
      this.pending.push(resolve);
      try {
        this.socket!.send(JSON.stringify(command));
      } catch {
        this.pending.pop();
        resolve({ ok: false, error: "send failed" });
      }
    });
  }

  async subscribe(): Promise<ControlResponse> {
    this.subscribed = true;
    return this.call({ cmd: "subscribe" });
  }

  async listSessions(): Promise<SessionSummary[]> {
    const response = await this.call({ cmd: "list_sessions" });
    if (!response.ok) return [];
    return (response.result as SessionSummary[]) ?? [];
  }

  close(): void {
    this.closedByUser = true;
    this.socket?.close();
    this.emitState("closed");
  }
}

// --- steering -------------------------------------------------------------

export interface RuleConfig {
  rule_id?: string;
  phase: "display" | "request" | "confirm_display";
  selector: string;
  action: { set: unknown } | { set_on_trigger: { trigger: string; value: unknown } };
}

export class Steering {
  constructor(private client: ControlClient) {}

  setMode(
    sessionId: string,
    direction: "target_to_server" | "server_to_target",
    mode: "passthrough" | "transform" | "substitute" | "drop",
    clipId?: string,
  ): Promise<ControlResponse> {
    const args: Record<string, unknown> = { direction, mode };
    if (clipId !== undefined) args.clip_id = clipId;
    return this.client.call({ cmd: "set_mode", session_id: sessionId, args });
  }

  setTransformSet(sessionId: string, setId: string, rules?: RuleConfig[]): Promise<ControlResponse> {
    const args: Record<string, unknown> = { transform_set_id: setId };
    if (rules !== undefined) args.rules = rules;
    return this.client.call({ cmd: "set_transform_set", session_id: sessionId, args });
  }

  /**
   * Change one rule's value and re-push the whole named set: the relay only
   * swaps transform sets atomically, so an edit is a set update. Returns the
   * updated rule list alongside the ack so the caller can keep it as state.
   */
  async editRuleValue(
    sessionId: string,
    setId: string,
    rules: RuleConfig[],
    ruleId: string,
    value: unknown,
  ): Promise<{ response: ControlResponse; rules: RuleConfig[] }> {
    const updated = rules.map((rule) => {
      if ((rule.rule_id ?? "") !== ruleId) return rule;
      if ("set_on_trigger" in rule.action) {
        return { ...rule, action: { set_on_trigger: { ...rule.action.set_on_trigger, value } } };
      }
      return { ...rule, action: { set: value } };
    });
    const response = await this.setTransformSet(sessionId, setId, updated);
    return { response, rules: updated };
  }

  injectMessage(
    sessionId: string,
    direction: "target_to_server" | "server_to_target",
    msgKind: string,
    payloadB64: string,
  ): Promise<ControlResponse> {
    return this.client.call({
      cmd: "inject_message",
      session_id: sessionId,
      args: { direction, msg_kind: msgKind, payload: payloadB64, payload_is_b64: true },
    });
  }
}
