/* Test plumbing: spawn a live relay, speak its data-plane framing, and
 * adapt the ws package to the console's socket interface. */

import { spawn, type ChildProcess } from "node:child_process";
import net from "node:net";
import path from "node:path";
import { fileURLToPath } from "node:url";
import WebSocket from "ws";

import type { SocketFactory, SocketLike } from "../src/protocol.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
export const REPO_ROOT = path.resolve(HERE, "..", "..");

export const wsFactory: SocketFactory = (url) => new WebSocket(url) as unknown as SocketLike;

export function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = net.createServer();
    server.listen(0, "127.0.0.1", () => {
      const address = server.address();
      if (address && typeof address === "object") {
        const port = address.port;
        server.close(() => resolve(port));
      } else {
        server.close(() => reject(new Error("no port")));
      }
    });
  });
}

export interface RelayHandle {
  proc: ChildProcess;
  dataPort: number;
  controlPort: number;
  controlUrl: string;
  logPath: string;
  stop(): Promise<void>;
}

export async function startRelay(configExtra: Record<string, unknown> = {}, logPath = ""): Promise<RelayHandle> {
  const dataPort = await freePort();
  const controlPort = await freePort();
  const config = {
    host: "127.0.0.1",
    data_port: dataPort,
    control_port: controlPort,
    delay: { min_s: 0.4, max_s: 0.6 },
    seed: 11,
    ...(logPath ? { log_path: logPath } : {}),
    ...configExtra,
  };
  const fs = await import("node:fs/promises");
  const os = await import("node:os");
  const dir = await fs.mkdtemp(path.join(os.tmpdir(), "console-relay-"));
  const configPath = path.join(dir, "relay.json");
  await fs.writeFile(configPath, JSON.stringify(config));
  const proc = spawn("python3", ["-m", "inceptsim.cli", "serve", configPath], {
    cwd: REPO_ROOT,
    stdio: ["ignore", "pipe", "pipe"],
  });
  proc.stderr?.on("data", (chunk) => process.stderr.write(`[relay] ${chunk}`));
  await waitForPort(controlPort);
  return {
    proc,
    dataPort,
    controlPort,
    controlUrl: `ws://127.0.0.1:${controlPort}`,
    logPath,
    stop: () =>
      new Promise((resolve) => {
        proc.once("exit", () => resolve());
        proc.kill("SIGTERM");
        setTimeout(() => proc.kill("SIGKILL"), 5000).unref();
      }),
  };
}

async function waitForPort(port: number, timeoutMs = 15000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    const up = await new Promise<boolean>((resolve) => {
      const socket = net.connect(port, "127.0.0.1");
      socket.once("connect", () => {
        socket.destroy();
        resolve(true);
      });
      socket.once("error", () => resolve(false));
    });
    if (up) return;
    await sleep(100);
  }
  throw new Error(`port ${port} never came up`);
}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Data-plane endpoint stub speaking the 4-byte length-prefixed JSON framing. */
export class EndpointStub {
  private socket: net.Socket;
  private buffer = Buffer.alloc(0);
  readonly received: Array<Record<string, unknown>> = [];

  private constructor(socket: net.Socket) {
    this.socket = socket;
    socket.on("data", (chunk) => {
      this.buffer = Buffer.concat([this.buffer, chunk]);
      for (;;) {
        if (this.buffer.length < 4) return;
        const length = this.buffer.readUInt32BE(0);
        if (this.buffer.length < 4 + length) return;
        const body = this.buffer.subarray(4, 4 + length).toString("utf-8");
        this.buffer = this.buffer.subarray(4 + length);
        this.received.push(JSON.parse(body));
      }
    });
  }

  static async connect(port: number, sessionId: string, side: "target" | "server"): Promise<EndpointStub> {
    const socket = await new Promise<net.Socket>((resolve, reject) => {
      const s = net.connect(port, "127.0.0.1", () => resolve(s));
      s.once("error", reject);
    });
    const stub = new EndpointStub(socket);
    stub.send({ hello: { session_id: sessionId, side } });
    return stub;
  }

  send(obj: Record<string, unknown>): void {
    const body = Buffer.from(JSON.stringify(obj), "utf-8");
    const frame = Buffer.alloc(4 + body.length);
    frame.writeUInt32BE(body.length, 0);
    body.copy(frame, 4);
    this.socket.write(frame);
  }

  close(): void {
    this.socket.destroy();
  }
}
