/*
 * Browser entry point: render the store into plain DOM and wire the
 * steering controls. All mutations go through acknowledged control
 * commands; the view itself never invents state.
 */

import { ControlClient, Steering, type RuleConfig } from "./protocol.js";
import { ConsoleStore, sparkline } from "./state.js";

const params = new URLSearchParams(window.location.search);
const controlUrl = params.get("control") ?? "ws://127.0.0.1:8751";

const store = new ConsoleStore();
const client = new ControlClient(controlUrl);
const steering = new Steering(client);

// Rule sets the operator has pushed, kept so EditRuleValue can re-push.
const ruleSets = new Map<string, RuleConfig[]>();

client.onState((state) => store.setConnection(state));
client.onFeed((event) => store.applyFeed(event));

async function bootstrap(): Promise<void> {
  try {
    await client.connect();
  } catch {
    return; // the client retries with backoff; the banner shows it
  }
  await client.subscribe();
  store.applySessionList(await client.listSessions());
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderBanner(root: HTMLElement): void {
  const banner = el("div", `banner banner-${store.state.connection}`);
  banner.textContent =
    store.state.connection === "open"
      ? `connected to ${controlUrl}`
      : `relay ${store.state.connection}... (auto-retry)`;
  root.appendChild(banner);
}

function modeSelect(sessionId: string, direction: "target_to_server" | "server_to_target", current: string): HTMLElement {
  const select = document.createElement("select");
  for (const mode of ["passthrough", "transform", "substitute", "drop"]) {
    const option = document.createElement("option");
    option.value = mode;
    option.textContent = `${direction}: ${mode}`;
    option.selected = mode === current;
    select.appendChild(option);
  }
  select.addEventListener("change", async () => {
    const mode = select.value as "passthrough" | "transform" | "substitute" | "drop";
    const response = await steering.setMode(sessionId, direction, mode);
    if (response.ok) {
      store.recordMode(sessionId, direction, mode);
      store.markAck(sessionId, `set_mode ${direction}=${mode}`);
    } else {
      alert(response.error ?? "set_mode failed");
    }
  });
  return select;
}

function ruleEditor(sessionId: string): HTMLElement {
  const wrap = el("div", "rule-editor");
  const setInput = document.createElement("input");
  setInput.placeholder = "transform set id";
  const selectorInput = document.createElement("input");
  selectorInput.placeholder = "selector (a.b.c)";
  const valueInput = document.createElement("input");
  valueInput.placeholder = "new value";
  const button = el("button", "", "edit rule value");
  button.addEventListener("click", async () => {
    const setId = setInput.value || "console_set";
    const rules = ruleSets.get(setId) ?? [
      { rule_id: "console_rule", phase: "display", selector: selectorInput.value, action: { set: "" } },
    ];
    const { response, rules: updated } = await steering.editRuleValue(
      sessionId,
      setId,
      rules,
      rules[0].rule_id ?? "console_rule",
      valueInput.value,
    );
    if (response.ok) {
      ruleSets.set(setId, updated);
      store.markAck(sessionId, `edit ${setId}:${selectorInput.value}=${valueInput.value}`);
    } else {
      alert(response.error ?? "edit failed");
    }
  });
  wrap.append(setInput, selectorInput, valueInput, button);
  return wrap;
}

function injectControls(sessionId: string): HTMLElement {
  const wrap = el("div", "inject");
  const input = document.createElement("input");
  input.placeholder = "inject payload (text)";
  const button = el("button", "", "inject");
  button.addEventListener("click", async () => {
    const response = await steering.injectMessage(
      sessionId,
      "server_to_target",
      "audio_frame",
      btoa(input.value),
    );
    if (response.ok) store.markAck(sessionId, "inject_message");
    else alert(response.error ?? "inject failed");
  });
  wrap.append(input, button);
  return wrap;
}

function render(): void {
  const root = document.getElementById("app");
  if (!root) return;
  root.textContent = "";
  renderBanner(root);
  for (const view of store.state.sessions.values()) {
    const card = el("section", "session-card");
    card.appendChild(el("h2", "", view.sessionId));
    card.appendChild(
      el(
        "div",
        "modes",
        `t→s ${view.modes.target_to_server} | s→t ${view.modes.server_to_target}` +
          (view.transformSetId ? ` | set ${view.transformSetId}` : ""),
      ),
    );
    card.appendChild(el("div", "sparkline", `latency ${sparkline(view.latencies)}`));
    if (view.gaps.length) {
      card.appendChild(el("div", "gaps", `${view.gaps.length} gap events`));
    }
    card.appendChild(modeSelect(view.sessionId, "target_to_server", view.modes.target_to_server));
    card.appendChild(modeSelect(view.sessionId, "server_to_target", view.modes.server_to_target));
    card.appendChild(ruleEditor(view.sessionId));
    card.appendChild(injectControls(view.sessionId));
    const feed = el("ol", "feed");
    const markerAt = new Map(view.ackMarkers.map((m) => [m.afterFeedIndex, m.label]));
    const baseIndex = view.feedTotal - view.feed.length;
    view.feed.forEach((entry, i) => {
      const total = baseIndex + i;
      const markerLabel = markerAt.get(total);
      if (markerLabel) feed.appendChild(el("li", "marker", `— ${markerLabel} applies below —`));
      const line = `#${entry.seq} ${entry.direction} ${entry.kind}` +
        (entry.latency_s !== null ? ` ${entry.latency_s.toFixed(3)}s` : "") +
        (entry.injected ? " [injected]" : "") +
        ` ${entry.preview}`;
      feed.appendChild(el("li", entry.injected ? "injected" : "", line));
    });
    card.appendChild(feed);
    root.appendChild(card);
  }
}

store.subscribe(render);
void bootstrap();
render();
