import type { EntityAction, EntityRow, LaunchResult, NucleusEvent } from "./types.js";

/** Thin client for the nucleus admin HTTP API. */
export class AdminClient {
  base: string;
  token?: string;
  fetchFn: typeof fetch;

  constructor(base: string, opts: { token?: string; fetchFn?: typeof fetch } = {}) {
    this.base = base.replace(/\/+$/, "");
    this.token = opts.token;
    this.fetchFn = opts.fetchFn ?? fetch.bind(globalThis);
  }

  private headers(): Record<string, string> {
    const h: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) h["X-DGET-Token"] = this.token;
    return h;
  }

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    return this.fetchFn(`${this.base}${path}`, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  async listEntities(): Promise<EntityRow[]> {
    const r = await this.request("GET", "/v1/entities");
    if (!r.ok) throw new Error(`list failed: ${r.status}`);
    const obj = await r.json();
    return obj.entities as EntityRow[];
  }

  async getEntity(id: string): Promise<EntityRow> {
    const r = await this.request("GET", `/v1/entities/${encodeURIComponent(id)}`);
    if (!r.ok) throw new Error(`detail failed: ${r.status}`);
    return (await r.json()) as EntityRow;
  }

  async peers(): Promise<string[]> {
    const r = await this.request("GET", "/v1/peers");
    if (!r.ok) throw new Error(`peers failed: ${r.status}`);
    return (await r.json()).peers as string[];
  }

  async deploy(manifest: unknown, program: string): Promise<LaunchResult> {
    const r = await this.request("POST", "/v1/entities", { manifest, program });
    const obj = await r.json().catch(() => ({}));
    if (r.status === 201) return { ok: true, id: obj.id };
    return { ok: false, error: obj.error ?? `HTTP ${r.status}`, reason: obj.reason };
  }

  async action(id: string, action: EntityAction): Promise<LaunchResult> {
    const r = await this.request("POST", `/v1/entities/${encodeURIComponent(id)}/${action}`);
    const obj = await r.json().catch(() => ({}));
    if (r.ok) return { ok: true, id };
    return { ok: false, error: obj.error ?? `HTTP ${r.status}`, reason: obj.reason };
  }

  async migrate(id: string, target: string): Promise<LaunchResult> {
    const r = await this.request(
      "POST",
      `/v1/entities/${encodeURIComponent(id)}/migrate`,
      { target },
    );
    const obj = await r.json().catch(() => ({}));
    if (r.ok) return { ok: true, id };
    return { ok: false, error: obj.error ?? `HTTP ${r.status}`, reason: obj.reason };
  }

  /** Poll the event log for entries newer than `since`. */
  async eventsSince(since: number): Promise<NucleusEvent[]> {
    const r = await this.request("GET", `/v1/events?since=${since}`);
    if (!r.ok) throw new Error(`events failed: ${r.status}`);
    return (await r.json()).events as NucleusEvent[];
  }
}

export interface EventStreamHandlers {
  onEvent: (e: NucleusEvent) => void;
  onStatus: (status: "CONNECTED" | "RECONNECTING") => void;
}

/**
 * Event subscription with a polling fallback. Browsers get a live
 * `EventSource`; test environments (and proxies that buffer SSE) fall
 * back to polling /v1/events.
 */
export function subscribeEvents(
  client: AdminClient,
  handlers: EventStreamHandlers,
  opts: { pollMs?: number; since?: number } = {},
): () => void {
  let lastSeq = opts.since ?? 0;
  let stopped = false;

  if (typeof EventSource !== "undefined") {
    // the nucleus switches to SSE framing on the Accept header, which
    // EventSource sends automatically
    const es = new EventSource(`${client.base}/v1/events?since=${lastSeq}`);
    es.onopen = () => handlers.onStatus("CONNECTED");
    es.onerror = () => handlers.onStatus("RECONNECTING");
    es.onmessage = (msg) => {
      const e = JSON.parse(msg.data) as NucleusEvent;
      if (e.seq > lastSeq) {
        lastSeq = e.seq;
        handlers.onEvent(e);
      }
    };
    return () => es.close();
  }

  const pollMs = opts.pollMs ?? 500;
  const tick = async () => {
    if (stopped) return;
    try {
      const events = await client.eventsSince(lastSeq);
      handlers.onStatus("CONNECTED");
      for (const e of events) {
        if (e.seq > lastSeq) {
          lastSeq = e.seq;
          handlers.onEvent(e);
        }
      }
    } catch {
      handlers.onStatus("RECONNECTING");
    }
    if (!stopped) setTimeout(tick, pollMs);
  };
  void tick();
  return () => {
    stopped = true;
  };
}
