import type { EntityRow, NucleusEvent } from "../src/types.js";

/**
 * In-memory stand-in for a nucleus admin API, good enough for console
 * tests: system entities, deploy/lifecycle/migrate, and the event log.
 * Two instances can be peered so migration moves rows between them.
 */
export class FakeNucleus {
  addr: string;
  rows = new Map<string, EntityRow>();
  events: NucleusEvent[] = [];
  peersList: string[] = [];
  requireToken?: string;
  down = false;
  private seq = 0;
  private nextId = 1;
  private peersByAddr = new Map<string, FakeNucleus>();

  constructor(addr: string) {
    this.addr = addr;
    for (const name of ["entity-manager", "security", "resource-discovery", "location-discovery"]) {
      const id = `sys:${name}@${addr}`;
      this.rows.set(id, { id, name, kind: "system", state: "RUNNING", home: addr });
    }
  }

  peer(other: FakeNucleus): void {
    this.peersList.push(other.addr);
    this.peersByAddr.set(other.addr, other);
    other.peersList.push(this.addr);
    other.peersByAddr.set(this.addr, this);
  }

  emit(event: string, entity: string, state: string): void {
    this.seq += 1;
    this.events.push({ seq: this.seq, event, entity, state });
  }

  private json(status: number, body: unknown): Response {
    return new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  }

  deploy(manifest: { name?: string; kind?: string }, program: string): Response {
    if (program.includes("dget.terminated")) {
      return this.json(400, { error: "LoadRejected", reason: "handler catches the termination signal" });
    }
    const id = `e${this.nextId++}@${this.addr}`;
    this.rows.set(id, {
      id,
      name: manifest.name ?? "?",
      kind: manifest.kind ?? "DATA_DRIVEN",
      state: "RUNNING",
      home: this.addr,
      usage: { steps: 0 },
    });
    this.emit("shell-state", id, "RUNNING");
    return this.json(201, { id, state: "RUNNING" });
  }

  /** fetch-compatible handler bound to this nucleus. */
  fetchFn = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    if (this.down) throw new TypeError("fetch failed");
    const url = new URL(String(input));
    const method = init?.method ?? "GET";
    const path = url.pathname;
    if (this.requireToken) {
      const headers = (init?.headers ?? {}) as Record<string, string>;
      if (headers["X-DGET-Token"] !== this.requireToken) {
        return this.json(401, { error: "AuthFailed", reason: "missing or bad token" });
      }
    }

    if (method === "GET" && path === "/v1/entities") {
      return this.json(200, { entities: [...this.rows.values()] });
    }
    if (method === "GET" && path === "/v1/peers") {
      return this.json(200, { addr: this.addr, peers: this.peersList });
    }
    if (method === "GET" && path === "/v1/events") {
      const since = Number(url.searchParams.get("since") ?? "0");
      return this.json(200, { events: this.events.filter((e) => e.seq > since) });
    }
    if (method === "POST" && path === "/v1/entities") {
      const body = JSON.parse(String(init?.body));
      return this.deploy(body.manifest ?? {}, body.program ?? "");
    }

    const m = path.match(/^\/v1\/entities\/([^/]+)(?:\/([a-z]+))?$/);
    if (m) {
      const id = decodeURIComponent(m[1]);
      const verb = m[2];
      const row = this.rows.get(id);
      if (!row) return this.json(404, { error: "UnknownEntity", reason: id });
      if (method === "GET" && !verb) return this.json(200, row);
      if (verb === "stop") {
        row.state = "TERMINATED";
        this.emit("shell-state", id, "TERMINATED");
        return this.json(200, { id, state: "TERMINATED" });
      }
      if (verb === "suspend" || verb === "resume") {
        row.state = verb === "suspend" ? "SUSPENDED" : "RUNNING";
        this.emit("shell-state", id, row.state);
        return this.json(200, { id, state: row.state });
      }
      if (verb === "migrate") {
        const target = JSON.parse(String(init?.body)).target as string;
        const dest = this.peersByAddr.get(target);
        if (!dest) return this.json(502, { error: "Unreachable", reason: target });
        dest.rows.set(id, { ...row, state: "RUNNING", home: dest.addr });
        dest.emit("shell-state", id, "RUNNING");
        this.rows.get(id)!.state = "TERMINATED";
        this.emit("migrated", id, "TERMINATED");
        return this.json(200, { id, target });
      }
    }
    return this.json(404, { error: "NotFound", reason: path });
  };
}
