import type { ConnectionState, EntityRow, NucleusEvent, StreamStatus } from "./types.js";

/**
 * Server-authoritative table state. Rows change only through a full
 * resync (GET /v1/entities) or an in-order event from the nucleus;
 * nothing in the UI mutates a row optimistically.
 */
export class ConsoleStore {
  rows = new Map<string, EntityRow>();
  connection: ConnectionState;
  /** events applied since the last resync, for replay checks */
  applied: NucleusEvent[] = [];
  private listeners: Array<() => void> = [];

  constructor(base: string) {
    this.connection = { base, status: "RECONNECTING", lastSeq: 0 };
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  setStatus(status: StreamStatus): void {
    if (this.connection.status !== status) {
      this.connection.status = status;
      this.notify();
    }
  }

  /** Replace the table with a server listing (reconnect / initial load). */
  resync(entities: EntityRow[], lastSeq: number): void {
    this.rows = new Map(entities.map((e) => [e.id, { ...e }]));
    this.connection.lastSeq = lastSeq;
    this.applied = [];
    this.notify();
  }

  /**
   * Apply one event. Out-of-order or stale sequence numbers are
   * rejected so a resync is never undone by a late delivery.
   */
  applyEvent(e: NucleusEvent): boolean {
    if (e.seq <= this.connection.lastSeq) return false;
    this.connection.lastSeq = e.seq;
    this.applied.push(e);
    const row = this.rows.get(e.entity);
    if (e.event === "migrated") {
      // the entity now lives elsewhere; the source row is terminal
      if (row) row.state = "TERMINATED";
    } else if (row) {
      row.state = e.state as EntityRow["state"];
    } else {
      // an entity this table has never listed: show what the event tells us
      this.rows.set(e.entity, {
        id: e.entity,
        name: (e.name as string) ?? "?",
        kind: (e.kind as string) ?? "?",
        state: e.state as EntityRow["state"],
      });
    }
    this.notify();
    return true;
  }

  table(): EntityRow[] {
    return [...this.rows.values()].sort((a, b) => a.id.localeCompare(b.id));
  }
}

/**
 * Replay a recorded event stream over a base listing. Used to check
 * that the live table is a pure function of (resync, event prefix).
 */
export function replay(
  base: EntityRow[],
  events: NucleusEvent[],
  baseSeq = 0,
): EntityRow[] {
  const store = new ConsoleStore("replay");
  store.resync(base.map((e) => ({ ...e })), baseSeq);
  for (const e of events) store.applyEvent(e);
  return store.table();
}
