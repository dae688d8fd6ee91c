// Shared shapes for the console. These mirror the nucleus admin API
// responses; the console never invents state of its own.

export type ShellState =
  | "LOADED"
  | "RUNNING"
  | "SUSPENDED"
  | "TERMINATED";

export interface EntityRow {
  id: string;
  name: string;
  kind: string;
  state: ShellState;
  owner?: string;
  home?: string;
  usage?: Record<string, number>;
  limits?: Record<string, number>;
}

export interface NucleusEvent {
  seq: number;
  event: string; // "shell-state" | "migrated" | "fault" | ...
  entity: string;
  state: string;
  [extra: string]: unknown;
}

export type StreamStatus = "CONNECTED" | "RECONNECTING";

export interface ConnectionState {
  base: string;
  status: StreamStatus;
  lastSeq: number;
}

export interface LaunchResult {
  ok: boolean;
  id?: string;
  error?: string;
  reason?: string;
}

export type EntityAction = "stop" | "suspend" | "resume";
