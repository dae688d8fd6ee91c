// @vitest-environment jsdom
import { afterEach, describe, expect, it } from "vitest";

import { startConsole } from "../src/main.js";
import { replay } from "../src/store.js";
import { FakeNucleus } from "./fake_nucleus.js";

const POLL = 15;
const cleanups: Array<() => void> = [];

afterEach(() => {
  while (cleanups.length) cleanups.pop()!();
  document.body.textContent = "";
});

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function until(check: () => boolean, timeoutMs = 2000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (check()) return;
    await sleep(POLL);
  }
  throw new Error("condition never became true");
}

async function openConsole(nucleus: FakeNucleus) {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const handle = await startConsole(root, `http://${nucleus.addr}`, {
    fetchFn: nucleus.fetchFn,
    pollMs: POLL,
  });
  cleanups.push(handle.close);
  return { root, ...handle };
}

function rowStates(root: HTMLElement): Record<string, string> {
  const out: Record<string, string> = {};
  for (const tr of root.querySelectorAll("tr[data-id]")) {
    out[tr.getAttribute("data-id")!] = tr.getAttribute("data-state")!;
  }
  return out;
}

function pair() {
  const a = new FakeNucleus("n-a:8500");
  const b = new FakeNucleus("n-b:8500");
  a.peer(b);
  return { a, b };
}

describe("console against a two-nucleus harness", () => {
  it("lists the four system entities on a fresh nucleus", async () => {
    const { a } = pair();
    const { root } = await openConsole(a);
    const ids = Object.keys(rowStates(root));
    expect(ids.filter((id) => id.startsWith("sys:"))).toHaveLength(4);
  });

  it("launcher deploys an entity and the row appears without a manual refresh", async () => {
    const { a } = pair();
    const { root } = await openConsole(a);
    const form = root.querySelector("form.launcher")!;
    const [manifest, program] = form.querySelectorAll("textarea");
    manifest.value = JSON.stringify({ name: "counter", owner: "alice@grid" });
    program.value = ".program counter\n.entry main\n.method main 0 0\n  RET\n.end";
    form.dispatchEvent(new Event("submit", { cancelable: true }));

    await until(() => rowStates(root)["e1@n-a:8500"] === "RUNNING");
  });

  it("launcher shows a server rejection verbatim and deploys nothing", async () => {
    const { a } = pair();
    const { root } = await openConsole(a);
    const form = root.querySelector("form.launcher")!;
    const [manifest, program] = form.querySelectorAll("textarea");
    manifest.value = JSON.stringify({ name: "bad", owner: "alice@grid" });
    program.value = ".handler 0 1 1 dget.terminated";
    form.dispatchEvent(new Event("submit", { cancelable: true }));

    await until(() =>
      (root.querySelector(".launch-error")!.textContent ?? "").includes("LoadRejected"),
    );
    expect(Object.keys(rowStates(root)).some((id) => id.startsWith("e"))).toBe(false);
  });

  it("STOP updates the row only after the confirming event", async () => {
    const { a } = pair();
    a.deploy({ name: "counter" }, "RET");
    const { root } = await openConsole(a);
    const id = "e1@n-a:8500";
    await until(() => rowStates(root)[id] === "RUNNING");

    const btn = root.querySelector(`tr[data-id="${id}"] button[data-action="stop"]`)!;
    (btn as HTMLButtonElement).click();
    await until(() => rowStates(root)[id] === "TERMINATED");
  });

  it("MIGRATE moves the row to the peer; a console on the peer sees it", async () => {
    const { a, b } = pair();
    a.deploy({ name: "mover" }, "RET");
    const viewA = await openConsole(a);
    const viewB = await openConsole(b);
    const id = "e1@n-a:8500";
    await until(() => rowStates(viewA.root)[id] === "RUNNING");

    const btn = viewA.root.querySelector(
      `tr[data-id="${id}"] button[data-action="migrate"]`,
    )!;
    (btn as HTMLButtonElement).click();

    await until(() => rowStates(viewA.root)[id] === "TERMINATED");
    await until(() => rowStates(viewB.root)[id] === "RUNNING");
  });

  it("migrate is disabled with no peers available", async () => {
    const lone = new FakeNucleus("n-c:8500");
    const { root } = await openConsole(lone);
    const btn = root.querySelector('button[data-action="migrate"]')!;
    expect((btn as HTMLButtonElement).disabled).toBe(true);
    expect(btn.getAttribute("title")).toContain("no peers");
  });

  it("API outage shows the RECONNECTING banner, then resyncs on recovery", async () => {
    const { a } = pair();
    const { root } = await openConsole(a);
    a.down = true;
    await until(() =>
      root.querySelector(".banner")!.getAttribute("data-status") === "RECONNECTING",
    );

    a.deploy({ name: "missed" }, "RET"); // happens while the console is blind
    a.down = false;
    await until(() => rowStates(root)["e1@n-a:8500"] === "RUNNING");
    await until(() =>
      root.querySelector(".banner")!.getAttribute("data-status") === "CONNECTED",
    );
  });

  it("replaying the recorded event stream reproduces the final table", async () => {
    const { a, b } = pair();
    const { root, store, client } = await openConsole(a);
    await client.deploy({ name: "one" }, "RET");
    await client.deploy({ name: "two" }, "RET");
    await until(() => rowStates(root)["e2@n-a:8500"] === "RUNNING");
    await client.action("e1@n-a:8500", "suspend");
    await client.migrate("e2@n-a:8500", b.addr);
    await until(() => rowStates(root)["e2@n-a:8500"] === "TERMINATED");

    const baseline = [...a.rows.values()].map((r) => ({
      ...r,
      state: "RUNNING" as const,
    }));
    // rebuild from the post-resync listing (all RUNNING system rows, no
    // deployments) plus the recorded events; must match the live table
    const fromScratch = replay(
      baseline.filter((r) => r.kind === "system"),
      store.applied,
    );
    const live = store.table();
    expect(fromScratch.map((r) => [r.id, r.state])).toEqual(
      live.map((r) => [r.id, r.state]),
    );
  });
});
