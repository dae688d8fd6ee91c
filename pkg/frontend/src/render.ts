import type { ConsoleStore } from "./store.js";
import type { EntityAction, EntityRow } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

function usageText(row: EntityRow): string {
  const usage = row.usage ?? {};
  const limits = row.limits ?? {};
  const parts = Object.keys({ ...usage, ...limits }).sort().map((k) => {
    const lim = limits[k];
    return `${k}=${usage[k] ?? 0}${lim !== undefined ? `/${lim}` : ""}`;
  });
  return parts.join(" ");
}

/** Entity viewer tab: the live table plus per-row actions. */
export function renderViewer(
  root: HTMLElement,
  store: ConsoleStore,
  handlers: {
    onAction: (id: string, action: EntityAction) => void;
    onMigrate: (id: string, target: string) => void;
    peers: string[];
  },
): void {
  root.textContent = "";

  const banner = el("div", { class: "banner", "data-status": store.connection.status });
  banner.textContent =
    store.connection.status === "CONNECTED"
      ? `connected to ${store.connection.base}`
      : `reconnecting to ${store.connection.base} — rows may be stale`;
  root.appendChild(banner);

  const table = el("table", { class: "entities" });
  const head = el("tr");
  for (const col of ["ID", "NAME", "KIND", "STATE", "USAGE", "HOME", "ACTIONS"]) {
    head.appendChild(el("th", {}, col));
  }
  table.appendChild(head);

  for (const row of store.table()) {
    const tr = el("tr", { "data-id": row.id, "data-state": row.state });
    tr.appendChild(el("td", {}, row.id));
    tr.appendChild(el("td", {}, row.name));
    tr.appendChild(el("td", {}, row.kind));
    tr.appendChild(el("td", { class: "state" }, row.state));
    tr.appendChild(el("td", {}, usageText(row)));
    tr.appendChild(el("td", {}, row.home ?? ""));

    const actions = el("td", { class: "actions" });
    const terminal = row.state === "TERMINATED";
    for (const action of ["stop", "suspend", "resume"] as EntityAction[]) {
      const btn = el("button", { "data-action": action }, action);
      btn.disabled = terminal || row.kind === "system";
      btn.onclick = () => handlers.onAction(row.id, action);
      actions.appendChild(btn);
    }
    const migrate = el("button", { "data-action": "migrate" }, "migrate");
    if (handlers.peers.length === 0) {
      migrate.disabled = true;
      migrate.title = "no peers available";
    } else {
      migrate.disabled = terminal || row.kind === "system";
      migrate.onclick = () => handlers.onMigrate(row.id, handlers.peers[0]);
    }
    actions.appendChild(migrate);
    tr.appendChild(actions);
    table.appendChild(tr);
  }
  root.appendChild(table);
}

/** Entity launcher tab: manifest + program text, submit, server errors. */
export function renderLauncher(
  root: HTMLElement,
  onSubmit: (manifestText: string, programText: string) => void,
): void {
  root.textContent = "";
  const form = el("form", { class: "launcher" });
  const manifest = el("textarea", { name: "manifest", placeholder: "manifest JSON" });
  const program = el("textarea", { name: "program", placeholder: "program text" });
  const submit = el("button", { type: "submit" }, "launch");
  const error = el("div", { class: "launch-error" });
  form.append(manifest, program, submit, error);
  form.onsubmit = (ev) => {
    ev.preventDefault();
    if (!manifest.value.trim() || !program.value.trim()) {
      error.textContent = "manifest and program are both required";
      return;
    }
    onSubmit(manifest.value, program.value);
  };
  root.appendChild(form);
}

export function showLaunchError(root: HTMLElement, message: string): void {
  const box = root.querySelector(".launch-error");
  if (box) box.textContent = message;
}
