import { AdminClient, subscribeEvents } from "./api.js";
import { renderLauncher, renderViewer, showLaunchError } from "./render.js";
import { ConsoleStore } from "./store.js";
import type { EntityAction } from "./types.js";

/**
 * Wire the console together against one admin API base address.
 * Exported (rather than run at import time) so tests can drive it
 * against a mocked fetch.
 */
export async function startConsole(
  root: HTMLElement,
  base: string,
  opts: { token?: string; fetchFn?: typeof fetch; pollMs?: number } = {},
): Promise<{ store: ConsoleStore; client: AdminClient; close: () => void }> {
  const client = new AdminClient(base, opts);
  const store = new ConsoleStore(base);

  const viewer = document.createElement("div");
  viewer.id = "viewer";
  const launcher = document.createElement("div");
  launcher.id = "launcher";
  root.append(viewer, launcher);

  let peers: string[] = [];

  const draw = () => {
    renderViewer(viewer, store, {
      peers,
      onAction: (id: string, action: EntityAction) => {
        // fire the request; the row changes only on the confirming event
        void client.action(id, action);
      },
      onMigrate: (id: string, target: string) => {
        void client.migrate(id, target);
      },
    });
  };
  store.onChange(draw);

  renderLauncher(launcher, (manifestText, programText) => {
    let manifest: unknown;
    try {
      manifest = JSON.parse(manifestText);
    } catch {
      showLaunchError(launcher, "manifest is not valid JSON");
      return;
    }
    void client.deploy(manifest, programText).then((res) => {
      if (!res.ok) {
        showLaunchError(launcher, `${res.error}: ${res.reason ?? ""}`);
      } else {
        showLaunchError(launcher, "");
      }
    });
  });

  const resync = async () => {
    const [entities, events] = await Promise.all([
      client.listEntities(),
      client.eventsSince(0),
    ]);
    const lastSeq = events.length ? events[events.length - 1].seq : 0;
    store.resync(entities, lastSeq);
    peers = await client.peers().catch(() => []);
    draw();
  };
  await resync();

  let wasConnected = true;
  const unsubscribe = subscribeEvents(
    client,
    {
      onEvent: (e) => store.applyEvent(e),
      onStatus: (status) => {
        store.setStatus(status);
        if (status === "CONNECTED" && !wasConnected) {
          // a reconnect may have missed events: full resync first
          void resync();
        }
        wasConnected = status === "CONNECTED";
      },
    },
    { pollMs: opts.pollMs, since: store.connection.lastSeq },
  );

  return { store, client, close: unsubscribe };
}
