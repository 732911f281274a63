// Browser glue: fetch the bundle (static files only), render the gallery,
// route keyboard commands, and save decisions back as a manifest download
// (or in place via the File System Access API where the browser offers it).

import { parsePgm, toRgba } from "./pgm.js";
import { loadBundle, TriageSession } from "./session.js";

const params = new URLSearchParams(window.location.search);
const bundleDir = params.get("bundle") ?? "bundle";

let session: TriageSession | null = null;
const images = new Map<string, ImageData>();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function fetchBundle(): Promise<void> {
  const manifestResp = await fetch(`${bundleDir}/manifest.jsonl`);
  if (!manifestResp.ok) throw new Error(`cannot load ${bundleDir}/manifest.jsonl`);
  const text = await manifestResp.text();
  // discover images by probing each record's reference
  const names = new Set<string>();
  const rows = text.split("\n").filter((l) => l.trim());
  for (const line of rows) {
    const row = JSON.parse(line);
    if (!row.image) continue;
    const resp = await fetch(`${bundleDir}/${row.image}`);
    if (resp.ok) {
      names.add(row.image);
      const img = parsePgm(new Uint8Array(await resp.arrayBuffer()));
      images.set(row.image, new ImageData(toRgba(img), img.width, img.height));
    }
  }
  session = loadBundle(text, names);
  render();
}

function render(): void {
  if (!session) return;
  const rec = session.current;
  const status = el<HTMLDivElement>("status");
  status.textContent = `${session.reviewedCount()}/${session.records.length} reviewed`;
  const strip = el<HTMLDivElement>("strip");
  strip.innerHTML = "";
  session.records.forEach((r, i) => {
    const dot = document.createElement("span");
    dot.className = `dot ${r.decision} ${i === session!.cursor ? "cursor" : ""}`;
    dot.title = r.id;
    strip.appendChild(dot);
  });
  if (!rec) return;
  el<HTMLDivElement>("meta").innerHTML =
    `<b>${rec.id}</b> &nbsp; patch ${rec.patch} &nbsp; step ${rec.time_step}` +
    ` &nbsp; JM ${rec.jm_value === null ? "–" : rec.jm_value.toFixed(3)}` +
    ` &nbsp; <span class="cat ${rec.category}">${rec.category}</span>` +
    ` <small>(${rec.category_source}${rec.decision !== "unreviewed" ? ", " + rec.decision : ""})</small>`;
  const canvas = el<HTMLCanvasElement>("view");
  const data = images.get(rec.image);
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  if (data) {
    canvas.width = data.width;
    canvas.height = data.height;
    ctx.putImageData(data, 0, 0);
  } else {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
  }
}

async function save(): Promise<void> {
  if (!session) return;
  const text = session.save();
  const blob = new Blob([text], { type: "application/jsonl" });
  const anyWindow = window as unknown as {
    showSaveFilePicker?: (opts: object) => Promise<FileSystemFileHandle>;
  };
  if (anyWindow.showSaveFilePicker) {
    try {
      const handle = await anyWindow.showSaveFilePicker({
        suggestedName: "manifest.jsonl",
      });
      const writable = await (handle as unknown as {
        createWritable: () => Promise<{ write(b: Blob): Promise<void>; close(): Promise<void> }>;
      }).createWritable();
      await writable.write(blob);
      await writable.close();
      return;
    } catch {
      // fall through to download on cancel/denial
    }
  }
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "manifest.jsonl";
  a.click();
  URL.revokeObjectURL(a.href);
}

document.addEventListener("keydown", (ev) => {
  if (!session || !session.current) return;
  const id = session.current.id;
  switch (ev.key) {
    case "a": session.accept(id); session.advance(1); break;
    case "f": session.flip(id); session.advance(1); break;
    case "u": session.undo(id); break;
    case "A": session.acceptRemaining(); break;
    case "ArrowRight": case "j": session.advance(1); break;
    case "ArrowLeft": case "k": case "b": session.advance(-1); break;
    case "s": void save(); return;
    default: return;
  }
  ev.preventDefault();
  render();
});

el<HTMLButtonElement>("save").addEventListener("click", () => void save());
el<HTMLButtonElement>("accept-rest").addEventListener("click", () => {
  session?.acceptRemaining();
  render();
});

fetchBundle().catch((err) => {
  el<HTMLDivElement>("meta").textContent = String(err);
});
