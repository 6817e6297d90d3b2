/** DOM wiring for the composition studio. */

import { StudioApi } from "./api.js";
import { StudioStore } from "./store.js";
import type { GalleryEntry } from "./types.js";

const api = new StudioApi(
  (window as unknown as { SERVICE_URL?: string }).SERVICE_URL ?? "",
);
const store = new StudioStore();

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function renderPicker(root: HTMLElement): void {
  const state = store.getState();
  root.replaceChildren();
  if (!state.registry) return;

  store.slotNames().forEach((slot, slotIndex) => {
    const row = el("div", { class: "slot-row" }, el("span", { class: "slot-name" }, slot));
    const current = state.selections[slot];

    for (const option of store.optionsForSlot(slotIndex)) {
      const button = el("button", {
        class: `part ${current === option.token ? "selected" : ""}`,
        title: `${option.token} from ${option.example_id}`,
      });
      const thumb = state.registry!.examples.find((e) => e.example_id === option.example_id)
        ?.thumbnail_url;
      if (thumb && option.mask_url) {
        const wrap = el("span", { class: "overlay" });
        wrap.append(
          el("img", { src: api.absolute(thumb)!, class: "thumb" }),
          el("img", { src: api.absolute(option.mask_url)!, class: "mask" }),
        );
        button.append(wrap);
      }
      button.append(el("span", {}, option.token));
      button.onclick = () => store.selectPart(slot, option.token);
      row.append(button);
    }
    const free = el(
      "button",
      { class: `part free ${current === "free" ? "selected" : ""}` },
      "free",
    );
    free.onclick = () => store.selectPart(slot, "free");
    row.append(free);
    root.append(row);
  });
}

function renderGalleryEntry(entry: GalleryEntry): HTMLElement {
  const card = el("div", { class: "gallery-entry" });
  card.append(el("div", { class: "prompt" }, entry.prompt));
  const strip = el("div", { class: "strip" });
  for (const image of entry.images) {
    const img = el("img", {
      src: api.imageUrl(image.image_id),
      title: `seed ${image.seed}, ${image.steps} steps, guidance ${image.guidance}`,
    });
    strip.append(img);
  }
  card.append(strip);
  const replay = el("button", {}, "replay");
  replay.onclick = () => void store.replay(api, entry);
  card.append(replay);
  return card;
}

function render(): void {
  const state = store.getState();
  renderPicker(document.getElementById("picker")!);

  const preview = document.getElementById("prompt-preview")!;
  preview.textContent = store.promptPreview() ?? "(select parts to build a prompt)";

  const banner = document.getElementById("error-banner")!;
  banner.textContent = state.error ?? "";
  banner.style.display = state.error ? "block" : "none";

  const jobs = document.getElementById("jobs")!;
  jobs.replaceChildren(
    ...state.jobs.map((j) => el("li", {}, `${j.jobId.slice(0, 8)} - ${j.status}`)),
  );

  const gallery = document.getElementById("gallery")!;
  gallery.replaceChildren(...state.gallery.map(renderGalleryEntry));
}

function wireControls(): void {
  const count = document.getElementById("count") as HTMLInputElement;
  const seed = document.getElementById("seed") as HTMLInputElement;
  const steps = document.getElementById("steps") as HTMLInputElement;
  const guidance = document.getElementById("guidance") as HTMLInputElement;
  count.onchange = () => store.setSampler({ count: parseInt(count.value, 10) });
  seed.onchange = () =>
    store.setSampler({ seed: seed.value === "" ? null : parseInt(seed.value, 10) });
  steps.onchange = () => store.setSampler({ steps: parseInt(steps.value, 10) });
  guidance.onchange = () => store.setSampler({ guidance: parseFloat(guidance.value) });

  const compose = document.getElementById("compose") as HTMLButtonElement;
  compose.onclick = () => void store.submitAndPoll(api);
}

export async function start(): Promise<void> {
  store.subscribe(render);
  wireControls();
  await store.loadConcepts(api);
}

if (typeof document !== "undefined" && document.getElementById("picker")) {
  void start();
}
