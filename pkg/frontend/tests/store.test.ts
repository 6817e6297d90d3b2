import { beforeEach, describe, expect, it, vi } from "vitest";

import type { StudioApi } from "../src/api.js";
import { StudioStore } from "../src/store.js";
import type { ComposeReply, ConceptsResponse, JobReply } from "../src/types.js";

const REGISTRY: ConceptsResponse = {
  category: "object",
  examples: [
    {
      example_id: "example_01",
      category: "object",
      thumbnail_url: "/thumbnails/example_01",
      slots: [
        { slot: "part1", token: "<v1>", mask_url: "/thumbnails/example_01/part1" },
        { slot: "part2", token: "<v2>", mask_url: "/thumbnails/example_01/part2" },
      ],
    },
    {
      example_id: "example_02",
      category: "object",
      thumbnail_url: "/thumbnails/example_02",
      slots: [
        { slot: "part1", token: "<v3>", mask_url: "/thumbnails/example_02/part1" },
        { slot: "part2", token: "<v4>", mask_url: "/thumbnails/example_02/part2" },
      ],
    },
  ],
  tokens: ["<v1>", "<v2>", "<v3>", "<v4>"],
  background_tokens: [],
};

function fakeApi(overrides: Partial<Record<keyof StudioApi, unknown>> = {}): StudioApi {
  const doneReply: JobReply = {
    job_id: "j1",
    status: "done",
    prompt: "A photo of a partial object with <v1>, on a clean white background.",
    image_ids: ["j1_000"],
    images: [
      {
        image_id: "j1_000",
        prompt: "A photo of a partial object with <v1>, on a clean white background.",
        seed: 0,
        steps: 2,
        guidance: 7.5,
        selections: { part1: "<v1>" },
      },
    ],
    error: null,
  };
  const submitReply: ComposeReply = {
    job_id: "j1",
    status: "queued",
    prompt: "A photo of a partial object with <v1>, on a clean white background.",
  };
  return {
    concepts: vi.fn(async () => REGISTRY),
    compose: vi.fn(async () => submitReply),
    job: vi.fn(async () => doneReply),
    imageUrl: (id: string) => `/images/${id}`,
    imageBytes: vi.fn(),
    absolute: (p: string | null) => p,
    ...overrides,
  } as unknown as StudioApi;
}

describe("StudioStore", () => {
  let store: StudioStore;

  beforeEach(async () => {
    store = new StudioStore();
    await store.loadConcepts(fakeApi());
  });

  it("initializes every slot to free", () => {
    expect(store.getState().selections).toEqual({ part1: "free", part2: "free" });
    expect(store.promptPreview()).toBeNull();
  });

  it("offers each example's part positionally per slot", () => {
    expect(store.optionsForSlot(0).map((o) => o.token)).toEqual(["<v1>", "<v3>"]);
    expect(store.optionsForSlot(1).map((o) => o.token)).toEqual(["<v2>", "<v4>"]);
  });

  it("accepts cross-example selections and rejects unknown tokens", () => {
    store.selectPart("part1", "<v3>");
    store.selectPart("part2", "<v2>");
    expect(store.promptPreview()).toBe(
      "A photo of a partial object with <v2>, <v3>, on a clean white background.",
    );
    expect(() => store.selectPart("part1", "<v9>")).toThrow(/not in the registry/);
    expect(() => store.selectPart("nope", "<v1>")).toThrow(/unknown slot/);
  });

  it("free slots drop out of the request", () => {
    store.selectPart("part1", "<v1>");
    const request = store.composeRequest();
    expect(request.selections).toEqual({ part1: "<v1>" });
  });

  it("appends a frozen gallery entry on success", async () => {
    store.selectPart("part1", "<v1>");
    const reply = await store.submitAndPoll(fakeApi(), { sleep: async () => {} });
    expect(reply?.status).toBe("done");
    const gallery = store.getState().gallery;
    expect(gallery).toHaveLength(1);
    const entry = gallery[0]!;
    expect(Object.isFrozen(entry)).toBe(true);
    expect(Object.isFrozen(entry.request)).toBe(true);
    expect(entry.images[0]!.seed).toBe(0);
    expect(store.getState().error).toBeNull();
  });

  it("surfaces a prompt-echo mismatch and leaves the gallery unchanged", async () => {
    store.selectPart("part1", "<v1>");
    const api = fakeApi({
      compose: vi.fn(async () => ({
        job_id: "j9",
        status: "queued",
        prompt: "A photo of a partial object with <v1>, on a white background.",
      })),
    });
    const reply = await store.submitAndPoll(api, { sleep: async () => {} });
    expect(reply).toBeNull();
    expect(store.getState().gallery).toHaveLength(0);
    expect(store.getState().error).toMatch(/diverged/);
  });

  it("surfaces failed jobs without touching the gallery", async () => {
    store.selectPart("part1", "<v1>");
    const api = fakeApi({
      job: vi.fn(async (): Promise<JobReply> => ({
        job_id: "j1",
        status: "failed",
        prompt: "A photo of a partial object with <v1>, on a clean white background.",
        image_ids: [],
        images: [],
        error: "boom",
      })),
    });
    const reply = await store.submitAndPoll(api, { sleep: async () => {} });
    expect(reply?.status).toBe("failed");
    expect(store.getState().gallery).toHaveLength(0);
    expect(store.getState().error).toMatch(/boom/);
  });

  it("replay reuses the exact stored request", async () => {
    store.selectPart("part1", "<v1>");
    const api = fakeApi();
    await store.submitAndPoll(api, { sleep: async () => {} });
    const entry = store.getState().gallery[0]!;
    store.selectPart("part1", "<v3>");  // user moved on; replay must not care
    await store.replay(api, entry, { sleep: async () => {} });
    const compose = (api.compose as ReturnType<typeof vi.fn>).mock;
    expect(compose.calls).toHaveLength(2);
    expect(compose.calls[1]![0]).toEqual(entry.request);
    // current selections restored afterwards
    expect(store.getState().selections["part1"]).toBe("<v3>");
  });
});
