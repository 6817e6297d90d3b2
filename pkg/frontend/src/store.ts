/** Studio state: one store serializes all updates.
 *
 * Invariants maintained here:
 *  - selections only ever reference tokens present in the loaded registry
 *    view (or the literal "free");
 *  - gallery entries are frozen once their job completes, and carry the full
 *    request so any image can be reproduced by replaying it;
 *  - the prompt preview shown in the UI is verified character-for-character
 *    against the prompt echoed by the service on every submission.
 */

import type { StudioApi } from "./api.js";
import { pollJob, type PollOptions } from "./poll.js";
import { buildPromptPreview, chosenTokens } from "./prompt.js";
import type {
  ComposeRequest,
  ConceptsResponse,
  GalleryEntry,
  JobReply,
  SamplerSettings,
  Selection,
} from "./types.js";

export interface JobView {
  jobId: string;
  status: string;
  prompt: string;
}

export interface StudioState {
  registry: ConceptsResponse | null;
  selections: Record<string, Selection>;
  sampler: SamplerSettings;
  backgroundToken: string | null;
  jobs: JobView[];
  gallery: GalleryEntry[];
  error: string | null;
}

type Listener = (state: StudioState) => void;

export class StudioStore {
  private state: StudioState = {
    registry: null,
    selections: {},
    sampler: { count: 4, seed: 0, steps: 50, guidance: 7.5 },
    backgroundToken: null,
    jobs: [],
    gallery: [],
    error: null,
  };
  private listeners: Listener[] = [];

  getState(): StudioState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<StudioState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.state);
  }

  async loadConcepts(api: StudioApi): Promise<void> {
    const registry = await api.concepts();
    const selections: Record<string, Selection> = {};
    const first = registry.examples[0];
    if (first) {
      for (const slot of first.slots) selections[slot.slot] = "free";
    }
    this.update({ registry, selections, error: null });
  }

  /** Slot labels come from the first example; cross-category datasets pair
   * slots positionally, so every example's i-th part is an option for the
   * i-th slot. */
  slotNames(): string[] {
    const first = this.state.registry?.examples[0];
    return first ? first.slots.map((s) => s.slot) : [];
  }

  optionsForSlot(slotIndex: number): { token: string; example_id: string; mask_url: string | null }[] {
    const registry = this.state.registry;
    if (!registry) return [];
    const options = [];
    for (const example of registry.examples) {
      const slot = example.slots[slotIndex];
      if (slot) {
        options.push({ token: slot.token, example_id: example.example_id, mask_url: slot.mask_url });
      }
    }
    return options;
  }

  selectPart(slot: string, value: Selection): void {
    if (!(slot in this.state.selections)) {
      throw new Error(`unknown slot: ${slot}`);
    }
    if (value !== "free") {
      const known = this.state.registry?.tokens ?? [];
      if (!known.includes(value)) {
        throw new Error(`token ${value} is not in the registry`);
      }
    }
    this.update({ selections: { ...this.state.selections, [slot]: value } });
  }

  setSampler(patch: Partial<SamplerSettings>): void {
    this.update({ sampler: { ...this.state.sampler, ...patch } });
  }

  setBackground(token: string | null): void {
    if (token !== null) {
      const known = this.state.registry?.background_tokens ?? [];
      if (!known.includes(token)) {
        throw new Error(`background token ${token} is not in the registry`);
      }
    }
    this.update({ backgroundToken: token });
  }

  /** The preview rendered next to the compose button (null = nothing chosen). */
  promptPreview(): string | null {
    const registry = this.state.registry;
    if (!registry) return null;
    return buildPromptPreview(registry.category, this.state.selections, this.state.backgroundToken);
  }

  composeRequest(): ComposeRequest {
    const tokens = chosenTokens(this.state.selections);
    if (tokens.length === 0) {
      throw new Error("select at least one part");
    }
    const bound: Record<string, string> = {};
    for (const [slot, value] of Object.entries(this.state.selections)) {
      if (value !== "free") bound[slot] = value;
    }
    const { count, seed, steps, guidance } = this.state.sampler;
    return {
      selections: bound,
      count,
      seed,
      steps,
      guidance,
      background_token: this.state.backgroundToken,
    };
  }

  /** Submit the current selection and poll to completion.
   *
   * On success the gallery gains one frozen entry; on failure the gallery is
   * untouched and the error is surfaced in state.  A prompt-echo mismatch is
   * treated as a failure: the preview shown to the user must be exactly what
   * the service generated from.
   */
  async submitAndPoll(api: StudioApi, pollOptions: PollOptions = {}): Promise<JobReply | null> {
    let request: ComposeRequest;
    let preview: string | null;
    try {
      request = this.composeRequest();
      preview = this.promptPreview();
    } catch (err) {
      this.update({ error: String(err instanceof Error ? err.message : err) });
      return null;
    }
    try {
      const submitted = await api.compose(request);
      if (preview !== submitted.prompt) {
        this.update({
          error:
            `prompt preview diverged from service prompt:\n` +
            `preview: ${preview}\nservice: ${submitted.prompt}`,
        });
        return null;
      }
      this.update({
        jobs: [...this.state.jobs, { jobId: submitted.job_id, status: submitted.status, prompt: submitted.prompt }],
        error: null,
      });
      const final = await pollJob(api, submitted.job_id, {
        ...pollOptions,
        onUpdate: (reply) => {
          this.update({
            jobs: this.state.jobs.map((j) =>
              j.jobId === reply.job_id ? { ...j, status: reply.status } : j,
            ),
          });
          pollOptions.onUpdate?.(reply);
        },
      });
      if (final.status === "failed") {
        this.update({ error: `job ${final.job_id} failed: ${final.error ?? "unknown error"}` });
        return final;
      }
      const entry: GalleryEntry = Object.freeze({
        jobId: final.job_id,
        prompt: final.prompt,
        request: Object.freeze({ ...request, selections: Object.freeze({ ...request.selections }) }),
        images: Object.freeze([...final.images]),
        completedAt: Date.now(),
      });
      this.update({ gallery: [...this.state.gallery, entry], error: null });
      return final;
    } catch (err) {
      this.update({ error: String(err instanceof Error ? err.message : err) });
      return null;
    }
  }

  /** Re-submit a past gallery entry's exact request (bit-identical replay
   * for fixed seeds). */
  async replay(api: StudioApi, entry: GalleryEntry, pollOptions: PollOptions = {}): Promise<JobReply | null> {
    const saved = this.state.selections;
    const savedSampler = this.state.sampler;
    const savedBg = this.state.backgroundToken;
    try {
      const selections: Record<string, Selection> = {};
      for (const slot of this.slotNames()) {
        selections[slot] = entry.request.selections[slot] ?? "free";
      }
      this.update({
        selections,
        sampler: {
          count: entry.request.count,
          seed: entry.request.seed ?? null,
          steps: entry.request.steps,
          guidance: entry.request.guidance,
        },
        backgroundToken: entry.request.background_token ?? null,
      });
      return await this.submitAndPoll(api, pollOptions);
    } finally {
      this.update({ selections: saved, sampler: savedSampler, backgroundToken: savedBg });
    }
  }
}
