/** Payload shapes of the composition service API. */

export interface SlotView {
  slot: string;
  token: string;
  mask_url: string | null;
}

export interface ExampleView {
  example_id: string;
  category: string;
  thumbnail_url: string | null;
  slots: SlotView[];
}

export interface ConceptsResponse {
  category: string;
  examples: ExampleView[];
  tokens: string[];
  background_tokens: string[];
}

/** A slot is either bound to a concept token or left free to vary. */
export type Selection = string | "free";

export interface SamplerSettings {
  count: number;
  seed: number | null;
  steps: number;
  guidance: number;
}

export interface ComposeRequest {
  selections: Record<string, string>;
  count: number;
  seed?: number | null;
  steps: number;
  guidance: number;
  background_token?: string | null;
}

export interface ComposeReply {
  job_id: string;
  status: string;
  prompt: string;
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface ImageMeta {
  image_id: string;
  prompt: string;
  seed: number;
  steps: number;
  guidance: number;
  selections: Record<string, string>;
}

export interface JobReply {
  job_id: string;
  status: JobState;
  prompt: string;
  image_ids: string[];
  images: ImageMeta[];
  error: string | null;
}

/** A completed generation; immutable once appended to the gallery. */
export interface GalleryEntry {
  readonly jobId: string;
  readonly prompt: string;
  readonly request: ComposeRequest;
  readonly images: readonly ImageMeta[];
  readonly completedAt: number;
}
