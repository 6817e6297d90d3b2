/** Thin fetch client for the composition service. */

import type { ComposeReply, ComposeRequest, ConceptsResponse, JobReply } from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function handle<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { detail?: unknown };
      if (typeof body.detail === "string") detail = body.detail;
      else if (body.detail !== undefined) detail = JSON.stringify(body.detail);
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class StudioApi {
  constructor(private readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async concepts(): Promise<ConceptsResponse> {
    return handle(await fetch(this.url("/concepts")));
  }

  async compose(request: ComposeRequest): Promise<ComposeReply> {
    return handle(
      await fetch(this.url("/compose"), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(request),
      }),
    );
  }

  async job(jobId: string): Promise<JobReply> {
    return handle(await fetch(this.url(`/jobs/${encodeURIComponent(jobId)}`)));
  }

  async imageBytes(imageId: string): Promise<ArrayBuffer> {
    const response = await fetch(this.imageUrl(imageId));
    if (!response.ok) throw new ApiError(response.status, response.statusText);
    return response.arrayBuffer();
  }

  imageUrl(imageId: string): string {
    return this.url(`/images/${encodeURIComponent(imageId)}`);
  }

  absolute(path: string | null): string | null {
    return path === null ? null : this.url(path);
  }
}
