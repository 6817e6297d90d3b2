/** Job polling: 1 s base interval with multiplicative backoff, no websockets. */

import type { StudioApi } from "./api.js";
import type { JobReply } from "./types.js";

export interface PollOptions {
  intervalMs?: number;
  backoffFactor?: number;
  maxIntervalMs?: number;
  timeoutMs?: number;
  onUpdate?: (reply: JobReply) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export function isTerminal(status: string): boolean {
  return status === "done" || status === "failed";
}

/** Poll until the job reaches a terminal state; resolves with the final reply. */
export async function pollJob(
  api: StudioApi,
  jobId: string,
  options: PollOptions = {},
): Promise<JobReply> {
  const {
    intervalMs = 1000,
    backoffFactor = 1.5,
    maxIntervalMs = 5000,
    timeoutMs = 10 * 60 * 1000,
    onUpdate,
    sleep = defaultSleep,
  } = options;

  const started = Date.now();
  let wait = intervalMs;
  for (;;) {
    const reply = await api.job(jobId);
    onUpdate?.(reply);
    if (isTerminal(reply.status)) {
      return reply;
    }
    if (Date.now() - started > timeoutMs) {
      throw new Error(`job ${jobId} still ${reply.status} after ${timeoutMs} ms`);
    }
    await sleep(wait);
    wait = Math.min(wait * backoffFactor, maxIntervalMs);
  }
}
