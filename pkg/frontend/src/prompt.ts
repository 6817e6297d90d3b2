/** Prompt preview construction.
 *
 * The preview must be character-identical to the prompt the service builds
 * for the same request; the service echoes its prompt back so the store can
 * verify the invariant on every submission.
 */

import type { Selection } from "./types.js";

const TOKEN_RE = /^<(?:v|bg)(\d+)>$/;

export function tokenIndex(token: string): number {
  const match = TOKEN_RE.exec(token);
  if (!match || match[1] === undefined) {
    throw new Error(`not a concept token: ${token}`);
  }
  return parseInt(match[1], 10);
}

/** Tokens in ascending index order, the order the service uses. */
export function orderTokens(tokens: string[]): string[] {
  return [...tokens].sort((a, b) => tokenIndex(a) - tokenIndex(b));
}

/** Tokens chosen in a selection map, "free" slots omitted. */
export function chosenTokens(selections: Record<string, Selection>): string[] {
  return orderTokens(
    Object.values(selections).filter((value): value is string => value !== "free"),
  );
}

/**
 * Mirror of the service's inference template:
 * "A photo of a partial {category} with {tokens}, on a clean white background."
 * With a background token the trailing clause becomes "in <bgX>.".
 * Returns null when no slot is bound yet.
 */
export function buildPromptPreview(
  category: string,
  selections: Record<string, Selection>,
  backgroundToken?: string | null,
): string | null {
  const tokens = chosenTokens(selections);
  if (tokens.length === 0) {
    return null;
  }
  const suffix = backgroundToken ? `in ${backgroundToken}.` : "on a clean white background.";
  return `A photo of a partial ${category} with ${tokens.join(", ")}, ${suffix}`;
}
