/**
 * Tokenization and context-window chunking for the text encoder.
 *
 * The real encoder's BPE vocabulary is not shipped offline, so token counting
 * approximates its pre-tokenization: lowercase, then alternating runs of
 * alphanumerics and punctuation. The context window is 77 positions including
 * the start/end markers, leaving 75 content tokens per chunk.
 */

export const CONTEXT_WINDOW = 77;
export const CHUNK_CONTENT_TOKENS = CONTEXT_WINDOW - 2; // BOS/EOS take two slots

const TOKEN_RE = /[a-z0-9]+|[^\sa-z0-9]+/g;

export function tokenize(text: string): string[] {
  return text.toLowerCase().match(TOKEN_RE) ?? [];
}

export interface Chunk {
  tokens: string[];
  text: string;
}

/** Split a text into chunks of at most CHUNK_CONTENT_TOKENS tokens each. */
export function chunkText(text: string, maxTokens: number = CHUNK_CONTENT_TOKENS): Chunk[] {
  if (maxTokens < 1) throw new Error(`maxTokens must be positive, got ${maxTokens}`);
  const tokens = tokenize(text);
  if (tokens.length === 0) return [];
  const chunks: Chunk[] = [];
  for (let i = 0; i < tokens.length; i += maxTokens) {
    const piece = tokens.slice(i, i + maxTokens);
    chunks.push({ tokens: piece, text: piece.join(" ") });
  }
  return chunks;
}
