/**
 * Builds both embedding branches for a class list: branch 1 encodes the
 * label prompt "A photo of a [CLS]", branch 2 encodes the long description,
 * split into context-window chunks whose vectors are averaged arithmetically.
 */

import { Container, ContainerEntry } from "./container.js";
import { EMBED_DIM, TextEncoder } from "./encoder.js";
import { chunkText, tokenize } from "./tokenizer.js";

export interface ClassSpec {
  name: string;
  description: string;
}

export function labelPrompt(name: string): string {
  return `A photo of a ${name}`;
}

export function averageChunks(vectors: Float64Array[]): Float64Array {
  if (vectors.length === 0) throw new Error("averageChunks needs at least one chunk vector");
  const out = new Float64Array(vectors[0].length);
  for (const v of vectors) {
    if (v.length !== out.length) throw new Error("chunk vectors disagree on dimension");
    for (let i = 0; i < out.length; i++) out[i] += v[i];
  }
  for (let i = 0; i < out.length; i++) out[i] /= vectors.length;
  let norm = 0;
  for (const x of out) norm += Math.abs(x);
  if (norm === 0) {
    console.warn("warning: chunk vectors cancelled to a zero embedding (degenerate description)");
  }
  return out;
}

export function encodeDescription(encoder: TextEncoder, description: string): { vector: Float64Array; chunks: number } {
  const chunks = chunkText(description);
  if (chunks.length === 0) throw new Error("description produced no tokens");
  const vectors = chunks.map((c) => encoder.encode(c.tokens));
  return { vector: averageChunks(vectors), chunks: chunks.length };
}

export function buildContainer(encoder: TextEncoder, classes: ClassSpec[]): Container {
  if (classes.length === 0) throw new Error("class list is empty");
  const entries: ContainerEntry[] = [];
  for (const cls of classes) {
    if (!cls.name || !cls.description) {
      throw new Error(`class entries need non-empty "name" and "description" (offender: ${JSON.stringify(cls)})`);
    }
    const prompt = labelPrompt(cls.name);
    entries.push({
      name: cls.name,
      prompt,
      branch: 1,
      embedding: Array.from(encoder.encode(tokenize(prompt))),
    });
    const { vector } = encodeDescription(encoder, cls.description);
    entries.push({
      name: cls.name,
      prompt: cls.description,
      branch: 2,
      embedding: Array.from(vector),
    });
  }
  return { dim: EMBED_DIM, classes: entries };
}
