/**
 * Text encoder backends.
 *
 * `clip` expects pretrained weights on disk and refuses to run without them;
 * `hash` derives a deterministic unit vector from the token stream so the
 * whole pipeline (chunking, averaging, container format, loader handshake)
 * works offline. Hash vectors carry no semantics and say so in the container
 * prompt text they are attached to.
 */

import { existsSync } from "node:fs";

export const EMBED_DIM = 512;

export interface TextEncoder {
  readonly name: string;
  /** Encode one chunk's token stream into a vector of EMBED_DIM floats. */
  encode(tokens: string[]): Float64Array;
}

/** FNV-1a over the token stream; stable across runs and platforms. */
function fnv1a(tokens: string[], salt: number): number {
  let h = 0x811c9dc5 ^ salt;
  for (const tok of tokens) {
    for (let i = 0; i < tok.length; i++) {
      h ^= tok.charCodeAt(i);
      h = Math.imul(h, 0x01000193);
    }
    h ^= 0x20; // token separator
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export class HashEncoder implements TextEncoder {
  readonly name = "hash";
  constructor(private readonly seed: number = 0) {}

  encode(tokens: string[]): Float64Array {
    const rand = mulberry32(fnv1a(tokens, this.seed));
    const out = new Float64Array(EMBED_DIM);
    // Box-Muller pairs give an isotropic direction after normalization
    for (let i = 0; i < EMBED_DIM; i += 2) {
      const u = Math.max(rand(), 1e-12);
      const v = rand();
      const r = Math.sqrt(-2.0 * Math.log(u));
      out[i] = r * Math.cos(2.0 * Math.PI * v);
      if (i + 1 < EMBED_DIM) out[i + 1] = r * Math.sin(2.0 * Math.PI * v);
    }
    let norm = 0;
    for (const x of out) norm += x * x;
    norm = Math.sqrt(norm);
    for (let i = 0; i < EMBED_DIM; i++) out[i] /= norm;
    return out;
  }
}

export class ClipEncoder implements TextEncoder {
  readonly name = "clip";
  private constructor() {}

  static create(weightsPath: string | undefined): ClipEncoder {
    if (!weightsPath) {
      throw new Error(
        "the clip backend needs --weights pointing at local ViT-B/32 text-encoder weights; " +
          "none were given. Use --backend hash for deterministic offline vectors.",
      );
    }
    if (!existsSync(weightsPath)) {
      throw new Error(
        `CLIP weights not found at ${weightsPath}. Download the ViT-B/32 text-encoder weights ` +
          "to that path, or use --backend hash for deterministic offline vectors.",
      );
    }
    throw new Error(
      "CLIP weights are present, but this build does not bundle an inference runtime for them " +
        "(offline environment). Encode the prompts with any CLIP runtime into the documented " +
        "container JSON, or use --backend hash.",
    );
  }

  encode(_tokens: string[]): Float64Array {
    throw new Error("unreachable: ClipEncoder.create always raises in this build");
  }
}

export function makeEncoder(backend: string, weightsPath?: string, seed: number = 0): TextEncoder {
  switch (backend) {
    case "hash":
      return new HashEncoder(seed);
    case "clip":
      return ClipEncoder.create(weightsPath);
    default:
      throw new Error(`unknown backend ${backend}; expected "clip" or "hash"`);
  }
}
