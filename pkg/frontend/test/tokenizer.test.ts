import { describe, expect, it } from "vitest";

import { CHUNK_CONTENT_TOKENS, CONTEXT_WINDOW, chunkText, tokenize } from "../src/tokenizer.js";

describe("tokenize", () => {
  it("lowercases and splits word/punctuation runs", () => {
    expect(tokenize("A photo of a Liver.")).toEqual(["a", "photo", "of", "a", "liver", "."]);
  });

  it("handles empty and whitespace-only input", () => {
    expect(tokenize("")).toEqual([]);
    expect(tokenize("   \n\t ")).toEqual([]);
  });

  it("keeps digit runs together", () => {
    expect(tokenize("T1-weighted 3D scan")).toEqual(["t1", "-", "weighted", "3d", "scan"]);
  });
});

describe("chunkText", () => {
  it("leaves two slots for the start/end markers", () => {
    expect(CONTEXT_WINDOW).toBe(77);
    expect(CHUNK_CONTENT_TOKENS).toBe(75);
  });

  it("returns a single chunk for short text", () => {
    const chunks = chunkText("a short description");
    expect(chunks).toHaveLength(1);
    expect(chunks[0].tokens).toEqual(["a", "short", "description"]);
  });

  it("splits exactly at the token limit", () => {
    const words = Array.from({ length: 75 }, (_, i) => `w${i}`);
    expect(chunkText(words.join(" "))).toHaveLength(1);
    expect(chunkText([...words, "extra"].join(" "))).toHaveLength(2);
  });

  it("covers every token exactly once, in order", () => {
    const text = Array.from({ length: 200 }, (_, i) => `tok${i}`).join(" ");
    const chunks = chunkText(text);
    const rejoined = chunks.flatMap((c) => c.tokens);
    expect(rejoined).toEqual(tokenize(text));
    for (const c of chunks) expect(c.tokens.length).toBeLessThanOrEqual(75);
  });
});
