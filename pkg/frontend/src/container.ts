/**
 * The embedding container consumed by the segmentation trainer.
 *
 * Schema: {"dim": 512, "classes": [{"name", "prompt", "branch": 1|2,
 * "embedding": [512 numbers]}]}. Class names must be unique per branch and
 * every vector finite with exactly `dim` entries.
 */

import { writeFileSync } from "node:fs";

export interface ContainerEntry {
  name: string;
  prompt: string;
  branch: 1 | 2;
  embedding: number[];
}

export interface Container {
  dim: number;
  classes: ContainerEntry[];
}

export function validateContainer(container: Container): void {
  const seen = new Set<string>();
  container.classes.forEach((entry, i) => {
    if (entry.embedding.length !== container.dim) {
      throw new Error(
        `class index ${i} (${entry.name}): embedding length ${entry.embedding.length} != dim ${container.dim}`,
      );
    }
    if (!entry.embedding.every(Number.isFinite)) {
      throw new Error(`class index ${i} (${entry.name}): non-finite embedding values`);
    }
    if (entry.branch !== 1 && entry.branch !== 2) {
      throw new Error(`class index ${i} (${entry.name}): branch must be 1 or 2`);
    }
    const key = `${entry.branch}:${entry.name}`;
    if (seen.has(key)) {
      throw new Error(`duplicate class name ${entry.name} in branch ${entry.branch}`);
    }
    seen.add(key);
  });
}

export function writeContainer(path: string, container: Container): void {
  validateContainer(container);
  writeFileSync(path, JSON.stringify(container) + "\n");
}
