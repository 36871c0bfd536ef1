#!/usr/bin/env node
/**
 * triseg-export: encode class prompts and descriptions into the embedding
 * container consumed by the segmentation trainer.
 *
 *   triseg-export --classes classes.json --out embeddings.json [--backend clip|hash]
 *                 [--weights PATH] [--seed N]
 *
 * The classes file is a JSON array of {"name", "description"}.
 * Exit codes: 0 ok, 1 usage, 2 validation/encoding failure.
 */

import { readFileSync } from "node:fs";
import { makeEncoder } from "./encoder.js";
import { buildContainer, ClassSpec } from "./exporter.js";
import { writeContainer } from "./container.js";

interface Args {
  classes?: string;
  out?: string;
  backend: string;
  weights?: string;
  seed: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { backend: "clip", seed: 0 };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) throw new UsageError(`missing value for ${flag}`);
      return argv[++i];
    };
    switch (flag) {
      case "--classes": args.classes = next(); break;
      case "--out": args.out = next(); break;
      case "--backend": args.backend = next(); break;
      case "--weights": args.weights = next(); break;
      case "--seed": args.seed = Number(next()); break;
      case "--help": case "-h": printUsage(); process.exit(0); break;
      default: throw new UsageError(`unknown flag ${flag}`);
    }
  }
  if (!args.classes || !args.out) throw new UsageError("--classes and --out are required");
  if (!Number.isInteger(args.seed)) throw new UsageError("--seed must be an integer");
  return args;
}

class UsageError extends Error {}

function printUsage(): void {
  console.log("usage: triseg-export --classes FILE --out FILE [--backend clip|hash] [--weights PATH] [--seed N]");
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    printUsage();
    return 1;
  }
  try {
    const raw = JSON.parse(readFileSync(args.classes!, "utf-8"));
    if (!Array.isArray(raw)) throw new Error("classes file must be a JSON array");
    const classes = raw as ClassSpec[];
    const encoder = makeEncoder(args.backend, args.weights, args.seed);
    const container = buildContainer(encoder, classes);
    writeContainer(args.out!, container);
    console.log(`wrote ${container.classes.length} entries (${classes.length} classes x 2 branches, dim ${container.dim}) to ${args.out}`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
}

import { fileURLToPath } from "node:url";

if (process.argv[1] && fileURLToPath(import.meta.url) === process.argv[1]) {
  process.exit(main(process.argv.slice(2)));
}
