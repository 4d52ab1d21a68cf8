import { createHash } from "node:crypto";

/** Golden forward-pass record: one input image and the probability vector
 * the exported weights must produce, for cross-language verification. */
export interface GoldenVector {
  height: number;
  width: number;
  channels: number;
  input: number[]; // row-major floats in [0, 1]
  probs: number[];
}

export interface ExportManifest {
  model: string;
  architecture: string;
  training_accuracy: number | null;
  test_accuracy: number | null;
  gnw_file: string;
  gnw_sha256: string;
  files: string[];
  golden: GoldenVector;
}

export function sha256(data: Buffer | Uint8Array): string {
  return createHash("sha256").update(data).digest("hex");
}
