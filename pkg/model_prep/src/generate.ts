/** One-shot fixture build: synthesizes the digit dataset, trains and exports
 * every fixture model, and writes the IDX/PNM sample files plus manifests.
 *
 *   node dist/generate.js [outDir]   (default: ../fixtures next to model_prep)
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { dirname, join, resolve } from "node:path";
import { fileURLToPath } from "node:url";

import { IMG, makeDataset, renderDigit } from "./glyphs.js";
import { writeIdxImages, writeIdxLabels } from "./idx.js";
import { sha256 } from "./manifest.js";
import { writePgm, writePpm } from "./pnm.js";
import { Rng } from "./prng.js";
import { trainAndExport } from "./train_and_export.js";

const TRAIN_PER_CLASS = 300;
const TEST_PER_CLASS = 60;
const TRAIN_SEED = 101;
const TEST_SEED = 202;
const DIGITS3_SEED = 303;
const DIGITS3_FIRST_PIXELS = [0, 128, 255]; // documented [0,0] bytes

function main(): void {
  const here = dirname(fileURLToPath(import.meta.url));
  const outDir = resolve(process.argv[2] ?? join(here, "..", "..", "fixtures"));
  mkdirSync(outDir, { recursive: true });
  const written: Record<string, string> = {};
  const put = (name: string, data: Buffer) => {
    writeFileSync(join(outDir, name), data);
    written[name] = sha256(data);
  };

  console.log(`writing fixtures to ${outDir}`);
  const train = makeDataset(TRAIN_PER_CLASS, TRAIN_SEED);
  const test = makeDataset(TEST_PER_CLASS, TEST_SEED);
  put("digits_train.images.idx", writeIdxImages(train.images, IMG, IMG));
  put("digits_train.labels.idx", writeIdxLabels(train.labels));
  put("digits_test.images.idx", writeIdxImages(test.images, IMG, IMG));
  put("digits_test.labels.idx", writeIdxLabels(test.labels));

  // tiny 3-image pair with documented first-pixel bytes
  const rng3 = new Rng(DIGITS3_SEED);
  const d3 = new Uint8Array(3 * IMG * IMG);
  for (let i = 0; i < 3; i++) {
    const img = renderDigit(i, rng3);
    img[0] = DIGITS3_FIRST_PIXELS[i];
    d3.set(img, i * IMG * IMG);
  }
  put("digits3.images.idx", writeIdxImages(d3, IMG, IMG));
  put("digits3.labels.idx", writeIdxLabels(Uint8Array.from([0, 1, 2])));

  const sample = test.images.subarray(0, IMG * IMG);
  put("sample.pgm", writePgm(sample, IMG, IMG));
  const tinted = new Uint8Array(IMG * IMG * 3);
  for (let i = 0; i < sample.length; i++) {
    tinted[3 * i] = sample[i];
    tinted[3 * i + 1] = sample[i] >> 1;
    tinted[3 * i + 2] = 255 - sample[i];
  }
  put("sample.ppm", writePpm(tinted, IMG, IMG));

  for (const arch of ["mlp", "small_cnn", "linear2"] as const) {
    const t0 = Date.now();
    const manifest = trainAndExport(arch, arch === "linear2" ? null : outDir, outDir);
    const acc = manifest.test_accuracy === null
      ? "fixed weights"
      : `test accuracy ${manifest.test_accuracy.toFixed(4)}`;
    console.log(`${manifest.model}: ${acc} (${((Date.now() - t0) / 1000).toFixed(1)}s)`);
    written[manifest.gnw_file] = manifest.gnw_sha256;
  }

  const datasetManifest = {
    description: "synthetic 10-class digit fixtures, 28x28 grayscale",
    train_count: train.count,
    test_count: test.count,
    seeds: { train: TRAIN_SEED, test: TEST_SEED, digits3: DIGITS3_SEED },
    digits3_first_pixels: DIGITS3_FIRST_PIXELS,
    checksums: written,
  };
  writeFileSync(
    join(outDir, "dataset.manifest.json"),
    JSON.stringify(datasetManifest, null, 2) + "\n",
  );
  console.log(`done: ${Object.keys(written).length} files`);
}

main();
