/** Trains one fixture classifier, writes its GNW file, and returns a
 * manifest carrying the checksum and a golden forward-pass vector. */

import { readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { quantizeWeights, writeGnw } from "./gnw.js";
import { readIdxImages, readIdxLabels } from "./idx.js";
import { ExportManifest, GoldenVector, sha256 } from "./manifest.js";
import {
  DEFAULT_TRAIN,
  Model,
  TrainConfig,
  accuracy,
  forward,
  trainHead,
  trainMlp,
} from "./nn.js";
import { IMG } from "./glyphs.js";
import { Rng } from "./prng.js";

export type Arch = "mlp" | "small_cnn" | "linear2";

export interface ExportOptions {
  hidden?: number; // mlp hidden width
  convFilters?: number; // small_cnn feature maps
  train?: TrainConfig;
  accuracyFloor?: number; // mlp refuses to export below this test accuracy
}

interface Split {
  images: Uint8Array;
  labels: Uint8Array;
}

function loadSplit(dir: string, name: string): Split {
  const img = readIdxImages(readFileSync(join(dir, `${name}.images.idx`)));
  if (img.rows !== IMG || img.cols !== IMG) {
    throw new Error(`${name}: expected ${IMG}x${IMG} images, got ${img.rows}x${img.cols}`);
  }
  const labels = readIdxLabels(readFileSync(join(dir, `${name}.labels.idx`)));
  if (labels.length * IMG * IMG !== img.images.length) {
    throw new Error(`${name}: image/label count mismatch`);
  }
  return { images: img.images, labels };
}

function golden(model: Model, image: Float64Array): GoldenVector {
  return {
    height: model.height,
    width: model.width,
    channels: model.channels,
    input: Array.from(image),
    probs: Array.from(forward(model, image)),
  };
}

function firstTestImage(test: Split): Float64Array {
  const dim = IMG * IMG;
  const x = new Float64Array(dim);
  for (let i = 0; i < dim; i++) x[i] = test.images[i] / 255;
  return x;
}

function buildMlp(datasetDir: string, opts: ExportOptions): {
  model: Model;
  archText: string;
  trainAcc: number;
  testAcc: number;
  goldenInput: Float64Array;
} {
  const hidden = opts.hidden ?? 64;
  const cfg = opts.train ?? DEFAULT_TRAIN;
  const floor = opts.accuracyFloor ?? 0.95;
  const train = loadSplit(datasetDir, "digits_train");
  const test = loadSplit(datasetDir, "digits_test");
  const dim = IMG * IMG;
  const { w1, b1, w2, b2 } = trainMlp(train.images, train.labels, dim, hidden, 10, cfg);
  const model: Model = quantizeWeights({
    height: IMG,
    width: IMG,
    channels: 1,
    numClasses: 10,
    layers: [
      { kind: "flatten" },
      { kind: "dense", inDim: dim, outDim: hidden, w: w1, b: b1 },
      { kind: "relu" },
      { kind: "dense", inDim: hidden, outDim: 10, w: w2, b: b2 },
      { kind: "softmax" },
    ],
  });
  const testAcc = accuracy(model, test.images, test.labels);
  if (testAcc < floor) {
    throw new Error(
      `mlp test accuracy ${testAcc.toFixed(4)} below floor ${floor}; export refused`,
    );
  }
  return {
    model,
    archText: `flatten, dense ${dim}x${hidden}, relu, dense ${hidden}x10, softmax`,
    trainAcc: accuracy(model, train.images, train.labels),
    testAcc,
    goldenInput: firstTestImage(test),
  };
}

function buildSmallCnn(datasetDir: string, opts: ExportOptions): {
  model: Model;
  archText: string;
  trainAcc: number;
  testAcc: number;
  goldenInput: Float64Array;
} {
  const filters = opts.convFilters ?? 8;
  const cfg = opts.train ?? { ...DEFAULT_TRAIN, lr: 0.05 };
  const train = loadSplit(datasetDir, "digits_train");
  const test = loadSplit(datasetDir, "digits_test");
  // frozen seeded conv bank; only the readout is trained
  const rng = new Rng(cfg.seed + 1);
  const convW = new Float64Array(filters * 9);
  const std = Math.sqrt(2 / 9);
  for (let i = 0; i < convW.length; i++) convW[i] = std * rng.gauss();
  const convB = new Float64Array(filters);

  const pooled = IMG / 2;
  const featDim = pooled * pooled * filters;
  const featureModel: Model = {
    height: IMG,
    width: IMG,
    channels: 1,
    numClasses: 10,
    layers: [
      { kind: "conv", kh: 3, kw: 3, inC: 1, outC: filters, stride: 1, pad: "same",
        w: convW, b: convB },
      { kind: "relu" },
      { kind: "maxpool", k: 2, stride: 2 },
      { kind: "flatten" },
    ],
  };

  const featurize = (split: Split): Float64Array => {
    const dim = IMG * IMG;
    const out = new Float64Array(split.labels.length * featDim);
    const x = new Float64Array(dim);
    for (let n = 0; n < split.labels.length; n++) {
      for (let i = 0; i < dim; i++) x[i] = split.images[n * dim + i] / 255;
      out.set(forward(featureModel, x), n * featDim);
    }
    return out;
  };

  const { w, b } = trainHead(featurize(train), train.labels, featDim, 10, cfg);
  const model: Model = quantizeWeights({
    ...featureModel,
    layers: [
      ...featureModel.layers,
      { kind: "dense", inDim: featDim, outDim: 10, w, b },
      { kind: "softmax" },
    ],
  });
  return {
    model,
    archText:
      `conv 3x3x1x${filters} same (frozen seeded bank), relu, maxpool 2/2, ` +
      `flatten, dense ${featDim}x10 (trained readout), softmax`,
    trainAcc: accuracy(model, train.images, train.labels),
    testAcc: accuracy(model, test.images, test.labels),
    goldenInput: firstTestImage(test),
  };
}

function buildLinear2(): {
  model: Model;
  archText: string;
  goldenInput: Float64Array;
} {
  // symmetric by construction: w0 = -w1 = ones, zero bias
  const model: Model = quantizeWeights({
    height: 2,
    width: 2,
    channels: 1,
    numClasses: 2,
    layers: [
      { kind: "flatten" },
      {
        kind: "dense",
        inDim: 4,
        outDim: 2,
        w: Float64Array.from([1, 1, 1, 1, -1, -1, -1, -1]),
        b: new Float64Array(2),
      },
      { kind: "softmax" },
    ],
  });
  return {
    model,
    archText: "flatten, dense 4x2 (fixed weights: rows +-1, zero bias), softmax",
    goldenInput: new Float64Array(4),
  };
}

export function trainAndExport(
  arch: Arch,
  datasetDir: string | null,
  outDir: string,
  opts: ExportOptions = {},
): ExportManifest {
  let model: Model;
  let archText: string;
  let trainAcc: number | null = null;
  let testAcc: number | null = null;
  let goldenInput: Float64Array;
  if (arch === "linear2") {
    ({ model, archText, goldenInput } = buildLinear2());
  } else {
    if (datasetDir === null) throw new Error(`${arch} needs a dataset directory`);
    const built = arch === "mlp" ? buildMlp(datasetDir, opts) : buildSmallCnn(datasetDir, opts);
    ({ model, archText, goldenInput } = built);
    trainAcc = built.trainAcc;
    testAcc = built.testAcc;
  }

  const name = arch === "mlp" ? "mnist_mlp" : arch;
  const gnwName = `${name}.gnw`;
  const bytes = writeGnw(model);
  writeFileSync(join(outDir, gnwName), bytes);
  const manifest: ExportManifest = {
    model: name,
    architecture: archText,
    training_accuracy: trainAcc,
    test_accuracy: testAcc,
    gnw_file: gnwName,
    gnw_sha256: sha256(bytes),
    files: [gnwName],
    golden: golden(model, goldenInput),
  };
  writeFileSync(join(outDir, `${name}.manifest.json`), JSON.stringify(manifest, null, 2) + "\n");
  return manifest;
}
