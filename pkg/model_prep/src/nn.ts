/** Minimal network container mirroring the GNW layer set, plus the forward
 * pass and the two training routines the exporters need.
 *
 * Weights are kept as Float64Array while training and cast to Float32Array
 * at export time; golden vectors are always computed from the cast weights
 * so they describe the file as shipped, not the training-time values. */

import { Rng } from "./prng.js";

export type Padding = "same" | "valid";

export interface DenseLayer {
  kind: "dense";
  inDim: number;
  outDim: number;
  w: Float32Array | Float64Array; // (outDim, inDim) row-major
  b: Float32Array | Float64Array;
}

export interface ConvLayer {
  kind: "conv";
  kh: number;
  kw: number;
  inC: number;
  outC: number;
  stride: number;
  pad: Padding;
  w: Float32Array | Float64Array; // (outC, inC, kh, kw) row-major
  b: Float32Array | Float64Array;
}

export type Layer =
  | DenseLayer
  | ConvLayer
  | { kind: "relu" }
  | { kind: "maxpool"; k: number; stride: number }
  | { kind: "flatten" }
  | { kind: "softmax" };

export interface Model {
  height: number;
  width: number;
  channels: number;
  numClasses: number;
  layers: Layer[];
}

export function softmax(logits: Float64Array): Float64Array {
  let max = -Infinity;
  for (const v of logits) if (v > max) max = v;
  const out = new Float64Array(logits.length);
  let sum = 0;
  for (let i = 0; i < logits.length; i++) {
    out[i] = Math.exp(logits[i] - max);
    sum += out[i];
  }
  for (let i = 0; i < out.length; i++) out[i] /= sum;
  return out;
}

function convOut(size: number, k: number, stride: number, pad: Padding): number {
  if (pad === "same") return Math.ceil(size / stride);
  const out = Math.floor((size - k) / stride) + 1;
  if (out < 1) throw new Error(`conv window ${k} does not fit input ${size}`);
  return out;
}

interface Tensor {
  data: Float64Array;
  h: number;
  w: number;
  c: number;
}

function convForward(x: Tensor, layer: ConvLayer): Tensor {
  const oh = convOut(x.h, layer.kh, layer.stride, layer.pad);
  const ow = convOut(x.w, layer.kw, layer.stride, layer.pad);
  // pad split matches the loader side: extra pixel goes to bottom/right
  let padTop = 0;
  let padLeft = 0;
  if (layer.pad === "same") {
    padTop = Math.floor(Math.max((oh - 1) * layer.stride + layer.kh - x.h, 0) / 2);
    padLeft = Math.floor(Math.max((ow - 1) * layer.stride + layer.kw - x.w, 0) / 2);
  }
  const out = new Float64Array(oh * ow * layer.outC);
  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let oc = 0; oc < layer.outC; oc++) {
        let acc = layer.b[oc];
        const wBase = oc * layer.inC * layer.kh * layer.kw;
        for (let ic = 0; ic < layer.inC; ic++) {
          for (let ky = 0; ky < layer.kh; ky++) {
            const y = oy * layer.stride - padTop + ky;
            if (y < 0 || y >= x.h) continue;
            for (let kx = 0; kx < layer.kw; kx++) {
              const xx = ox * layer.stride - padLeft + kx;
              if (xx < 0 || xx >= x.w) continue;
              acc +=
                layer.w[wBase + (ic * layer.kh + ky) * layer.kw + kx] *
                x.data[(y * x.w + xx) * x.c + ic];
            }
          }
        }
        out[(oy * ow + ox) * layer.outC + oc] = acc;
      }
    }
  }
  return { data: out, h: oh, w: ow, c: layer.outC };
}

function maxpoolForward(x: Tensor, k: number, stride: number): Tensor {
  const oh = convOut(x.h, k, stride, "valid");
  const ow = convOut(x.w, k, stride, "valid");
  const out = new Float64Array(oh * ow * x.c);
  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let c = 0; c < x.c; c++) {
        let best = -Infinity;
        for (let ky = 0; ky < k; ky++) {
          for (let kx = 0; kx < k; kx++) {
            const v = x.data[((oy * stride + ky) * x.w + ox * stride + kx) * x.c + c];
            if (v > best) best = v;
          }
        }
        out[(oy * ow + ox) * x.c + c] = best;
      }
    }
  }
  return { data: out, h: oh, w: ow, c: x.c };
}

/** Probability vector for one image given as HWC floats in [0, 1]. */
export function forward(model: Model, image: Float64Array): Float64Array {
  if (image.length !== model.height * model.width * model.channels) {
    throw new Error(
      `image has ${image.length} values, model wants ` +
        `${model.height}x${model.width}x${model.channels}`,
    );
  }
  let tensor: Tensor = {
    data: Float64Array.from(image),
    h: model.height,
    w: model.width,
    c: model.channels,
  };
  let flat: Float64Array | null = null;
  for (const layer of model.layers) {
    switch (layer.kind) {
      case "flatten":
        flat = tensor.data;
        break;
      case "dense": {
        if (flat === null) throw new Error("dense before flatten");
        const out = new Float64Array(layer.outDim);
        for (let o = 0; o < layer.outDim; o++) {
          let acc = layer.b[o];
          const base = o * layer.inDim;
          for (let i = 0; i < layer.inDim; i++) acc += layer.w[base + i] * flat[i];
          out[o] = acc;
        }
        flat = out;
        break;
      }
      case "relu":
        if (flat !== null) {
          for (let i = 0; i < flat.length; i++) if (flat[i] < 0) flat[i] = 0;
        } else {
          const d = tensor.data;
          for (let i = 0; i < d.length; i++) if (d[i] < 0) d[i] = 0;
        }
        break;
      case "conv":
        tensor = convForward(tensor, layer);
        break;
      case "maxpool":
        tensor = maxpoolForward(tensor, layer.k, layer.stride);
        break;
      case "softmax":
        if (flat === null) throw new Error("softmax before flatten");
        flat = softmax(flat);
        break;
    }
  }
  if (flat === null) throw new Error("model never flattened");
  return flat;
}

export function accuracy(model: Model, images: Uint8Array, labels: Uint8Array): number {
  const dim = model.height * model.width * model.channels;
  const x = new Float64Array(dim);
  let hits = 0;
  for (let n = 0; n < labels.length; n++) {
    for (let i = 0; i < dim; i++) x[i] = images[n * dim + i] / 255;
    const probs = forward(model, x);
    let arg = 0;
    for (let k = 1; k < probs.length; k++) if (probs[k] > probs[arg]) arg = k;
    if (arg === labels[n]) hits++;
  }
  return hits / labels.length;
}

export interface TrainConfig {
  epochs: number;
  batch: number;
  lr: number;
  momentum: number;
  seed: number;
}

export const DEFAULT_TRAIN: TrainConfig = {
  epochs: 8,
  batch: 32,
  lr: 0.1,
  momentum: 0.9,
  seed: 7,
};

function heInit(rng: Rng, fanIn: number, count: number): Float64Array {
  const w = new Float64Array(count);
  const std = Math.sqrt(2 / fanIn);
  for (let i = 0; i < count; i++) w[i] = std * rng.gauss();
  return w;
}

/** One hidden layer MLP trained with minibatch SGD + momentum on
 * softmax cross-entropy.  Inputs are uint8 pixels, scaled to [0, 1]. */
export function trainMlp(
  images: Uint8Array,
  labels: Uint8Array,
  inDim: number,
  hidden: number,
  classes: number,
  cfg: TrainConfig = DEFAULT_TRAIN,
): { w1: Float64Array; b1: Float64Array; w2: Float64Array; b2: Float64Array } {
  const n = labels.length;
  const rng = new Rng(cfg.seed);
  const w1 = heInit(rng, inDim, hidden * inDim);
  const b1 = new Float64Array(hidden);
  const w2 = heInit(rng, hidden, classes * hidden);
  const b2 = new Float64Array(classes);
  const vw1 = new Float64Array(w1.length);
  const vb1 = new Float64Array(b1.length);
  const vw2 = new Float64Array(w2.length);
  const vb2 = new Float64Array(b2.length);
  const gw1 = new Float64Array(w1.length);
  const gb1 = new Float64Array(b1.length);
  const gw2 = new Float64Array(w2.length);
  const gb2 = new Float64Array(b2.length);

  const order = new Int32Array(n);
  for (let i = 0; i < n; i++) order[i] = i;
  const x = new Float64Array(inDim);
  const h = new Float64Array(hidden);
  const logits = new Float64Array(classes);
  const gh = new Float64Array(hidden);

  const apply = (
    w: Float64Array, v: Float64Array, g: Float64Array, scale: number,
  ) => {
    for (let i = 0; i < w.length; i++) {
      v[i] = cfg.momentum * v[i] - cfg.lr * g[i] * scale;
      w[i] += v[i];
      g[i] = 0;
    }
  };

  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    rng.shuffle(order);
    for (let start = 0; start < n; start += cfg.batch) {
      const end = Math.min(n, start + cfg.batch);
      for (let s = start; s < end; s++) {
        const idx = order[s];
        for (let i = 0; i < inDim; i++) x[i] = images[idx * inDim + i] / 255;
        for (let j = 0; j < hidden; j++) {
          let acc = b1[j];
          const base = j * inDim;
          for (let i = 0; i < inDim; i++) acc += w1[base + i] * x[i];
          h[j] = acc > 0 ? acc : 0;
        }
        for (let k = 0; k < classes; k++) {
          let acc = b2[k];
          const base = k * hidden;
          for (let j = 0; j < hidden; j++) acc += w2[base + j] * h[j];
          logits[k] = acc;
        }
        const p = softmax(logits);
        gh.fill(0);
        for (let k = 0; k < classes; k++) {
          const gl = p[k] - (labels[idx] === k ? 1 : 0);
          gb2[k] += gl;
          const base = k * hidden;
          for (let j = 0; j < hidden; j++) {
            gw2[base + j] += gl * h[j];
            gh[j] += gl * w2[base + j];
          }
        }
        for (let j = 0; j < hidden; j++) {
          if (h[j] <= 0) continue; // relu gate
          gb1[j] += gh[j];
          const base = j * inDim;
          for (let i = 0; i < inDim; i++) gw1[base + i] += gh[j] * x[i];
        }
      }
      const scale = 1 / (end - start);
      apply(w1, vw1, gw1, scale);
      apply(b1, vb1, gb1, scale);
      apply(w2, vw2, gw2, scale);
      apply(b2, vb2, gb2, scale);
    }
  }
  return { w1, b1, w2, b2 };
}

/** Softmax regression head over precomputed feature vectors. */
export function trainHead(
  features: Float64Array, // (n, inDim) row-major
  labels: Uint8Array,
  inDim: number,
  classes: number,
  cfg: TrainConfig = DEFAULT_TRAIN,
): { w: Float64Array; b: Float64Array } {
  const n = labels.length;
  const rng = new Rng(cfg.seed);
  const w = heInit(rng, inDim, classes * inDim);
  const b = new Float64Array(classes);
  const vw = new Float64Array(w.length);
  const vb = new Float64Array(b.length);
  const gw = new Float64Array(w.length);
  const gb = new Float64Array(b.length);
  const order = new Int32Array(n);
  for (let i = 0; i < n; i++) order[i] = i;
  const logits = new Float64Array(classes);

  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    rng.shuffle(order);
    for (let start = 0; start < n; start += cfg.batch) {
      const end = Math.min(n, start + cfg.batch);
      for (let s = start; s < end; s++) {
        const idx = order[s];
        const xBase = idx * inDim;
        for (let k = 0; k < classes; k++) {
          let acc = b[k];
          const base = k * inDim;
          for (let i = 0; i < inDim; i++) acc += w[base + i] * features[xBase + i];
          logits[k] = acc;
        }
        const p = softmax(logits);
        for (let k = 0; k < classes; k++) {
          const gl = p[k] - (labels[idx] === k ? 1 : 0);
          gb[k] += gl;
          const base = k * inDim;
          for (let i = 0; i < inDim; i++) gw[base + i] += gl * features[xBase + i];
        }
      }
      const scale = 1 / (end - start);
      for (let i = 0; i < w.length; i++) {
        vw[i] = cfg.momentum * vw[i] - cfg.lr * gw[i] * scale;
        w[i] += vw[i];
        gw[i] = 0;
      }
      for (let i = 0; i < b.length; i++) {
        vb[i] = cfg.momentum * vb[i] - cfg.lr * gb[i] * scale;
        b[i] += vb[i];
        gb[i] = 0;
      }
    }
  }
  return { w, b };
}
