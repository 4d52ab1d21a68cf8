/** GNW weight-file writer and reader.
 *
 * Layout (all integers little-endian u32 unless noted):
 *   "GNW1" | height | width | channels | classes | layer_count | layers...
 * Layer records start with a u8 tag:
 *   1 dense   : inDim, outDim, f32 weights (out, in) row-major, f32 bias
 *   2 conv    : kh, kw, inC, outC, stride, pad (0 same / 1 valid),
 *               f32 weights (outC, inC, kh, kw) row-major, f32 bias
 *   3 relu, 4 maxpool (k, stride), 5 flatten, 6 softmax
 */

import { ConvLayer, DenseLayer, Layer, Model } from "./nn.js";

const TAGS = { dense: 1, conv: 2, relu: 3, maxpool: 4, flatten: 5, softmax: 6 };

class ByteWriter {
  private chunks: Buffer[] = [];

  bytes(b: Buffer): void {
    this.chunks.push(b);
  }

  u8(v: number): void {
    this.bytes(Buffer.from([v]));
  }

  u32(...vals: number[]): void {
    const b = Buffer.alloc(4 * vals.length);
    vals.forEach((v, i) => b.writeUInt32LE(v >>> 0, 4 * i));
    this.bytes(b);
  }

  f32s(vals: Float32Array | Float64Array): void {
    const b = Buffer.alloc(4 * vals.length);
    for (let i = 0; i < vals.length; i++) b.writeFloatLE(vals[i], 4 * i);
    this.bytes(b);
  }

  done(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

export function writeGnw(model: Model): Buffer {
  const w = new ByteWriter();
  w.bytes(Buffer.from("GNW1", "ascii"));
  w.u32(model.height, model.width, model.channels, model.numClasses, model.layers.length);
  for (const layer of model.layers) {
    w.u8(TAGS[layer.kind]);
    switch (layer.kind) {
      case "dense":
        w.u32(layer.inDim, layer.outDim);
        w.f32s(layer.w);
        w.f32s(layer.b);
        break;
      case "conv":
        w.u32(layer.kh, layer.kw, layer.inC, layer.outC, layer.stride,
              layer.pad === "same" ? 0 : 1);
        w.f32s(layer.w);
        w.f32s(layer.b);
        break;
      case "maxpool":
        w.u32(layer.k, layer.stride);
        break;
    }
  }
  return w.done();
}

/** Parse a GNW buffer back into a Model (used for round-trip checks). */
export function readGnw(data: Buffer): Model {
  if (data.subarray(0, 4).toString("ascii") !== "GNW1") {
    throw new Error("bad magic, not a GNW buffer");
  }
  let pos = 4;
  const u32 = () => {
    const v = data.readUInt32LE(pos);
    pos += 4;
    return v;
  };
  const f32s = (count: number) => {
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) out[i] = data.readFloatLE(pos + 4 * i);
    pos += 4 * count;
    return out;
  };
  const height = u32();
  const width = u32();
  const channels = u32();
  const numClasses = u32();
  const layerCount = u32();
  const layers: Layer[] = [];
  for (let i = 0; i < layerCount; i++) {
    const tag = data.readUInt8(pos);
    pos += 1;
    if (tag === TAGS.dense) {
      const inDim = u32();
      const outDim = u32();
      const layer: DenseLayer = {
        kind: "dense", inDim, outDim, w: f32s(outDim * inDim), b: f32s(outDim),
      };
      layers.push(layer);
    } else if (tag === TAGS.conv) {
      const kh = u32();
      const kw = u32();
      const inC = u32();
      const outC = u32();
      const stride = u32();
      const pad = u32();
      const layer: ConvLayer = {
        kind: "conv", kh, kw, inC, outC, stride,
        pad: pad === 0 ? "same" : "valid",
        w: f32s(outC * inC * kh * kw),
        b: f32s(outC),
      };
      layers.push(layer);
    } else if (tag === TAGS.relu) {
      layers.push({ kind: "relu" });
    } else if (tag === TAGS.maxpool) {
      layers.push({ kind: "maxpool", k: u32(), stride: u32() });
    } else if (tag === TAGS.flatten) {
      layers.push({ kind: "flatten" });
    } else if (tag === TAGS.softmax) {
      layers.push({ kind: "softmax" });
    } else {
      throw new Error(`layer ${i}: unknown tag ${tag}`);
    }
  }
  if (pos !== data.length) throw new Error(`${data.length - pos} trailing bytes`);
  return { height, width, channels, numClasses, layers };
}

/** Cast a model's trainable weights to f32 so in-memory forward passes
 * match the serialized file exactly. */
export function quantizeWeights(model: Model): Model {
  const layers = model.layers.map((layer): Layer => {
    if (layer.kind === "dense" || layer.kind === "conv") {
      return { ...layer, w: Float32Array.from(layer.w), b: Float32Array.from(layer.b) };
    }
    return layer;
  });
  return { ...model, layers };
}
