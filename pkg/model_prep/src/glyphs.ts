/** Synthetic digit dataset: a 5x7 dot-matrix font rendered at 28x28 with
 * per-sample jitter, intensity variation, and pixel noise.  Stands in for
 * handwritten digits at desk scale while staying fully deterministic. */

import { Rng } from "./prng.js";

export const IMG = 28;

// rows top to bottom, 5 bits per row, MSB = leftmost column
const FONT: number[][] = [
  [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
  [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
  [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
  [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
  [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
  [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
  [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
  [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
  [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
  [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

const SCALE = 3; // glyph covers 15x21 of the 28x28 canvas

/** One 28x28 uint8 image of `digit`, randomly shifted, scaled and noised. */
export function renderDigit(digit: number, rng: Rng): Uint8Array {
  if (digit < 0 || digit > 9) throw new Error(`no glyph for class ${digit}`);
  const img = new Float64Array(IMG * IMG);
  const ink = rng.uniform(0.65, 1.0);
  const dx = 6 + rng.int(5) - 2; // horizontal margin 6 +- 2
  const dy = 3 + rng.int(5) - 2;
  const rows = FONT[digit];
  for (let r = 0; r < 7; r++) {
    for (let c = 0; c < 5; c++) {
      if (((rows[r] >> (4 - c)) & 1) === 0) continue;
      for (let sy = 0; sy < SCALE; sy++) {
        for (let sx = 0; sx < SCALE; sx++) {
          const y = dy + r * SCALE + sy;
          const x = dx + c * SCALE + sx;
          if (y >= 0 && y < IMG && x >= 0 && x < IMG) img[y * IMG + x] = ink;
        }
      }
    }
  }
  const out = new Uint8Array(IMG * IMG);
  for (let i = 0; i < img.length; i++) {
    const noisy = img[i] + 0.12 * rng.gauss();
    const v = Math.min(1, Math.max(0, noisy));
    out[i] = Math.round(v * 255);
  }
  return out;
}

export interface Dataset {
  images: Uint8Array; // n * 28 * 28, row-major
  labels: Uint8Array;
  count: number;
}

/** `perClass` samples of each digit in a shuffled deterministic order. */
export function makeDataset(perClass: number, seed: number): Dataset {
  const rng = new Rng(seed);
  const count = perClass * 10;
  const order = new Int32Array(count);
  for (let i = 0; i < count; i++) order[i] = i % 10;
  rng.shuffle(order);
  const images = new Uint8Array(count * IMG * IMG);
  const labels = new Uint8Array(count);
  for (let i = 0; i < count; i++) {
    labels[i] = order[i];
    images.set(renderDigit(order[i], rng), i * IMG * IMG);
  }
  return { images, labels, count };
}
