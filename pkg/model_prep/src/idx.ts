/** IDX readers/writers (big-endian headers, uint8 payloads). */

export function readIdxImages(data: Buffer): { images: Uint8Array; rows: number; cols: number } {
  if (data.length < 16 || data.readUInt32BE(0) !== 0x803) {
    throw new Error("bad IDX image magic");
  }
  const n = data.readUInt32BE(4);
  const rows = data.readUInt32BE(8);
  const cols = data.readUInt32BE(12);
  if (data.length !== 16 + n * rows * cols) throw new Error("IDX image size mismatch");
  return { images: Uint8Array.from(data.subarray(16)), rows, cols };
}

export function readIdxLabels(data: Buffer): Uint8Array {
  if (data.length < 8 || data.readUInt32BE(0) !== 0x801) {
    throw new Error("bad IDX label magic");
  }
  const n = data.readUInt32BE(4);
  if (data.length !== 8 + n) throw new Error("IDX label size mismatch");
  return Uint8Array.from(data.subarray(8));
}

export function writeIdxImages(images: Uint8Array, rows: number, cols: number): Buffer {
  if (images.length % (rows * cols) !== 0) {
    throw new Error(`pixel count ${images.length} not a multiple of ${rows}x${cols}`);
  }
  const n = images.length / (rows * cols);
  const header = Buffer.alloc(16);
  header.writeUInt32BE(0x803, 0);
  header.writeUInt32BE(n, 4);
  header.writeUInt32BE(rows, 8);
  header.writeUInt32BE(cols, 12);
  return Buffer.concat([header, Buffer.from(images)]);
}

export function writeIdxLabels(labels: Uint8Array): Buffer {
  const header = Buffer.alloc(8);
  header.writeUInt32BE(0x801, 0);
  header.writeUInt32BE(labels.length, 4);
  return Buffer.concat([header, Buffer.from(labels)]);
}
