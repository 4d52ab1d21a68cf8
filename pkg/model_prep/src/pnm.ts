/** Binary PGM (P5) and PPM (P6) writers, maxval fixed at 255. */

export function writePgm(pixels: Uint8Array, height: number, width: number): Buffer {
  if (pixels.length !== height * width) throw new Error("pixel count != h*w");
  return Buffer.concat([
    Buffer.from(`P5\n${width} ${height}\n255\n`, "ascii"),
    Buffer.from(pixels),
  ]);
}

export function writePpm(pixels: Uint8Array, height: number, width: number): Buffer {
  if (pixels.length !== height * width * 3) throw new Error("pixel count != h*w*3");
  return Buffer.concat([
    Buffer.from(`P6\n${width} ${height}\n255\n`, "ascii"),
    Buffer.from(pixels),
  ]);
}
