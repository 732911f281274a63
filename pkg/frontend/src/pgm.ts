// Minimal binary PGM (P5, 8-bit) decoder for the bundle's heat-map images.

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array;
}

export function parsePgm(bytes: Uint8Array): GrayImage {
  const ascii = new TextDecoder("ascii");
  // header = magic, dims, maxval separated by whitespace; body follows the
  // single whitespace byte after maxval
  let pos = 0;
  const tokens: string[] = [];
  while (tokens.length < 4 && pos < bytes.length) {
    while (pos < bytes.length && /\s/.test(ascii.decode(bytes.subarray(pos, pos + 1)))) pos++;
    let start = pos;
    while (pos < bytes.length && !/\s/.test(ascii.decode(bytes.subarray(pos, pos + 1)))) pos++;
    tokens.push(ascii.decode(bytes.subarray(start, pos)));
  }
  pos++; // the single whitespace that terminates the maxval token
  const [magic, w, h, maxval] = tokens;
  if (magic !== "P5" || maxval !== "255") {
    throw new Error("unsupported graymap (want binary 8-bit P5)");
  }
  const width = parseInt(w, 10);
  const height = parseInt(h, 10);
  const pixels = bytes.subarray(pos, pos + width * height);
  if (pixels.length !== width * height) {
    throw new Error("graymap body truncated");
  }
  return { width, height, pixels: new Uint8Array(pixels) };
}

/** Render with a simple heat ramp onto RGBA for a canvas ImageData buffer. */
export function toRgba(img: GrayImage): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(img.width * img.height * 4));
  for (let i = 0; i < img.pixels.length; i++) {
    const v = img.pixels[i];
    out[4 * i] = v;
    out[4 * i + 1] = Math.round(v * 0.55);
    out[4 * i + 2] = 48 + Math.round((255 - v) * 0.3);
    out[4 * i + 3] = 255;
  }
  return out;
}
