/**
 * Grayscale PFM writer matching the pipeline's depth-map format:
 * "Pf" magic, negative scale for little-endian, rows stored bottom-to-top.
 */

import { DepthArray } from './npy';

/** Encode a depth array as little-endian grayscale PFM. */
export function writePfm(arr: DepthArray): Buffer {
  const header = Buffer.from(`Pf\n${arr.width} ${arr.height}\n-1.0000\n`, 'ascii');
  const payload = Buffer.alloc(arr.width * arr.height * 4);
  let at = 0;
  for (let row = arr.height - 1; row >= 0; row--) {
    for (let col = 0; col < arr.width; col++) {
      payload.writeFloatLE(Math.fround(arr.values[row * arr.width + col]), at);
      at += 4;
    }
  }
  return Buffer.concat([header, payload]);
}
