/**
 * Minimal .npy reader for 2-D float arrays (the common container numeric
 * toolkits use to dump per-image depth predictions).
 *
 * Supports format versions 1.0/2.0, little- and big-endian float32/float64,
 * C order only.
 */

export class NpyFormatError extends Error {}

export interface DepthArray {
  width: number;
  height: number;
  /** Row-major, top-to-bottom, length width * height. */
  values: Float64Array;
}

const MAGIC = Buffer.from('\x93NUMPY', 'latin1');

function parseHeaderDict(header: string): { descr: string; fortran: boolean; shape: number[] } {
  const descr = /'descr'\s*:\s*'([^']+)'/.exec(header);
  const fortran = /'fortran_order'\s*:\s*(True|False)/.exec(header);
  const shape = /'shape'\s*:\s*\(([^)]*)\)/.exec(header);
  if (!descr || !fortran || !shape) {
    throw new NpyFormatError(`unparseable npy header: ${header.trim()}`);
  }
  const dims = shape[1]
    .split(',')
    .map(s => s.trim())
    .filter(s => s.length > 0)
    .map(s => parseInt(s, 10));
  return { descr: descr[1], fortran: fortran[1] === 'True', shape: dims };
}

/** Decode a .npy buffer into a 2-D float64 depth array. */
export function readNpy(buf: Buffer): DepthArray {
  if (buf.length < 10 || !buf.subarray(0, 6).equals(MAGIC)) {
    throw new NpyFormatError('not a npy buffer (bad magic)');
  }
  const major = buf.readUInt8(6);
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else if (major === 2 || major === 3) {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  } else {
    throw new NpyFormatError(`unsupported npy version ${major}`);
  }
  const header = buf.toString('latin1', headerStart, headerStart + headerLen);
  const { descr, fortran, shape } = parseHeaderDict(header);
  if (fortran) {
    throw new NpyFormatError('fortran-order npy arrays are not supported');
  }
  if (shape.length !== 2) {
    throw new NpyFormatError(`depth array must be 2-D, got shape (${shape.join(', ')})`);
  }
  const [height, width] = shape;
  const n = width * height;
  const payload = buf.subarray(headerStart + headerLen);

  const little = descr.startsWith('<') || descr.startsWith('|');
  const kind = descr.replace(/^[<>|=]/, '');
  let itemSize: number;
  if (kind === 'f4') itemSize = 4;
  else if (kind === 'f8') itemSize = 8;
  else throw new NpyFormatError(`unsupported dtype ${descr} (need float32/float64)`);
  if (payload.length < n * itemSize) {
    throw new NpyFormatError('truncated npy payload');
  }

  const values = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const at = i * itemSize;
    if (itemSize === 4) {
      values[i] = little ? payload.readFloatLE(at) : payload.readFloatBE(at);
    } else {
      values[i] = little ? payload.readDoubleLE(at) : payload.readDoubleBE(at);
    }
  }
  return { width, height, values };
}

/** Encode a 2-D array as npy v1.0 (little-endian float32). Test helper. */
export function writeNpy(arr: DepthArray): Buffer {
  let header = `{'descr': '<f4', 'fortran_order': False, 'shape': (${arr.height}, ${arr.width}), }`;
  const unpadded = 10 + header.length + 1;
  header = header + ' '.repeat((64 - (unpadded % 64)) % 64) + '\n';
  const head = Buffer.alloc(10 + header.length);
  MAGIC.copy(head, 0);
  head.writeUInt8(1, 6);
  head.writeUInt8(0, 7);
  head.writeUInt16LE(header.length, 8);
  head.write(header, 10, 'latin1');
  const payload = Buffer.alloc(arr.values.length * 4);
  for (let i = 0; i < arr.values.length; i++) {
    payload.writeFloatLE(Math.fround(arr.values[i]), i * 4);
  }
  return Buffer.concat([head, payload]);
}
