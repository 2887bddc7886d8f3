/**
 * COLMAP sparse-model reader (text and binary) and text writer.
 *
 * Values pass through verbatim: quaternions stay in COLMAP's (w, x, y, z)
 * order and pixel coordinates keep COLMAP's top-left-corner origin. The
 * consuming pipeline applies its own conventions when it parses the text
 * model this module writes.
 */

import * as fs from 'fs';
import * as path from 'path';

export interface Camera {
  cameraId: number;
  model: string;
  width: number;
  height: number;
  params: number[];
}

export interface Observation {
  x: number;
  y: number;
  point3dId: number; // -1 when the observation has no triangulated point
}

export interface Image {
  imageId: number;
  qvec: [number, number, number, number]; // (w, x, y, z)
  tvec: [number, number, number];
  cameraId: number;
  name: string;
  points2d: Observation[];
}

export interface Point3D {
  point3dId: number;
  xyz: [number, number, number];
  rgb: [number, number, number];
  error: number;
  track: { imageId: number; point2dIdx: number }[];
}

export interface SparseModel {
  cameras: Map<number, Camera>;
  images: Map<number, Image>;
  points: Map<number, Point3D>;
}

const CAMERA_MODELS: Record<number, { name: string; numParams: number }> = {
  0: { name: 'SIMPLE_PINHOLE', numParams: 3 },
  1: { name: 'PINHOLE', numParams: 4 },
  2: { name: 'SIMPLE_RADIAL', numParams: 4 },
  3: { name: 'RADIAL', numParams: 5 },
  4: { name: 'OPENCV', numParams: 8 },
  5: { name: 'OPENCV_FISHEYE', numParams: 8 },
  6: { name: 'FULL_OPENCV', numParams: 12 },
  7: { name: 'FOV', numParams: 5 },
  8: { name: 'SIMPLE_RADIAL_FISHEYE', numParams: 4 },
  9: { name: 'RADIAL_FISHEYE', numParams: 5 },
  10: { name: 'THIN_PRISM_FISHEYE', numParams: 12 },
};

export class ModelFormatError extends Error {}

/** Little-endian binary cursor over a Buffer. */
class Reader {
  private offset = 0;

  constructor(private buf: Buffer, private label: string) {}

  u64(): number {
    const v = this.buf.readBigUInt64LE(this.need(8));
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new ModelFormatError(`${this.label}: 64-bit value out of range`);
    }
    return Number(v);
  }

  i64(): number {
    const v = this.buf.readBigInt64LE(this.need(8));
    if (v > BigInt(Number.MAX_SAFE_INTEGER) || v < BigInt(-Number.MAX_SAFE_INTEGER)) {
      throw new ModelFormatError(`${this.label}: 64-bit value out of range`);
    }
    return Number(v);
  }

  i32(): number {
    return this.buf.readInt32LE(this.need(4));
  }

  u8(): number {
    return this.buf.readUInt8(this.need(1));
  }

  f64(): number {
    return this.buf.readDoubleLE(this.need(8));
  }

  cstring(): string {
    const start = this.offset;
    let end = start;
    while (end < this.buf.length && this.buf[end] !== 0) end++;
    if (end >= this.buf.length) {
      throw new ModelFormatError(`${this.label}: unterminated string`);
    }
    this.offset = end + 1;
    return this.buf.toString('utf8', start, end);
  }

  atEnd(): boolean {
    return this.offset === this.buf.length;
  }

  private need(n: number): number {
    if (this.offset + n > this.buf.length) {
      throw new ModelFormatError(`${this.label}: truncated file`);
    }
    const at = this.offset;
    this.offset += n;
    return at;
  }
}

function readCamerasBinary(file: string): Map<number, Camera> {
  const r = new Reader(fs.readFileSync(file), path.basename(file));
  const cameras = new Map<number, Camera>();
  const count = r.u64();
  for (let i = 0; i < count; i++) {
    const cameraId = r.i32();
    const modelId = r.i32();
    const width = r.u64();
    const height = r.u64();
    const model = CAMERA_MODELS[modelId];
    if (!model) {
      throw new ModelFormatError(`cameras.bin: unknown camera model id ${modelId}`);
    }
    const params: number[] = [];
    for (let p = 0; p < model.numParams; p++) params.push(r.f64());
    cameras.set(cameraId, { cameraId, model: model.name, width, height, params });
  }
  return cameras;
}

function readImagesBinary(file: string): Map<number, Image> {
  const r = new Reader(fs.readFileSync(file), path.basename(file));
  const images = new Map<number, Image>();
  const count = r.u64();
  for (let i = 0; i < count; i++) {
    const imageId = r.i32();
    const qvec: [number, number, number, number] = [r.f64(), r.f64(), r.f64(), r.f64()];
    const tvec: [number, number, number] = [r.f64(), r.f64(), r.f64()];
    const cameraId = r.i32();
    const name = r.cstring();
    const numPoints = r.u64();
    const points2d: Observation[] = [];
    for (let p = 0; p < numPoints; p++) {
      points2d.push({ x: r.f64(), y: r.f64(), point3dId: r.i64() });
    }
    images.set(imageId, { imageId, qvec, tvec, cameraId, name, points2d });
  }
  return images;
}

function readPoints3dBinary(file: string): Map<number, Point3D> {
  const r = new Reader(fs.readFileSync(file), path.basename(file));
  const points = new Map<number, Point3D>();
  const count = r.u64();
  for (let i = 0; i < count; i++) {
    const point3dId = r.u64();
    const xyz: [number, number, number] = [r.f64(), r.f64(), r.f64()];
    const rgb: [number, number, number] = [r.u8(), r.u8(), r.u8()];
    const error = r.f64();
    const trackLen = r.u64();
    const track: { imageId: number; point2dIdx: number }[] = [];
    for (let t = 0; t < trackLen; t++) {
      track.push({ imageId: r.i32(), point2dIdx: r.i32() });
    }
    points.set(point3dId, { point3dId, xyz, rgb, error, track });
  }
  return points;
}

function contentLines(file: string): string[][] {
  return fs
    .readFileSync(file, 'utf8')
    .split('\n')
    .map(line => line.trim())
    .filter(line => line.length > 0 && !line.startsWith('#'))
    .map(line => line.split(/\s+/));
}

function readCamerasText(file: string): Map<number, Camera> {
  const cameras = new Map<number, Camera>();
  for (const parts of contentLines(file)) {
    if (parts.length < 4) throw new ModelFormatError('cameras.txt: short line');
    cameras.set(parseInt(parts[0], 10), {
      cameraId: parseInt(parts[0], 10),
      model: parts[1],
      width: parseInt(parts[2], 10),
      height: parseInt(parts[3], 10),
      params: parts.slice(4).map(Number),
    });
  }
  return cameras;
}

function readImagesText(file: string): Map<number, Image> {
  const images = new Map<number, Image>();
  const lines = fs
    .readFileSync(file, 'utf8')
    .split('\n')
    .filter(line => !line.trim().startsWith('#'));
  let i = 0;
  const nextContent = (): string | null => {
    while (i < lines.length) {
      const line = lines[i++];
      if (line.trim().length > 0) return line.trim();
    }
    return null;
  };
  for (;;) {
    const pose = nextContent();
    if (pose === null) break;
    const parts = pose.split(/\s+/);
    if (parts.length < 10) throw new ModelFormatError('images.txt: short image line');
    // Observation line may legitimately be empty.
    let obsLine: string = '';
    while (i < lines.length) {
      obsLine = lines[i++].trim();
      break;
    }
    const fields = obsLine.length ? obsLine.split(/\s+/) : [];
    if (fields.length % 3 !== 0) {
      throw new ModelFormatError('images.txt: observations not a multiple of 3');
    }
    const points2d: Observation[] = [];
    for (let f = 0; f < fields.length; f += 3) {
      points2d.push({
        x: Number(fields[f]),
        y: Number(fields[f + 1]),
        point3dId: parseInt(fields[f + 2], 10),
      });
    }
    images.set(parseInt(parts[0], 10), {
      imageId: parseInt(parts[0], 10),
      qvec: [Number(parts[1]), Number(parts[2]), Number(parts[3]), Number(parts[4])],
      tvec: [Number(parts[5]), Number(parts[6]), Number(parts[7])],
      cameraId: parseInt(parts[8], 10),
      name: parts[9],
      points2d,
    });
  }
  return images;
}

function readPoints3dText(file: string): Map<number, Point3D> {
  const points = new Map<number, Point3D>();
  for (const parts of contentLines(file)) {
    if (parts.length < 8 || (parts.length - 8) % 2 !== 0) {
      throw new ModelFormatError('points3D.txt: malformed point line');
    }
    const track: { imageId: number; point2dIdx: number }[] = [];
    for (let t = 8; t < parts.length; t += 2) {
      track.push({ imageId: parseInt(parts[t], 10), point2dIdx: parseInt(parts[t + 1], 10) });
    }
    points.set(parseInt(parts[0], 10), {
      point3dId: parseInt(parts[0], 10),
      xyz: [Number(parts[1]), Number(parts[2]), Number(parts[3])],
      rgb: [parseInt(parts[4], 10), parseInt(parts[5], 10), parseInt(parts[6], 10)],
      error: Number(parts[7]),
      track,
    });
  }
  return points;
}

/**
 * Read a COLMAP model directory, auto-detecting binary (.bin) vs text (.txt).
 * Binary takes precedence when both are present.
 */
export function readModel(dir: string): SparseModel {
  const bin = (name: string) => path.join(dir, `${name}.bin`);
  const txt = (name: string) => path.join(dir, `${name}.txt`);
  if (fs.existsSync(bin('cameras'))) {
    for (const name of ['images', 'points3D']) {
      if (!fs.existsSync(bin(name))) {
        throw new ModelFormatError(`missing ${name}.bin in ${dir}`);
      }
    }
    return {
      cameras: readCamerasBinary(bin('cameras')),
      images: readImagesBinary(bin('images')),
      points: readPoints3dBinary(bin('points3D')),
    };
  }
  if (fs.existsSync(txt('cameras'))) {
    for (const name of ['images', 'points3D']) {
      if (!fs.existsSync(txt(name))) {
        throw new ModelFormatError(`missing ${name}.txt in ${dir}`);
      }
    }
    return {
      cameras: readCamerasText(txt('cameras')),
      images: readImagesText(txt('images')),
      points: readPoints3dText(txt('points3D')),
    };
  }
  throw new ModelFormatError(`no COLMAP model (cameras.bin or cameras.txt) in ${dir}`);
}

/** Shortest decimal form that round-trips through a double. */
function fmt(x: number): string {
  return Object.is(x, -0) ? '-0.0' : String(x);
}

/** Write a model in COLMAP text form (sorted by id for determinism). */
export function writeModelText(model: SparseModel, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });

  const cameraLines = [
    '# Camera list with one line of data per camera:',
    '#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]',
  ];
  for (const id of [...model.cameras.keys()].sort((a, b) => a - b)) {
    const c = model.cameras.get(id)!;
    cameraLines.push(
      `${c.cameraId} ${c.model} ${c.width} ${c.height} ${c.params.map(fmt).join(' ')}`,
    );
  }
  fs.writeFileSync(path.join(dir, 'cameras.txt'), cameraLines.join('\n') + '\n');

  const imageLines = [
    '# Image list with two lines of data per image:',
    '#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME',
    '#   POINTS2D[] as (X, Y, POINT3D_ID)',
  ];
  for (const id of [...model.images.keys()].sort((a, b) => a - b)) {
    const im = model.images.get(id)!;
    imageLines.push(
      `${im.imageId} ${im.qvec.map(fmt).join(' ')} ${im.tvec.map(fmt).join(' ')} ` +
        `${im.cameraId} ${im.name}`,
    );
    imageLines.push(
      im.points2d.map(o => `${fmt(o.x)} ${fmt(o.y)} ${o.point3dId}`).join(' '),
    );
  }
  fs.writeFileSync(path.join(dir, 'images.txt'), imageLines.join('\n') + '\n');

  const pointLines = [
    '# 3D point list with one line of data per point:',
    '#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)',
  ];
  for (const id of [...model.points.keys()].sort((a, b) => a - b)) {
    const p = model.points.get(id)!;
    const track = p.track.map(t => `${t.imageId} ${t.point2dIdx}`).join(' ');
    pointLines.push(
      `${p.point3dId} ${p.xyz.map(fmt).join(' ')} ${p.rgb.join(' ')} ${fmt(p.error)} ${track}`,
    );
  }
  fs.writeFileSync(path.join(dir, 'points3D.txt'), pointLines.join('\n') + '\n');
}
