/**
 * Test fixtures: a small geometrically consistent model written in both
 * COLMAP text and binary form, built independently of the code under test.
 */

import * as fs from 'fs';
import * as path from 'path';

import { SparseModel } from '../src/colmap';

/** A 3-view PINHOLE model whose observations are exact projections. */
export function fixtureModel(): SparseModel {
  const fx = 100, fy = 100, cx = 32, cy = 32; // COLMAP corner-origin cx/cy
  const cameras = new Map();
  cameras.set(1, { cameraId: 1, model: 'PINHOLE', width: 64, height: 64, params: [fx, fy, cx, cy] });

  const camCenters: [number, number, number][] = [
    [0, 0, 0],
    [0.2, 0, 0],
    [0.4, 0.1, 0],
  ];
  const points3d: [number, number, number][] = [
    [0.1, 0.0, 2.0],
    [-0.2, 0.1, 2.5],
    [0.3, -0.1, 3.0],
    [0.0, 0.2, 2.2],
  ];

  const images = new Map();
  const observations: Map<number, { imageId: number; point2dIdx: number }[]> = new Map();
  points3d.forEach((_, pid) => observations.set(pid + 1, []));

  const neg = (v: number) => (v === 0 ? 0 : -v);
  camCenters.forEach((center, i) => {
    const imageId = i + 1;
    // Identity rotation, world-to-camera translation = -center.
    const tvec: [number, number, number] = [neg(center[0]), neg(center[1]), neg(center[2])];
    const points2d: { x: number; y: number; point3dId: number }[] = [];
    points3d.forEach((p, pid) => {
      const z = p[2] - center[2];
      const x = (fx * (p[0] - center[0])) / z + cx;
      const y = (fy * (p[1] - center[1])) / z + cy;
      observations.get(pid + 1)!.push({ imageId, point2dIdx: points2d.length });
      points2d.push({ x, y, point3dId: pid + 1 });
    });
    images.set(imageId, {
      imageId,
      qvec: [1, 0, 0, 0] as [number, number, number, number],
      tvec,
      cameraId: 1,
      name: `view_${String(i).padStart(4, '0')}.png`,
      points2d,
    });
  });

  const points = new Map();
  points3d.forEach((p, pid) => {
    points.set(pid + 1, {
      point3dId: pid + 1,
      xyz: p,
      rgb: [120, 130, 140] as [number, number, number],
      error: 0.4,
      track: observations.get(pid + 1)!,
    });
  });
  return { cameras, images, points };
}

const MODEL_IDS: Record<string, number> = { SIMPLE_PINHOLE: 0, PINHOLE: 1 };

/** Serialize a model in COLMAP *binary* form (independent of src/colmap). */
export function writeModelBinary(model: SparseModel, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });

  const chunks: Buffer[] = [];
  const u64 = (v: number) => {
    const b = Buffer.alloc(8);
    b.writeBigUInt64LE(BigInt(v));
    return b;
  };
  const i64 = (v: number) => {
    const b = Buffer.alloc(8);
    b.writeBigInt64LE(BigInt(v));
    return b;
  };
  const i32 = (v: number) => {
    const b = Buffer.alloc(4);
    b.writeInt32LE(v);
    return b;
  };
  const f64 = (v: number) => {
    const b = Buffer.alloc(8);
    b.writeDoubleLE(v);
    return b;
  };
  const u8 = (v: number) => Buffer.from([v]);

  chunks.length = 0;
  chunks.push(u64(model.cameras.size));
  for (const c of model.cameras.values()) {
    chunks.push(i32(c.cameraId), i32(MODEL_IDS[c.model]), u64(c.width), u64(c.height));
    for (const p of c.params) chunks.push(f64(p));
  }
  fs.writeFileSync(path.join(dir, 'cameras.bin'), Buffer.concat(chunks));

  chunks.length = 0;
  chunks.push(u64(model.images.size));
  for (const im of model.images.values()) {
    chunks.push(i32(im.imageId));
    for (const q of im.qvec) chunks.push(f64(q));
    for (const t of im.tvec) chunks.push(f64(t));
    chunks.push(i32(im.cameraId));
    chunks.push(Buffer.from(im.name, 'utf8'), u8(0));
    chunks.push(u64(im.points2d.length));
    for (const o of im.points2d) {
      chunks.push(f64(o.x), f64(o.y), i64(o.point3dId));
    }
  }
  fs.writeFileSync(path.join(dir, 'images.bin'), Buffer.concat(chunks));

  chunks.length = 0;
  chunks.push(u64(model.points.size));
  for (const p of model.points.values()) {
    chunks.push(u64(p.point3dId));
    for (const v of p.xyz) chunks.push(f64(v));
    for (const v of p.rgb) chunks.push(u8(v));
    chunks.push(f64(p.error));
    chunks.push(u64(p.track.length));
    for (const t of p.track) chunks.push(i32(t.imageId), i32(t.point2dIdx));
  }
  fs.writeFileSync(path.join(dir, 'points3D.bin'), Buffer.concat(chunks));
}

/** Serialize the same model in COLMAP *text* form (independent writer). */
export function writeModelTextFixture(model: SparseModel, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });
  const cam = [...model.cameras.values()]
    .map(c => `${c.cameraId} ${c.model} ${c.width} ${c.height} ${c.params.join(' ')}`)
    .join('\n');
  fs.writeFileSync(path.join(dir, 'cameras.txt'), `# cameras\n${cam}\n`);

  const img = [...model.images.values()]
    .map(im => {
      const pose = `${im.imageId} ${im.qvec.join(' ')} ${im.tvec.join(' ')} ${im.cameraId} ${im.name}`;
      const obs = im.points2d.map(o => `${o.x} ${o.y} ${o.point3dId}`).join(' ');
      return `${pose}\n${obs}`;
    })
    .join('\n');
  fs.writeFileSync(path.join(dir, 'images.txt'), `# images\n${img}\n`);

  const pts = [...model.points.values()]
    .map(p => {
      const track = p.track.map(t => `${t.imageId} ${t.point2dIdx}`).join(' ');
      return `${p.point3dId} ${p.xyz.join(' ')} ${p.rgb.join(' ')} ${p.error} ${track}`;
    })
    .join('\n');
  fs.writeFileSync(path.join(dir, 'points3D.txt'), `# points\n${pts}\n`);
}
