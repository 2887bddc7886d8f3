/**
 * Just enough pinhole math to sanity-check an exported model: COLMAP
 * stores world-to-camera poses as (qvec, tvec) with qvec in (w, x, y, z)
 * order; a stored 2-D observation should re-project close to the
 * projection of its 3-D point.
 */

import { Camera, Image } from './colmap';

export type Vec3 = [number, number, number];

export function quatToRotation(q: [number, number, number, number]): number[][] {
  const [w, x, y, z] = q;
  const n = w * w + x * x + y * y + z * z;
  const s = n === 0 ? 0 : 2 / n;
  const wx = s * w * x, wy = s * w * y, wz = s * w * z;
  const xx = s * x * x, xy = s * x * y, xz = s * x * z;
  const yy = s * y * y, yz = s * y * z, zz = s * z * z;
  return [
    [1 - (yy + zz), xy - wz, xz + wy],
    [xy + wz, 1 - (xx + zz), yz - wx],
    [xz - wy, yz + wx, 1 - (xx + yy)],
  ];
}

function pinholeParams(camera: Camera): { fx: number; fy: number; cx: number; cy: number } {
  if (camera.model === 'PINHOLE') {
    const [fx, fy, cx, cy] = camera.params;
    return { fx, fy, cx, cy };
  }
  if (camera.model === 'SIMPLE_PINHOLE') {
    const [f, cx, cy] = camera.params;
    return { fx: f, fy: f, cx, cy };
  }
  throw new Error(`unsupported camera model ${camera.model}`);
}

/**
 * Project a world point with an image's pose and camera; returns pixel
 * coordinates in COLMAP's corner-origin convention, or null when the point
 * is at or behind the camera plane.
 */
export function project(
  image: Image, camera: Camera, point: Vec3,
): { x: number; y: number } | null {
  const r = quatToRotation(image.qvec);
  const t = image.tvec;
  const cam: Vec3 = [0, 0, 0];
  for (let i = 0; i < 3; i++) {
    cam[i] = r[i][0] * point[0] + r[i][1] * point[1] + r[i][2] * point[2] + t[i];
  }
  if (cam[2] <= 0) return null;
  const { fx, fy, cx, cy } = pinholeParams(camera);
  return { x: (fx * cam[0]) / cam[2] + cx, y: (fy * cam[1]) / cam[2] + cy };
}
