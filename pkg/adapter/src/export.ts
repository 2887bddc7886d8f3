/**
 * Scene export: COLMAP model + saved depth arrays -> pipeline scene directory.
 *
 * Views listed in the manifest with readable, shape-compatible depth arrays
 * are exported; everything else lands in the skipped list with a reason.
 * Skipped views are removed from the exported model, and points left with
 * fewer than two observations are dropped so the output always satisfies
 * the pipeline's model invariants. Depth values are passed through
 * unchanged (bit-exact for float32 sources); only the consuming pipeline
 * ever resamples spatially.
 */

import * as fs from 'fs';
import * as path from 'path';

import { Image, Point3D, SparseModel, readModel, writeModelText } from './colmap';
import { ExportManifest } from './manifest';
import { DepthArray, NpyFormatError, readNpy } from './npy';
import { writePfm } from './pfm';

export interface SkippedView {
  name: string;
  reason: string;
}

export interface ExportSummary {
  exported: string[];
  skipped: SkippedView[];
  points: number;
}

export class ExportError extends Error {}

const ASPECT_TOLERANCE = 0.02;

function loadDepth(file: string, camWidth: number, camHeight: number): DepthArray {
  if (!fs.existsSync(file)) {
    throw new ExportError(`depth file not found: ${file}`);
  }
  let arr: DepthArray;
  try {
    arr = readNpy(fs.readFileSync(file));
  } catch (err) {
    if (err instanceof NpyFormatError) {
      throw new ExportError(`${file}: ${err.message}`);
    }
    throw err;
  }
  if (arr.width < 2 || arr.height < 2) {
    throw new ExportError(`${file}: degenerate array ${arr.width}x${arr.height}`);
  }
  const aspectArr = arr.width / arr.height;
  const aspectCam = camWidth / camHeight;
  if (Math.abs(aspectArr - aspectCam) > ASPECT_TOLERANCE * aspectCam) {
    throw new ExportError(
      `${file}: aspect ratio ${aspectArr.toFixed(4)} does not match camera ` +
        `${aspectCam.toFixed(4)}`,
    );
  }
  return arr;
}

function pruneModel(model: SparseModel, keptImageIds: Set<number>): SparseModel {
  const images = new Map<number, Image>();
  for (const [id, image] of model.images) {
    if (keptImageIds.has(id)) images.set(id, image);
  }
  const points = new Map<number, Point3D>();
  for (const [id, point] of model.points) {
    const track = point.track.filter(t => keptImageIds.has(t.imageId));
    if (track.length >= 2) {
      points.set(id, { ...point, track });
    }
  }
  // Re-point observations of dropped points at "no point" so the exported
  // model stays internally consistent.
  for (const image of images.values()) {
    image.points2d = image.points2d.map(obs =>
      obs.point3dId >= 0 && !points.has(obs.point3dId)
        ? { ...obs, point3dId: -1 }
        : obs,
    );
  }
  return { cameras: model.cameras, images, points };
}

/** Run the export; returns the summary (exit-code policy is the CLI's). */
export function exportScene(manifest: ExportManifest, outDir: string): ExportSummary {
  const model = readModel(manifest.modelDir);
  const exported: string[] = [];
  const skipped: SkippedView[] = [];
  const keptIds = new Set<number>();
  const depthsByStem = new Map<string, { vggt: DepthArray; mono: DepthArray }>();

  const byId = [...model.images.keys()].sort((a, b) => a - b);
  for (const imageId of byId) {
    const image = model.images.get(imageId)!;
    const camera = model.cameras.get(image.cameraId);
    if (!camera) {
      skipped.push({ name: image.name, reason: `unknown camera id ${image.cameraId}` });
      continue;
    }
    const entry = manifest.depths.get(image.name);
    if (!entry) {
      skipped.push({ name: image.name, reason: 'no depth entry in manifest' });
      continue;
    }
    try {
      const vggt = loadDepth(entry.vggt, camera.width, camera.height);
      const mono = loadDepth(entry.mono, camera.width, camera.height);
      depthsByStem.set(path.parse(image.name).name, { vggt, mono });
      keptIds.add(imageId);
      exported.push(image.name);
    } catch (err) {
      if (err instanceof ExportError) {
        skipped.push({ name: image.name, reason: err.message });
        continue;
      }
      throw err;
    }
  }

  if (exported.length === 0) {
    return { exported, skipped, points: 0 };
  }

  const pruned = pruneModel(model, keptIds);
  fs.mkdirSync(outDir, { recursive: true });
  writeModelText(pruned, outDir);
  const depthDir = path.join(outDir, 'depth');
  fs.mkdirSync(depthDir, { recursive: true });
  for (const [stem, { vggt, mono }] of depthsByStem) {
    fs.writeFileSync(path.join(depthDir, `${stem}_vggt.pfm`), writePfm(vggt));
    fs.writeFileSync(path.join(depthDir, `${stem}_mono.pfm`), writePfm(mono));
  }
  return { exported, skipped, points: pruned.points.size };
}
