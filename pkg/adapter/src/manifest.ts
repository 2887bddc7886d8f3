/**
 * Export manifest: the same "key = value" format the pipeline's config
 * files use, with one `depth <image name> = <vggt path> <mono path>` line
 * per view. Relative paths resolve against the manifest's directory.
 *
 * Example:
 *
 *     model = sparse/0
 *     out = exported_scene        # optional, CLI --out overrides
 *     depth img_001.jpg = pred/img_001_mv.npy pred/img_001_mono.npy
 */

import * as path from 'path';

export interface DepthEntry {
  vggt: string;
  mono: string;
}

export interface ExportManifest {
  modelDir: string;
  outDir?: string;
  depths: Map<string, DepthEntry>;
}

export class ManifestError extends Error {}

export function parseManifest(text: string, baseDir: string): ExportManifest {
  let modelDir: string | undefined;
  let outDir: string | undefined;
  const depths = new Map<string, DepthEntry>();

  const resolve = (p: string) => path.resolve(baseDir, p);

  text.split('\n').forEach((raw, index) => {
    const line = raw.split('#', 1)[0].trim();
    if (!line) return;
    const eq = line.indexOf('=');
    if (eq < 0) {
      throw new ManifestError(`manifest line ${index + 1}: expected 'key = value'`);
    }
    const key = line.slice(0, eq).trim();
    const value = line.slice(eq + 1).trim();
    if (key === 'model') {
      modelDir = resolve(value);
    } else if (key === 'out') {
      outDir = resolve(value);
    } else if (key.startsWith('depth ')) {
      const imageName = key.slice('depth '.length).trim();
      const parts = value.split(/\s+/);
      if (!imageName || parts.length !== 2) {
        throw new ManifestError(
          `manifest line ${index + 1}: expected 'depth <image> = <vggt> <mono>'`,
        );
      }
      depths.set(imageName, { vggt: resolve(parts[0]), mono: resolve(parts[1]) });
    } else {
      throw new ManifestError(`manifest line ${index + 1}: unknown key '${key}'`);
    }
  });

  if (!modelDir) {
    throw new ManifestError("manifest is missing the 'model' key");
  }
  return { modelDir, outDir, depths };
}
