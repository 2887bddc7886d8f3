#!/usr/bin/env node
/**
 * depthfield-adapter --manifest FILE [--out DIR]
 *
 * Exit codes: 0 success (possibly with skipped views), 1 usage error,
 * 2 data error (unreadable model/manifest, or every view skipped).
 */

import * as fs from 'fs';
import * as path from 'path';

import { ModelFormatError } from './colmap';
import { exportScene } from './export';
import { ManifestError, parseManifest } from './manifest';

function usage(message: string): number {
  process.stderr.write(`usage error: ${message}\n`);
  process.stderr.write('usage: depthfield-adapter --manifest FILE [--out DIR]\n');
  return 1;
}

export function main(argv: string[]): number {
  let manifestPath: string | undefined;
  let outDir: string | undefined;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === '--manifest') manifestPath = argv[++i];
    else if (argv[i] === '--out') outDir = argv[++i];
    else return usage(`unknown argument '${argv[i]}'`);
  }
  if (!manifestPath) return usage('--manifest is required');
  if (!fs.existsSync(manifestPath)) {
    process.stderr.write(`data error: manifest ${manifestPath} not found\n`);
    return 2;
  }

  try {
    const manifest = parseManifest(
      fs.readFileSync(manifestPath, 'utf8'),
      path.dirname(path.resolve(manifestPath)),
    );
    const target = outDir ?? manifest.outDir;
    if (!target) return usage("no output directory ('out' key or --out flag)");

    const summary = exportScene(manifest, target);
    for (const skip of summary.skipped) {
      process.stderr.write(`skipped ${skip.name}: ${skip.reason}\n`);
    }
    process.stdout.write(
      `exported ${summary.exported.length} view(s), ` +
        `${summary.points} point(s), skipped ${summary.skipped.length}\n`,
    );
    if (summary.exported.length === 0) {
      process.stderr.write('data error: every view was skipped\n');
      return 2;
    }
    return 0;
  } catch (err) {
    if (err instanceof ManifestError || err instanceof ModelFormatError) {
      process.stderr.write(`data error: ${err.message}\n`);
      return 2;
    }
    throw err;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
