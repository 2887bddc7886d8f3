export { readModel, writeModelText, ModelFormatError } from './colmap';
export type { Camera, Image, Observation, Point3D, SparseModel } from './colmap';
export { readNpy, writeNpy, NpyFormatError } from './npy';
export type { DepthArray } from './npy';
export { writePfm } from './pfm';
export { parseManifest, ManifestError } from './manifest';
export type { DepthEntry, ExportManifest } from './manifest';
export { exportScene, ExportError } from './export';
export type { ExportSummary, SkippedView } from './export';
export { project, quatToRotation } from './geometry';
