"""Pixel-wise depth correction field with global-then-local training.

Every anchor contributes one sample: a raw 5-vector (multi-view depth,
monocular depth, normalized pixel u, v, normalized view index) and the
anchor's camera-frame depth as target. A shared coordinate network maps
the encoded 5-vector to four coefficients; each depth is corrected as
``exp(alpha) * d + beta``, which keeps the learned scale positive.

Training runs in two stages: one global optimization over all views'
samples that absorbs scene-wide bias, then a short warm-started fine-tune
per view. Fine-tuning never regresses: if the tuned weights fit a view's
anchors worse than the global weights, the global weights are kept.
"""

from __future__ import annotations

import concurrent.futures
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .coordnet import (
    AdamWState,
    LrSchedule,
    MlpParams,
    NumericFailure,
    PosEncConfig,
    adamw_step,
    correction_loss_and_grad,
    correction_outputs,
    cosine_warm_restart_lr,
    init_mlp,
    mlp_forward,
    positional_encode,
    read_weights,
    write_weights,
)
from .geometry import View, normalize_pixel, normalized_view_index
from .scene_io import DepthMap

logger = logging.getLogger(__name__)

__all__ = [
    "SampleSet",
    "StageConfig",
    "TrainConfig",
    "CorrectionField",
    "build_training_set",
    "correct_depth_pair",
    "sparse_l1_loss",
    "train_global",
    "finetune_view",
    "train_field",
    "correct_depth_maps",
    "save_field",
    "load_field",
]

HIDDEN_WIDTH = 64
HIDDEN_LAYERS = 6
INPUT_DIM = 5
OUTPUT_DIM = 4


@dataclass(eq=False)
class SampleSet:
    """Correction samples in batched form.

    ``z`` holds one raw 5-vector per row: (d_v, d_m, u, v, iota); ``target``
    the anchor depths; ``view_ids`` the owning view of each row.
    ``depth_scale`` is the scene's median anchor depth, used to condition
    the encoder inputs (the correction itself acts on raw depths).
    """

    z: np.ndarray
    target: np.ndarray
    view_ids: np.ndarray
    depth_scale: float

    def __len__(self) -> int:
        return len(self.target)

    def for_view(self, view_id: int) -> "SampleSet":
        keep = self.view_ids == view_id
        return SampleSet(self.z[keep], self.target[keep], self.view_ids[keep], self.depth_scale)


@dataclass(frozen=True)
class StageConfig:
    steps: int
    t0: int
    lr: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (1 <= self.t0 <= self.steps):
            raise ValueError("restart period must satisfy 1 <= t0 <= steps")


@dataclass(frozen=True)
class TrainConfig:
    """Two-stage schedule; defaults follow the method's published settings."""

    global_stage: StageConfig = StageConfig(steps=5000, t0=1000, lr=1e-3)
    per_view: StageConfig = StageConfig(steps=500, t0=250, lr=1e-3)
    batch_size: int = 512
    weight_decay: float = 1e-2
    seed: int = 0


@dataclass(eq=False)
class CorrectionField:
    """Trained correction network: global weights plus per-view refinements."""

    global_weights: MlpParams
    per_view_weights: dict[int, MlpParams]
    encoder: PosEncConfig
    depth_scale: float
    num_views: int

    def weights_for_view(self, view_id: int) -> MlpParams:
        return self.per_view_weights.get(view_id, self.global_weights)

    @classmethod
    def identity(cls, num_views: int, depth_scale: float = 1.0,
                 encoder: PosEncConfig = PosEncConfig(), seed: int = 0) -> "CorrectionField":
        """Untrained field; its dense correction is the exact identity."""
        rng = np.random.default_rng(seed)
        dims = [encoder.encoded_dim(INPUT_DIM)] + [HIDDEN_WIDTH] * HIDDEN_LAYERS + [OUTPUT_DIM]
        return cls(
            global_weights=init_mlp(dims, rng),
            per_view_weights={},
            encoder=encoder,
            depth_scale=depth_scale,
            num_views=num_views,
        )


def build_training_set(triplets_by_view: dict, views: list[View]) -> SampleSet:
    """Assemble one correction sample per (view, anchor) pair.

    ``triplets_by_view`` maps view_id to that view's AnchorTriplet list
    (affine alignment already applied to the sampled depths).
    """
    n_views = len(views)
    by_id = {v.view_id: v for v in views}
    zs, targets, ids = [], [], []
    for view_id in sorted(triplets_by_view):
        triplets = triplets_by_view[view_id]
        if not triplets:
            continue
        view = by_id[view_id]
        iota = normalized_view_index(view_id, n_views)
        pix = np.array([[t.x, t.y] for t in triplets])
        uv = normalize_pixel(view, pix)
        z = np.column_stack(
            [
                [t.d_vggt for t in triplets],
                [t.d_mono for t in triplets],
                uv[:, 0],
                uv[:, 1],
                np.full(len(triplets), iota),
            ]
        )
        zs.append(z)
        targets.append(np.array([t.d_anchor for t in triplets]))
        ids.append(np.full(len(triplets), view_id, dtype=np.int64))
    if not zs:
        raise ValueError("no anchor samples: cannot train a correction field")
    target = np.concatenate(targets)
    return SampleSet(
        z=np.concatenate(zs),
        target=target,
        view_ids=np.concatenate(ids),
        depth_scale=float(np.median(target)),
    )


def _encode(samples_z: np.ndarray, encoder: PosEncConfig, depth_scale: float,
            dtype=np.float32) -> np.ndarray:
    scaled = samples_z.copy()
    scaled[:, 0] /= depth_scale
    scaled[:, 1] /= depth_scale
    return positional_encode(scaled, encoder).astype(dtype)


def correct_depth_pair(
    weights: MlpParams, encoder: PosEncConfig, depth_scale: float,
    d_v, d_m, u, v, iota,
):
    """Correct one (or a batch of) depth pair(s) at a pixel.

    Returns (d_v_hat, d_m_hat) in float64; entries that come out
    non-positive are returned as 0 (mask-invalid).
    """
    z = np.column_stack(
        [np.atleast_1d(d_v), np.atleast_1d(d_m), np.atleast_1d(u),
         np.atleast_1d(v), np.broadcast_to(iota, np.atleast_1d(d_v).shape)]
    ).astype(np.float64)
    feats = _encode(z, encoder, depth_scale, dtype=weights.dtype)
    out = np.atleast_2d(mlp_forward(weights, feats)).astype(np.float64)
    dv_hat, dm_hat = correction_outputs(out, z[:, 0], z[:, 1])
    dv_hat = np.where(dv_hat > 0, dv_hat, 0.0)
    dm_hat = np.where(dm_hat > 0, dm_hat, 0.0)
    if np.isscalar(d_v) or np.asarray(d_v).ndim == 0:
        return float(dv_hat[0]), float(dm_hat[0])
    return dv_hat, dm_hat


def sparse_l1_loss(weights: MlpParams, samples: SampleSet,
                   encoder: PosEncConfig = PosEncConfig()) -> float:
    """Mean over samples of |d_v_hat - target| + |d_m_hat - target|."""
    if len(samples) == 0:
        raise ValueError("empty batch")
    feats = _encode(samples.z, encoder, samples.depth_scale, dtype=weights.dtype)
    out = np.atleast_2d(mlp_forward(weights, feats)).astype(np.float64)
    dv_hat, dm_hat = correction_outputs(out, samples.z[:, 0], samples.z[:, 1])
    return float(np.mean(np.abs(dv_hat - samples.target) + np.abs(dm_hat - samples.target)))


def _run_stage(
    params: MlpParams, feats: np.ndarray, d_v, d_m, target,
    stage: StageConfig, batch_size: int, weight_decay: float,
    rng: np.random.Generator, log_label: str,
) -> list[tuple[int, float]]:
    n = len(feats)
    schedule = LrSchedule(eta_max=stage.lr, eta_min=0.0, t0=stage.t0)
    state = AdamWState.for_params(params, weight_decay=weight_decay)
    history = []
    batch = min(batch_size, n)
    buf_f = np.empty((batch, feats.shape[1]), dtype=feats.dtype)
    buf_v = np.empty(batch, dtype=d_v.dtype)
    buf_m = np.empty(batch, dtype=d_m.dtype)
    buf_t = np.empty(batch, dtype=target.dtype)
    for step in range(stage.steps):
        idx = rng.integers(0, n, size=batch)
        np.take(feats, idx, axis=0, out=buf_f)
        np.take(d_v, idx, out=buf_v)
        np.take(d_m, idx, out=buf_m)
        np.take(target, idx, out=buf_t)
        loss, grads = correction_loss_and_grad(params, buf_f, buf_v, buf_m, buf_t)
        if not np.isfinite(loss):
            raise NumericFailure(
                f"{log_label}: non-finite loss {loss} at step {step}, aborting"
            )
        lr = cosine_warm_restart_lr(step, schedule)
        adamw_step(state, params, grads, lr)
        if step % 100 == 0 or step == stage.steps - 1:
            history.append((step, loss))
            logger.info("%s step %d loss %.6g lr %.3g", log_label, step, loss, lr)
    return history


def train_global(samples: SampleSet, config: TrainConfig,
                 encoder: PosEncConfig = PosEncConfig(),
                 rng: np.random.Generator | None = None,
                 ) -> tuple[MlpParams, list[tuple[int, float]]]:
    """Train scene-level weights on all views' samples from identity init."""
    if len(samples) == 0:
        raise ValueError("no samples to train on")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dims = [encoder.encoded_dim(INPUT_DIM)] + [HIDDEN_WIDTH] * HIDDEN_LAYERS + [OUTPUT_DIM]
    params = init_mlp(dims, rng)
    feats = _encode(samples.z, encoder, samples.depth_scale)
    d_v = samples.z[:, 0].astype(np.float32)
    d_m = samples.z[:, 1].astype(np.float32)
    target = samples.target.astype(np.float32)
    history = _run_stage(
        params, feats, d_v, d_m, target,
        config.global_stage, config.batch_size, config.weight_decay, rng, "global",
    )
    return params, history


def finetune_view(
    global_weights: MlpParams, view_samples: SampleSet, config: TrainConfig,
    encoder: PosEncConfig = PosEncConfig(),
    rng: np.random.Generator | None = None,
    label: str = "view",
) -> MlpParams:
    """Warm-started per-view refinement; never worse on the view's anchors."""
    if len(view_samples) == 0:
        logger.warning("%s: no samples, keeping global weights", label)
        return global_weights.copy()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params = global_weights.copy()
    feats = _encode(view_samples.z, encoder, view_samples.depth_scale)
    d_v = view_samples.z[:, 0].astype(np.float32)
    d_m = view_samples.z[:, 1].astype(np.float32)
    target = view_samples.target.astype(np.float32)
    _run_stage(
        params, feats, d_v, d_m, target,
        config.per_view, config.batch_size, config.weight_decay, rng, label,
    )
    tuned = sparse_l1_loss(params, view_samples, encoder)
    base = sparse_l1_loss(global_weights, view_samples, encoder)
    if tuned > base:
        logger.warning(
            "%s: fine-tune regressed anchor L1 (%.6g > %.6g), keeping global weights",
            label, tuned, base,
        )
        return global_weights.copy()
    return params


def train_field(
    triplets_by_view: dict, views: list[View], config: TrainConfig,
    encoder: PosEncConfig = PosEncConfig(), threads: int = 1,
) -> tuple[CorrectionField, list[tuple[int, float]]]:
    """Full two-stage training; returns the field and the global loss curve."""
    samples = build_training_set(triplets_by_view, views)
    ss = np.random.SeedSequence(config.seed)
    seeds = ss.spawn(len(views) + 1)
    global_weights, history = train_global(
        samples, config, encoder, rng=np.random.default_rng(seeds[0])
    )

    def tune(view: View) -> tuple[int, MlpParams]:
        view_samples = samples.for_view(view.view_id)
        weights = finetune_view(
            global_weights, view_samples, config, encoder,
            rng=np.random.default_rng(seeds[view.view_id + 1]),
            label=f"view {view.view_id}",
        )
        return view.view_id, weights

    per_view: dict[int, MlpParams] = {}
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            for view_id, weights in pool.map(tune, views):
                per_view[view_id] = weights
    else:
        for view in views:
            view_id, weights = tune(view)
            per_view[view_id] = weights

    field = CorrectionField(
        global_weights=global_weights,
        per_view_weights=per_view,
        encoder=encoder,
        depth_scale=samples.depth_scale,
        num_views=len(views),
    )
    return field, history


def correct_depth_maps(
    field: CorrectionField, view: View, d_vggt: DepthMap, d_mono: DepthMap
) -> tuple[DepthMap, DepthMap]:
    """Apply the field at every pixel where both aligned maps are valid.

    Pixels invalid in either input (or corrected to a non-positive value)
    are invalid in both outputs.
    """
    weights = field.weights_for_view(view.view_id)
    valid = d_vggt.mask & d_mono.mask
    h, w = valid.shape
    out_v = np.zeros((h, w))
    out_m = np.zeros((h, w))
    ys, xs = np.nonzero(valid)
    if len(ys):
        uv = normalize_pixel(view, np.stack([xs, ys], axis=1).astype(np.float64))
        iota = normalized_view_index(view.view_id, field.num_views)
        dv_hat, dm_hat = correct_depth_pair(
            weights, field.encoder, field.depth_scale,
            d_vggt.values[ys, xs], d_mono.values[ys, xs],
            uv[:, 0], uv[:, 1], iota,
        )
        out_v[ys, xs] = dv_hat
        out_m[ys, xs] = dm_hat
    return DepthMap(out_v), DepthMap(out_m)


# ---------------------------------------------------------------------------
# Field checkpoint

_FIELD_MAGIC = b"DFCF"
_FIELD_VERSION = 1


def save_field(field: CorrectionField) -> bytes:
    """Serialize a field: JSON-free binary manifest plus weight blobs."""
    view_ids = sorted(field.per_view_weights)
    header = _FIELD_MAGIC + struct.pack(
        "<IdII?I",
        _FIELD_VERSION,
        field.depth_scale,
        field.num_views,
        field.encoder.num_frequencies,
        field.encoder.include_identity,
        len(view_ids),
    )
    header += struct.pack(f"<{len(view_ids)}I", *view_ids)
    blobs = [write_weights(field.global_weights)]
    blobs += [write_weights(field.per_view_weights[i]) for i in view_ids]
    out = [header]
    for blob in blobs:
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def load_field(data: bytes) -> CorrectionField:
    if data[:4] != _FIELD_MAGIC:
        raise ValueError("not a correction-field checkpoint")
    version, depth_scale, num_views, num_freq, identity, n_views_tuned = (
        struct.unpack_from("<IdII?I", data, 4)
    )
    if version != _FIELD_VERSION:
        raise ValueError(f"unsupported field checkpoint version {version}")
    offset = 4 + struct.calcsize("<IdII?I")
    view_ids = struct.unpack_from(f"<{n_views_tuned}I", data, offset)
    offset += 4 * n_views_tuned

    def next_blob(off):
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        return data[off: off + length], off + length

    blob, offset = next_blob(offset)
    global_weights = read_weights(blob)
    per_view = {}
    for view_id in view_ids:
        blob, offset = next_blob(offset)
        per_view[view_id] = read_weights(blob)
    return CorrectionField(
        global_weights=global_weights,
        per_view_weights=per_view,
        encoder=PosEncConfig(num_frequencies=num_freq, include_identity=bool(identity)),
        depth_scale=depth_scale,
        num_views=num_views,
    )
