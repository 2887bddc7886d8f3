import numpy as np
import pytest

from depthfield.affine import AnchorTriplet, apply_affine, extract_triplets, fit_affine
from depthfield.geometry import CameraIntrinsics, CameraPose, View
from depthfield.synth import CorruptionSpec, SceneSpec, corrupt_depths, generate_scene


@pytest.fixture
def identity_view() -> View:
    return View(
        view_id=0,
        intrinsics=CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480),
        pose=CameraPose(np.eye(3), np.zeros(3)),
        name="view_0000.png",
    )


@pytest.fixture(scope="session")
def small_scene():
    """A small sphere+plane arc scene shared by read-only tests."""
    return generate_scene(
        SceneSpec(n_views=4, width=64, height=64, anchors_per_view=300,
                  num_surface_samples=4000, seed=3)
    )


@pytest.fixture(scope="session")
def small_corrupted(small_scene):
    return corrupt_depths(small_scene, CorruptionSpec(seed=11))


def align_views(scene, corrupted):
    """Per-view alignment of both channels; returns maps and aligned triplets."""
    aligned_v, aligned_m, triplets = [], [], {}
    for view, dv, dm in zip(scene.views, corrupted.vggt, corrupted.mono):
        trips = extract_triplets(view, scene.model, dv, dm)
        fit_v = fit_affine([(t.d_vggt, t.d_anchor) for t in trips])
        fit_m = fit_affine([(t.d_mono, t.d_anchor) for t in trips])
        aligned_v.append(apply_affine(dv, fit_v))
        aligned_m.append(apply_affine(dm, fit_m))
        triplets[view.view_id] = [
            AnchorTriplet(t.x, t.y, fit_v.s * t.d_vggt + fit_v.b,
                          fit_m.s * t.d_mono + fit_m.b, t.d_anchor)
            for t in trips
            if fit_v.s * t.d_vggt + fit_v.b > 0 and fit_m.s * t.d_mono + fit_m.b > 0
        ]
    return aligned_v, aligned_m, triplets
