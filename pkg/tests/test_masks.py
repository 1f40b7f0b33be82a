import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpcc.errors import ConfigError, InvariantError, ShapeError
from fpcc.masks import (
    BoundingBox,
    SceneSpec,
    VoxelMask,
    brute_force_mask,
    expanded_voxels,
    focal_loss,
    merge_boxes,
    preliminary_voxels,
    read_boxes,
    sparse_labels,
    write_boxes,
)
from fpcc.sparse import SparseVoxelTensor


def scan_oracle(boxes, spec, e):
    """Per-voxel loop over the whole grid with the ratio test written out."""
    G, L = spec.grid, spec.extent
    hits = set()
    for u in range(G[0]):
        for v in range(G[1]):
            for w in range(G[2]):
                for b in boxes:
                    ok = True
                    for idx, c, s, ext, g in zip((u, v, w), b.center, b.size, L, G):
                        lo = c / ext - s / (2 * ext) - e / g
                        hi = c / ext + s / (2 * ext) + e / g
                        if not lo <= idx / g <= hi:
                            ok = False
                            break
                    if ok:
                        hits.add((u, v, w))
                        break
    return hits


def as_set(mask):
    return {tuple(c) for c in mask.coords.tolist()}


def test_centered_box_27():
    spec = SceneSpec((100, 100, 100), (10, 10, 10), 0)
    m = preliminary_voxels(BoundingBox(50, 50, 50, 20, 20, 20), spec)
    assert len(m) == 27
    assert as_set(m) == {(u, v, w) for u in (4, 5, 6) for v in (4, 5, 6) for w in (4, 5, 6)}


def test_full_cover_and_saturation():
    spec = SceneSpec((100, 100, 100), (10, 10, 10), 16)
    assert len(preliminary_voxels(BoundingBox(50, 50, 50, 200, 200, 200), spec)) == 1000
    assert len(expanded_voxels(BoundingBox(50, 50, 50, 20, 20, 20), spec)) == 1000


def test_zero_expansion_is_preliminary():
    spec = SceneSpec((70.4, 80, 4), (88, 100, 8), 16)
    b = BoundingBox(30.1, 40.2, 1.1, 3.9, 1.6, 1.5)
    assert expanded_voxels(b, spec, 0) == preliminary_voxels(b, spec)
    with pytest.raises(ConfigError):
        expanded_voxels(b, spec, -1)


def test_kitti_scale_random_box(rng):
    spec = SceneSpec((70.4, 80, 4), (176, 200, 10), 16)
    for _ in range(3):
        b = BoundingBox(*rng.uniform([0, 0, 0], [70.4, 80, 4]), *rng.uniform(0.5, 5, 3))
        assert expanded_voxels(b, spec) == brute_force_mask([b], spec)


def test_boundary_box_matches_scan():
    spec = SceneSpec((10, 10, 10), (7, 9, 5), 1)
    boxes = [BoundingBox(0.0, 10.0, 0.0, 3.0, 3.0, 3.0), BoundingBox(10, 0, 5, 1e-3, 1e-3, 1e-3)]
    assert as_set(merge_boxes(boxes, spec)) == scan_oracle(boxes, spec, 1)


@pytest.mark.parametrize("case", range(20))
def test_merge_matches_scan_oracle(case):
    r = np.random.default_rng(case)
    G = tuple(int(g) for g in r.integers(3, 12, 3))
    ext = tuple(float(x) for x in r.uniform(1, 50, 3))
    e = int(r.choice([0, 1, 2, 8, 16]))
    spec = SceneSpec(ext, G, e)
    boxes = [BoundingBox(*(r.uniform(0, 1, 3) * ext), *(r.uniform(0.01, 0.5, 3) * ext))
             for _ in range(int(r.integers(0, 4)))]
    assert as_set(merge_boxes(boxes, spec)) == scan_oracle(boxes, spec, e)


def test_merge_union_laws(rng):
    spec = SceneSpec((40, 40, 4), (20, 20, 4), 2)
    a = BoundingBox(5, 5, 2, 2, 2, 1)
    b = BoundingBox(30, 30, 2, 3, 3, 1)
    assert len(merge_boxes([], spec)) == 0
    assert merge_boxes([a, a], spec) == merge_boxes([a], spec)
    assert merge_boxes([a, b], spec) == merge_boxes([b, a], spec)
    ma, mb = merge_boxes([a], spec), merge_boxes([b], spec)
    assert not set(ma.keys) & set(mb.keys)
    assert len(merge_boxes([a, b], spec)) == len(ma) + len(mb)
    assert merge_boxes([a, b], spec) == ma.union(mb)


@given(st.integers(0, 2**31), st.integers(0, 20), st.integers(0, 20))
def test_expansion_monotone(seed, e1, e2):
    r = np.random.default_rng(seed)
    spec = SceneSpec(tuple(r.uniform(5, 80, 3)), tuple(int(g) for g in r.integers(4, 40, 3)), 0)
    b = BoundingBox(*(r.uniform(0, 1, 3) * spec.extent), *(r.uniform(0.05, 0.5, 3) * spec.extent))
    lo, hi = sorted((e1, e2))
    assert expanded_voxels(b, spec, lo).issubset(expanded_voxels(b, spec, hi))


def test_sparse_labels(rng):
    G = (6, 5, 4)
    coords = np.argwhere(rng.random(G) < 0.4)
    t = SparseVoxelTensor(coords, np.zeros((coords.shape[0], 1)), G)
    full = VoxelMask(np.arange(np.prod(G)), G)
    assert sparse_labels(full, t).tolist() == [1] * t.n
    assert sparse_labels(VoxelMask.empty(G), t).tolist() == [0] * t.n
    m = VoxelMask.from_coords(np.argwhere(rng.random(G) < 0.5), G)
    member = as_set(m)
    assert sparse_labels(m, t).tolist() == [int(tuple(c) in member) for c in coords.tolist()]
    with pytest.raises(ShapeError):
        sparse_labels(VoxelMask.empty((2, 2, 2)), t)


def test_mask_grid_invariant():
    with pytest.raises(InvariantError):
        VoxelMask(np.array([8]), (2, 2, 2))
    with pytest.raises(InvariantError):
        BoundingBox(0, 0, 0, 0, 1, 1)


def test_focal_closed_forms():
    assert focal_loss([0.5], [1]) == pytest.approx(-0.25 * math.log(0.5), abs=1e-15)
    assert focal_loss([1 - 1e-7], [1]) < 1e-20
    with pytest.raises(ShapeError):
        focal_loss([0.5, 0.5], [1])


def test_focal_gamma0_is_bce(rng):
    p = rng.uniform(0.01, 0.99, 50)
    y = rng.integers(0, 2, 50)
    bce = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y))
    assert focal_loss(p, y, 0.0) == pytest.approx(bce, rel=1e-12)


@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.sampled_from([0, 1]))
def test_focal_monotone(p, dp, y):
    # raising the probability of the true class lowers the loss
    q = p + dp
    if y == 1:
        assert focal_loss([q], [1]) <= focal_loss([p], [1])
    else:
        assert focal_loss([1 - q], [0]) <= focal_loss([1 - p], [0])
    assert focal_loss([p], [y]) >= 0


def test_boxes_file_roundtrip(tmp_path):
    boxes = [BoundingBox(1.5, 2.25, 0.1, 3.9, 1.6, 1.5), BoundingBox(0.1, 0.2, 0.3, 1, 1, 1)]
    p = tmp_path / "boxes.txt"
    write_boxes(boxes, p)
    assert read_boxes(p) == boxes
