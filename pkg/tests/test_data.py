import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from fabcorrect.data import (
    FAMILIES,
    AugmentConfig,
    SamplePair,
    ShapeSpec,
    augment,
    augment_all,
    build_benchmark,
    dataset_hash,
    generate_shape,
    hflip_pair,
    load_dataset,
    patchify,
    sample_spec,
    save_dataset,
    split_and_shuffle,
    stitch,
)
from fabcorrect.errors import ContractError, InvalidShapeError
from fabcorrect.fab import FabParams, SemRenderParams
from fabcorrect.losses import iou


# -- shapes --------------------------------------------------------------------------
def test_grating_has_four_stripes_of_width_eight():
    m = generate_shape(ShapeSpec("grating", {"period": 16, "duty": 0.5}))
    row = m[32]
    _, n = ndimage.label(row)
    assert n == 4
    assert row.sum() == 32
    assert not m[0].any() and not m[-1].any()


def test_circle_area_close_to_analytic():
    m = generate_shape(ShapeSpec("circle", {"radius": 10}))
    assert abs(m.sum() - np.pi * 100) <= 0.05 * np.pi * 100


@pytest.mark.parametrize("family", FAMILIES)
def test_sampled_shapes_deterministic_and_inside_margin(family):
    for k in range(10):
        spec = sample_spec(family, 64, 64, np.random.default_rng(k))
        a, b = generate_shape(spec), generate_shape(spec)
        np.testing.assert_array_equal(a, b)
        assert a.any() and not a.all()
        assert not a[:2].any() and not a[-2:].any()
        assert not a[:, :2].any() and not a[:, -2:].any()


def test_shape_contract_errors():
    with pytest.raises(ContractError):
        ShapeSpec("hexagon")
    with pytest.raises(ContractError):
        generate_shape(ShapeSpec("circle", {"radius": 40}))


# -- benchmark -----------------------------------------------------------------------
def test_benchmark_counts_and_fab_gap():
    pairs = build_benchmark(10, 64, FabParams(), seed=0)
    assert len(pairs) == 70
    assert {p.family for p in pairs} == set(FAMILIES)
    assert len({p.id for p in pairs}) == 70
    for p in pairs:
        assert iou(p.fabricated, p.design) < 1.0


def test_benchmark_hash_reproducible_and_seed_sensitive():
    a = dataset_hash(build_benchmark(2, 32, FabParams(), seed=3, sem_params=SemRenderParams()))
    b = dataset_hash(build_benchmark(2, 32, FabParams(), seed=3, sem_params=SemRenderParams()))
    c = dataset_hash(build_benchmark(2, 32, FabParams(), seed=4, sem_params=SemRenderParams()))
    assert a == b != c


def test_sample_pair_validation():
    m = np.zeros((4, 4), bool)
    with pytest.raises(InvalidShapeError):
        SamplePair("x", m, np.zeros((4, 5), bool))


# -- augmentation ----------------------------------------------------------------------
@pytest.fixture(scope="module")
def pairs():
    return build_benchmark(2, 64, FabParams(), seed=0, sem_params=SemRenderParams())


def test_augment_passes_three_gives_four(pairs):
    out = augment(pairs[0], AugmentConfig(passes=3))
    assert len(out) == 4
    assert out[0] is pairs[0]
    assert [p.id for p in out[1:]] == [f"{pairs[0].id}-aug{k}" for k in range(3)]
    assert all(p.base_id == pairs[0].base_id for p in out)


def test_probability_zero_copies_are_identical(pairs):
    for p in augment(pairs[3], AugmentConfig(per_transform_probability=0.0))[1:]:
        np.testing.assert_array_equal(p.design, pairs[3].design)
        np.testing.assert_array_equal(p.fabricated, pairs[3].fabricated)
        np.testing.assert_array_equal(p.sem, pairs[3].sem)


def test_hflip_is_involution(pairs):
    twice = hflip_pair(hflip_pair(pairs[0]))
    np.testing.assert_array_equal(twice.design, pairs[0].design)
    np.testing.assert_array_equal(twice.sem, pairs[0].sem)


def test_augment_deterministic(pairs):
    cfg = AugmentConfig(seed=7)
    assert dataset_hash(augment_all(pairs, cfg)) == dataset_hash(augment_all(pairs, cfg))


def test_geometric_transforms_move_masks_together(pairs):
    # where nothing is clipped at the canvas edge, the design/fab overlap is roughly kept
    cfg = AugmentConfig(passes=5, per_transform_probability=1.0, noise_sigma=0, seed=1)
    checked = 0
    for pair in pairs:
        before = iou(pair.fabricated, pair.design)
        for aug in augment(pair, cfg)[1:]:
            assert aug.design.dtype == bool and aug.sem.dtype == np.uint8
            border = np.ones_like(aug.design)
            border[1:-1, 1:-1] = False
            if (aug.design & border).any() or (aug.fabricated & border).any():
                continue
            checked += 1
            assert abs(iou(aug.fabricated, aug.design) - before) < 0.05
    assert checked >= 20


def test_photometric_only_touches_sem(pairs):
    cfg = AugmentConfig(passes=8, rotation_limit_deg=0, shift_limit_frac=0, scale_limits=(1.0, 1.0), seed=2)
    p = pairs[0]
    for aug in augment(p, cfg)[1:]:
        flipped = not np.array_equal(aug.design, p.design)
        ref = p.design[:, ::-1] if flipped else p.design
        np.testing.assert_array_equal(aug.design, ref)


# -- tiles -----------------------------------------------------------------------------
def test_patchify_counts_and_inverse():
    x = np.arange(512 * 512, dtype=np.int64).reshape(512, 512)
    tiles = patchify(x, 256)
    assert len(tiles) == 4
    np.testing.assert_array_equal(stitch(tiles), x)


def test_patchify_padded_round_trip():
    x = np.random.default_rng(0).integers(0, 256, (300, 300)).astype(np.uint8)
    tiles = patchify(x, 256)
    assert len(tiles) == 4 and all(t.data.shape == (256, 256) for t in tiles)
    assert tiles[-1].pad_bottom == 212 and tiles[-1].pad_right == 212
    np.testing.assert_array_equal(stitch(tiles), x)


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))), patch=st.integers(1, 8))
def test_patchify_stitch_inverse_property(x, patch):
    np.testing.assert_array_equal(stitch(patchify(x, patch)), x)


def test_patchify_errors():
    with pytest.raises(InvalidShapeError):
        patchify(np.zeros((2, 2, 2)), 2)
    with pytest.raises(ContractError):
        patchify(np.zeros((2, 2)), 0)


# -- split ------------------------------------------------------------------------------
def _dummy(n):
    m = np.zeros((2, 2), bool)
    return [SamplePair(f"s{i:03d}", m, m) for i in range(n)]


def test_split_80_20():
    sp = split_and_shuffle(_dummy(100), 0.2, seed=0)
    assert len(sp.train) == 80 and len(sp.val) == 20


def test_split_no_base_leakage(pairs):
    data = augment_all(pairs, AugmentConfig(passes=2))
    sp = split_and_shuffle(data, 0.3, seed=1)
    assert not {p.base_id for p in sp.train} & {p.base_id for p in sp.val}
    assert len(sp.train) + len(sp.val) == len(data)


def test_epoch_orders_reproducible_and_varying():
    a = split_and_shuffle(_dummy(50), 0.2, seed=5)
    b = split_and_shuffle(_dummy(50), 0.2, seed=5)
    np.testing.assert_array_equal(a.epoch_order(3), b.epoch_order(3))
    assert not np.array_equal(a.epoch_order(0), a.epoch_order(1))


def test_split_empty_side_rejected():
    with pytest.raises(ContractError):
        split_and_shuffle(_dummy(3), 0.1, seed=0)


# -- store --------------------------------------------------------------------------------
def test_store_round_trip(tmp_path, pairs):
    h = save_dataset(pairs, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert dataset_hash(back) == h == dataset_hash(pairs)
    rows = (tmp_path / "ds" / "manifest.tsv").read_text().strip().splitlines()
    assert len(rows) == len(pairs) + 1
