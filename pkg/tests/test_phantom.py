import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxeldose.dosimetry import water_equivalent_diameter
from voxeldose.errors import ConfigurationError
from voxeldose.phantom import (
    AIR_DENSITY,
    ORGANS,
    CohortSpec,
    OrganMaskSet,
    Phantom,
    density_to_material,
    generate_synthetic_phantom,
    hu_to_density,
    resample_phantom,
)
from voxeldose.scout import COLS, ROWS


def test_hu_knots():
    assert hu_to_density(-1000) == pytest.approx(AIR_DENSITY)
    assert hu_to_density(0) == 1.0
    assert hu_to_density(1000) == pytest.approx(1.6)
    assert hu_to_density(500) == pytest.approx(1.3)


def test_hu_out_of_range_clamped():
    with pytest.warns(RuntimeWarning):
        v = hu_to_density(np.array([-3000.0, 5000.0]))
    np.testing.assert_allclose(v, [AIR_DENSITY, 2.8])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1024, 3070), st.floats(0.1, 50))
def test_hu_monotone(h, dh):
    assert hu_to_density(min(h + dh, 3071)) >= hu_to_density(h)


def test_material_thresholds():
    np.testing.assert_array_equal(density_to_material(np.array([0.0012, 0.0999, 0.1, 1.0, 1.1, 1.1001, 1.9])),
                                  [0, 0, 1, 1, 1, 2, 2])


def test_phantom_rejects_bad_input():
    with pytest.raises(ValueError):
        Phantom(np.ones((2, 2, 2)), np.ones((2, 2, 3)), (1, 1, 1))
    with pytest.raises(ValueError):
        Phantom(np.ones((2, 2, 2)), np.ones((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        OrganMaskSet({"liver": np.ones((2, 2, 2))}, np.ones((2, 2, 3)))


def test_phantom_geometry_properties():
    p = Phantom(np.ones((4, 3, 2)), np.ones((4, 3, 2)), (2.0, 3.0, 5.0))
    assert p.dims == (2, 3, 4)
    assert p.extent_mm == (4.0, 9.0, 20.0)
    assert p.voxel_volume_cc == pytest.approx(0.03)
    assert p.total_mass() == pytest.approx(24 * 0.03)


def test_resample_constant_phantom():
    p = Phantom(np.full((10, 8, 6), 1.05), np.ones((10, 8, 6)), (2.0, 2.0, 2.0))
    q = resample_phantom(p, 4.0)
    assert q.dims == (3, 4, 5)
    np.testing.assert_allclose(q.density, 1.05)
    assert q.total_mass() == pytest.approx(p.total_mass(), rel=0.25)
    with pytest.raises(ValueError):
        resample_phantom(p, 50.0)


def test_cohort_validation():
    with pytest.raises(ConfigurationError):
        CohortSpec(count=0).validate()
    with pytest.raises(ConfigurationError):
        CohortSpec(size_range=(30, 20)).validate()
    with pytest.raises(ConfigurationError):
        generate_synthetic_phantom(CohortSpec(count=2), 2)


@pytest.fixture(scope="module")
def member():
    return generate_synthetic_phantom(CohortSpec(count=8, seed=5), 3)


def test_generator_invariants(member):
    p, masks = member
    p.check()
    assert set(masks.labels) == set(ORGANS)
    stack = np.stack([masks[k] for k in ORGANS])
    assert stack.sum(axis=0).max() == 1  # organs are disjoint
    for k in ORGANS:
        assert masks[k].any(), k
        assert np.all(masks.body[masks[k]]), k
    np.testing.assert_array_equal(masks.body, p.density > 0.1)
    assert (p.material == 2).any()  # some bone
    ex, ey, ez = p.extent_mm
    assert max(ex, ey) <= COLS and ez <= ROWS


def test_generator_is_deterministic(member):
    p, masks = member
    q, m2 = generate_synthetic_phantom(CohortSpec(count=8, seed=5), 3)
    np.testing.assert_array_equal(p.density, q.density)
    for k in ORGANS:
        np.testing.assert_array_equal(masks[k], m2[k])


def test_generator_members_differ():
    a, _ = generate_synthetic_phantom(CohortSpec(count=8, seed=5), 0)
    b, _ = generate_synthetic_phantom(CohortSpec(count=8, seed=5), 1)
    assert a.shape != b.shape or not np.array_equal(a.density, b.density)


@pytest.mark.parametrize("lo,hi", [(21.0, 23.0), (39.0, 41.0)])
def test_generator_hits_size_targets(lo, hi):
    p, _ = generate_synthetic_phantom(CohortSpec(count=1, size_range=(lo, hi), seed=2), 0)
    assert lo - 1.0 <= water_equivalent_diameter(p) <= hi + 1.0
    ex, ey, ez = p.extent_mm
    assert max(ex, ey) <= COLS
