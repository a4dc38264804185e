import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxeldose.dosimetry import (
    LABELS,
    ErrorReport,
    apply_body_mask,
    average_dose_maps,
    dice,
    error_metrics,
    mean_organ_dose,
    organ_doses,
    r2_identity,
    water_equivalent_diameter,
)
from voxeldose.errors import OrganAbsentError, ShapeMismatchError
from voxeldose.phantom import OrganMaskSet, Phantom, density_to_material
from voxeldose.transport import DoseMap

from .oracles import dice_count, mean_organ_dose_loops


def rmap(rng, shape=(4, 5, 6), **kw):
    return DoseMap(rng.random(shape), (1.0, 1.0, 1.0), histories=100, **kw)


def test_average_is_voxelwise_mean_bit_exact():
    rng = np.random.default_rng(0)
    maps = [rmap(rng) for _ in range(4)]
    avg = average_dose_maps(maps)
    manual = (((maps[0].dose + maps[1].dose) + maps[2].dose) + maps[3].dose) / 4
    np.testing.assert_array_equal(avg.dose, manual)
    assert avg.histories == 400


def test_average_linear_and_permutation_invariant():
    rng = np.random.default_rng(1)
    maps = [rmap(rng) for _ in range(4)]
    a = average_dose_maps(maps).dose
    b = average_dose_maps(maps[::-1]).dose
    np.testing.assert_allclose(a, b, rtol=1e-15)
    scaled = [m.replace(dose=3.0 * m.dose) for m in maps]
    np.testing.assert_allclose(average_dose_maps(scaled).dose, 3.0 * a, rtol=1e-15)


def test_average_variance_of_mean():
    rng = np.random.default_rng(2)
    maps = [rmap(rng, variance=np.full((4, 5, 6), 0.04)) for _ in range(4)]
    np.testing.assert_allclose(average_dose_maps(maps).variance, 0.01)


def test_average_rejects_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeMismatchError):
        average_dose_maps([rmap(rng), rmap(rng, (4, 5, 7))])
    with pytest.raises(ValueError):
        average_dose_maps([rmap(rng), rmap(rng).replace(units="mGy")])
    with pytest.raises(ValueError):
        average_dose_maps([])


def test_air_mask_is_indicator_product():
    rng = np.random.default_rng(4)
    for _ in range(20):
        rho = rng.choice([0.0012, 0.05, 0.1, 0.3, 1.0, 1.4], size=(4, 5, 6))
        p = Phantom(rho, density_to_material(rho), (1, 1, 1))
        d = rmap(rng)
        np.testing.assert_array_equal(apply_body_mask(d, p).dose, d.dose * (rho > 0.1))


def test_mean_organ_dose_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(100):
        d = rng.random((6, 6, 6)) * 10
        rho = rng.uniform(0.001, 2.0, (6, 6, 6))
        m = rng.random((6, 6, 6)) < 0.4
        m[0, 0, 0] = True
        assert mean_organ_dose(d, m, rho) == pytest.approx(mean_organ_dose_loops(d, m, rho), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(0, 1e3)),
       arrays(np.float64, (3, 4, 5), elements=st.floats(1e-3, 3.0)),
       arrays(np.bool_, (3, 4, 5)))
def test_mean_organ_dose_within_range(d, rho, m):
    m[1, 1, 1] = True
    v = mean_organ_dose(d, m, rho)
    assert d[m].min() <= v <= d[m].max()


def test_mean_organ_dose_errors():
    z = np.zeros((2, 2, 2))
    with pytest.raises(OrganAbsentError):
        mean_organ_dose(np.ones((2, 2, 2)), z.astype(bool), np.ones((2, 2, 2)))
    with pytest.raises(OrganAbsentError):
        mean_organ_dose(np.ones((2, 2, 2)), np.ones((2, 2, 2), bool), z)
    with pytest.raises(ShapeMismatchError):
        mean_organ_dose(np.ones((2, 2, 2)), np.ones((2, 2, 3), bool), np.ones((2, 2, 2)))


def test_scaling_identities():
    rng = np.random.default_rng(6)
    shape = (5, 5, 5)
    rho = rng.uniform(0.5, 1.5, shape)
    masks = OrganMaskSet({k: rng.random(shape) < 0.5 for k in LABELS[:-1]}, np.ones(shape, bool))
    d = DoseMap(rng.random(shape), (1, 1, 1))
    pred = {k: v * 1.1 for k, v in organ_doses(d, masks, rho).items()}
    ref = organ_doses(d, masks, rho)
    ref_s = organ_doses(d.replace(dose=2.5 * d.dose), masks, rho)
    for k in LABELS:
        assert ref_s[k] == pytest.approx(2.5 * ref[k], rel=1e-14)
    r1 = error_metrics(ref, pred)
    r2 = error_metrics({k: 2.5 * v for k, v in ref.items()}, {k: 2.5 * v for k, v in pred.items()})
    np.testing.assert_allclose(r2.pe, r1.pe, rtol=1e-12)
    np.testing.assert_allclose(r2.rmse_pooled, 2.5 * r1.rmse_pooled, rtol=1e-12)


def test_dice_cases():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    b = np.zeros_like(a)
    b[2:] = True
    half = np.zeros_like(a)
    half[1:3] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    assert dice(a, half) == 0.5
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dice_symmetric_and_matches_counting():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a = rng.random((3, 3, 3)) < rng.random()
        b = rng.random((3, 3, 3)) < rng.random()
        assert dice(a, b) == dice(b, a)
    for _ in range(50):
        a = rng.random((3, 4, 5)) < 0.3
        b = rng.random((3, 4, 5)) < 0.6
        assert dice(a, b) == pytest.approx(dice_count(a, b), abs=1e-15)


def test_error_metrics_arithmetic():
    r = error_metrics(np.array([10.0]), np.array([9.0]), labels=("liver",))
    assert r.pe[0, 0] == pytest.approx(10.0)
    assert r.rmse_pooled[0] == pytest.approx(1.0)
    same = error_metrics(np.ones((3, 7)), np.ones((3, 7)))
    assert np.all(same.pe == 0) and np.all(same.rmse_pooled == 0)


def test_error_metrics_brute_force():
    rng = np.random.default_rng(8)
    ref = rng.uniform(1, 20, (12, 7))
    pred = rng.uniform(1, 20, (12, 7))
    rep = error_metrics(ref, pred)
    for j in range(7):
        pes = [abs(ref[i, j] - pred[i, j]) / ref[i, j] * 100 for i in range(12)]
        assert rep.pe_mean[j] == pytest.approx(sum(pes) / 12, rel=1e-12)
        rm = (sum((ref[i, j] - pred[i, j]) ** 2 for i in range(12)) / 12) ** 0.5
        assert rep.rmse_pooled[j] == pytest.approx(rm, rel=1e-12)


def test_zero_reference_flagged():
    with pytest.warns(RuntimeWarning):
        rep = error_metrics(np.array([[0.0, 2.0]]), np.array([[1.0, 1.0]]), labels=("a", "b"))
    assert np.isnan(rep.pe[0, 0]) and rep.undefined_pe == {"a": 1}
    assert rep.pe_mean[1] == 50.0


def test_report_concat_and_dict():
    rng = np.random.default_rng(9)
    parts = [error_metrics(rng.uniform(1, 2, (3, 7)), rng.uniform(1, 2, (3, 7)), fold=f) for f in range(2)]
    rep = ErrorReport.concat(parts)
    assert rep.pe.shape == (6, 7)
    d = rep.to_dict()
    assert set(d["per_label"]) == set(LABELS) and set(d["folds"]) == {0, 1}


def test_r2_identity():
    ref = np.array([1.0, 2.0, 3.0, 4.0])
    assert r2_identity(ref, ref) == 1.0
    assert r2_identity(ref, np.full(4, ref.mean())) <= 0.0
    assert r2_identity(ref, ref + 1.0) < 1.0


def test_water_equivalent_diameter_of_water_cylinder():
    n, sp, r_mm = 128, 2.0, 100.0
    yy, xx = np.mgrid[:n, :n]
    c = (n - 1) / 2
    disk = np.hypot((xx - c) * sp, (yy - c) * sp) <= r_mm
    rho = np.where(disk, 1.0, 0.0012)[None].repeat(3, axis=0)
    p = Phantom(rho, density_to_material(rho), (sp, sp, sp))
    assert water_equivalent_diameter(p) == pytest.approx(20.0, rel=0.01)
    dense = Phantom(rho * np.where(disk, 1.21, 1.0), density_to_material(rho * np.where(disk, 1.21, 1.0)),
                    (sp, sp, sp))
    assert water_equivalent_diameter(dense) > 20.0
    with pytest.raises(ValueError):
        water_equivalent_diameter(p, z_range=(100.0, 200.0))
