import numpy as np
import pytest

from voxeldose.dosimetry import LABELS
from voxeldose.fileio import (
    load_dose,
    load_masks,
    load_model_input,
    load_phantom,
    load_scout,
    read_dose_csv,
    read_raw,
    save_dose,
    save_masks,
    save_model_input,
    save_phantom,
    save_scout,
    write_dose_csv,
    write_raw,
)
from voxeldose.phantom import CohortSpec, generate_synthetic_phantom
from voxeldose.scout import compose_input, render_scout, scan_range_channel
from voxeldose.transport import DoseMap


@pytest.fixture(scope="module")
def member():
    return generate_synthetic_phantom(CohortSpec(count=1, seed=1), 0)


def test_header_layout(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_raw(tmp_path / "x.vox", "test", {"a": a}, spacing=(1.0, 2.0, 3.0))
    blob = (tmp_path / "x.vox").read_bytes()
    head = blob[: blob.index(b"end_header\n")].decode().splitlines()
    assert head[0] == "VOXELDOSE 1"
    assert "dims = 4 3 2" in head and "byte_order = little" in head
    assert blob.endswith(a.astype("<f4").tobytes())
    h, arrays = read_raw(tmp_path / "x.vox")
    np.testing.assert_array_equal(arrays["a"], a)


def test_phantom_round_trip(tmp_path, member):
    p, masks = member
    save_phantom(tmp_path / "p.vox", p)
    q = load_phantom(tmp_path / "p.vox")
    np.testing.assert_array_equal(q.material, p.material)
    np.testing.assert_allclose(q.density, p.density, rtol=1e-7)
    assert q.spacing == p.spacing
    save_masks(tmp_path / "m", masks, p.spacing)
    assert (tmp_path / "m" / "liver.mask").exists()
    m2 = load_masks(tmp_path / "m")
    for k in masks.labels + ("body",):
        np.testing.assert_array_equal(m2[k], masks[k])


def test_dose_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = DoseMap(rng.random((3, 4, 5)), (2.0, 2.0, 2.0), "mGy", 1234, rng.random((3, 4, 5)),
                {"emitted_q": 5}, {"real": 3})
    save_dose(tmp_path / "d.vox", d)
    e = load_dose(tmp_path / "d.vox")
    np.testing.assert_array_equal(e.dose, d.dose)
    np.testing.assert_array_equal(e.variance, d.variance)
    assert (e.units, e.histories, e.energy, e.counters) == ("mGy", 1234, {"emitted_q": 5}, {"real": 3})


def test_scout_and_input_round_trip(tmp_path, member):
    p, _ = member
    fr, lat = render_scout(p, "frontal"), render_scout(p, "lateral")
    save_scout(tmp_path / "f.scout", fr)
    g = load_scout(tmp_path / "f.scout")
    assert g.view == "frontal" and g.layout == fr.layout
    np.testing.assert_allclose(g.data, fr.data, rtol=1e-6)
    x = compose_input(lat, fr, scan_range_channel(0.0, 300.0, fr.layout))
    save_model_input(tmp_path / "x.vox", x)
    y = load_model_input(tmp_path / "x.vox")
    np.testing.assert_array_equal(y.data, x.data)
    assert y.bounds == x.bounds


def test_dose_csv(tmp_path):
    rows = [("P1", {k: i + 0.5 for i, k in enumerate(LABELS)}), ("P2", {k: 1 / 3 for k in LABELS})]
    write_dose_csv(tmp_path / "d.csv", rows)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == \
        "patient_id,lungs,kidneys,liver,bladder,spleen,pancreas,body"
    assert read_dose_csv(tmp_path / "d.csv") == rows


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"HELLO\nend_header\n")
    with pytest.raises(ValueError):
        read_raw(tmp_path / "bad")
