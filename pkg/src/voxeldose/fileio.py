"""On-disk formats: text header followed by raw little-endian arrays.

Header layout::

    VOXELDOSE 1
    kind = phantom
    dims = nx ny nz
    spacing = sx sy sz
    byte_order = little
    arrays = density:float32 material:uint8
    end_header

Arrays follow in the listed order, each written z-major (C order of a
``[z, y, x]`` array) for volumes and row-major for images.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dosimetry import LABELS
from .phantom import ORGANS, OrganMaskSet, Phantom
from .scout import ModelInput, ScoutImage, ScoutLayout
from .transport import DoseMap

MAGIC = "VOXELDOSE 1"


def write_raw(path, kind: str, arrays: dict[str, np.ndarray], **meta) -> None:
    first = next(iter(arrays.values()))
    lines = [MAGIC, f"kind = {kind}"]
    if first.ndim == 3:
        nz, ny, nx = first.shape
        lines.append(f"dims = {nx} {ny} {nz}")
    else:
        lines.append("dims = " + " ".join(str(n) for n in first.shape[::-1]))
    for k, v in meta.items():
        if isinstance(v, (list, tuple)):
            v = " ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{k} = {v}")
    lines.append("byte_order = little")
    lines.append("arrays = " + " ".join(f"{k}:{np.dtype(a.dtype).name}" for k, a in arrays.items()))
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_raw(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header_lines = blob[:end].decode().splitlines()
    if header_lines[0] != MAGIC:
        raise ValueError(f"{path}: not a voxeldose file")
    header = {}
    for line in header_lines[1:-1]:
        k, _, v = line.partition("=")
        header[k.strip()] = v.strip()
    if header.get("byte_order", "little") != "little":
        raise ValueError("only little-endian files are supported")
    shape = tuple(int(n) for n in header["dims"].split())[::-1]
    arrays = {}
    offset = end
    for spec in header["arrays"].split():
        name, dtype = spec.split(":")
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(shape).astype(dt.newbyteorder("="))
        offset += count * dt.itemsize
    return header, arrays


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split())


def save_phantom(path, p: Phantom, dtype=np.float32) -> None:
    write_raw(path, "phantom", {"density": p.density.astype(dtype), "material": p.material},
              spacing=p.spacing)


def load_phantom(path) -> Phantom:
    h, a = read_raw(path)
    return Phantom(a["density"].astype(np.float64), a["material"], _floats(h["spacing"]))


def save_masks(path, masks: OrganMaskSet, spacing) -> None:
    """One uint8 file per label (``<label>.mask``) inside directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for k, m in list(masks.masks.items()) + [("body", masks.body)]:
        write_raw(out / f"{k}.mask", "mask", {k: m.astype(np.uint8)}, spacing=spacing, label=k)


def load_masks(path) -> OrganMaskSet:
    root = Path(path)
    masks = {}
    for k in ORGANS:
        f = root / f"{k}.mask"
        if f.exists():
            masks[k] = read_raw(f)[1][k].astype(bool)
    body_file = root / "body.mask"
    if not body_file.exists():
        raise FileNotFoundError(f"{body_file} missing")
    return OrganMaskSet(masks, read_raw(body_file)[1]["body"].astype(bool))


def save_dose(path, d: DoseMap) -> None:
    arrays = {"dose": d.dose.astype(np.float64)}
    if d.variance is not None:
        arrays["variance"] = d.variance.astype(np.float64)
    write_raw(path, "dose", arrays, spacing=d.spacing, units=d.units.replace(" ", "_"),
              histories=d.histories, energy=json.dumps(d.energy), counters=json.dumps(d.counters))


def load_dose(path) -> DoseMap:
    h, a = read_raw(path)
    return DoseMap(a["dose"], _floats(h["spacing"]), h["units"], int(h["histories"]),
                   a.get("variance"), json.loads(h.get("energy", "{}")), json.loads(h.get("counters", "{}")))


def save_scout(path, s: ScoutImage) -> None:
    lay = s.layout
    write_raw(path, "scout", {"image": s.data.astype(np.float32)}, view=s.view,
              spacing=(lay.pixel, lay.pixel), z_offset=repr(lay.z_offset),
              lateral_offset=repr(lay.lateral_offset))


def load_scout(path) -> ScoutImage:
    h, a = read_raw(path)
    img = a["image"].astype(np.float64)
    lay = ScoutLayout(float(h["z_offset"]), float(h["lateral_offset"]), img.shape[0], img.shape[1],
                      _floats(h["spacing"])[0])
    return ScoutImage(img, h["view"], lay)


def save_model_input(path, x: ModelInput) -> None:
    write_raw(path, "model_input", {c: x.data[i] for i, c in enumerate(x.channels)},
              bounds=json.dumps({k: list(v) for k, v in x.bounds.items()}))


def load_model_input(path) -> ModelInput:
    h, a = read_raw(path)
    data = np.stack([a[c] for c in ("lateral", "frontal", "range")])
    bounds = {k: tuple(v) for k, v in json.loads(h["bounds"]).items()}
    return ModelInput(data.astype(np.float32), bounds)


def write_dose_csv(path, rows: list[tuple[str, dict]]) -> None:
    """``patient_id`` plus one mGy column per label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id",) + LABELS)
        for pid, doses in rows:
            w.writerow([pid] + [repr(float(doses[k])) for k in LABELS])


def read_dose_csv(path) -> list[tuple[str, dict]]:
    with open(path, newline="") as fh:
        return [(r["patient_id"], {k: float(r[k]) for k in LABELS}) for r in csv.DictReader(fh)]
