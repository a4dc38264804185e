"""
The X-ray source model
======================

Spectrum, bowtie filtration and heel effect, and what the sampler draws
from them.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from voxeldose.source import (
    BowtieProfile,
    ScannerGeometry,
    SourceModel,
    apply_bowtie,
    generate_spectrum,
    helical_poses,
    sample_emission,
)

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

g = ScannerGeometry(scan_start_mm=0.0, scan_end_mm=400.0)
spectrum = generate_spectrum(g.tube_potential_kvp)
print(f"{g.tube_potential_kvp} kVp spectrum, mean energy {spectrum.mean_energy():.2f} keV")

src = SourceModel.build(g, spectrum)
bowtie_edge, rel = apply_bowtie(spectrum, 20.0, BowtieProfile.default())
print(f"at 20 deg fan angle the bowtie passes {rel:.1%} of photons, "
      f"mean energy hardens to {bowtie_edge.mean_energy():.2f} keV")

poses = helical_poses(g)
print(f"{len(poses)} source poses, z from {poses[0].position[2]:.1f} to {poses[-1].position[2]:.1f} mm")

rng = np.random.default_rng(0)
_, _, energy, _, phi, theta = sample_emission(poses[0], g, src, rng, size=200_000)

fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
p = spectrum.normalized()
axes[0].plot(p.energies, p.fluence, label="tube output")
counts = np.bincount(np.searchsorted(spectrum.energies, energy), minlength=len(spectrum.energies))
axes[0].plot(spectrum.energies, counts / counts.sum(), label="sampled (after bowtie)")
axes[0].set_xlabel("energy (keV)")
axes[0].legend(fontsize=7)

axes[1].hist(phi, bins=84, density=True)
axes[1].plot(src.fan_nodes, src.fan_density(src.fan_nodes), "k")
axes[1].set_xlabel("fan angle (deg)")

axes[2].hist(theta, bins=40, density=True)
axes[2].plot(src.cone_nodes, src.cone_density(src.cone_nodes), "k")
axes[2].set_xlabel("cone angle (deg)")
fig.tight_layout()
fig.savefig(out / "source_model.png", dpi=90)
print("wrote", out / "source_model.png")
