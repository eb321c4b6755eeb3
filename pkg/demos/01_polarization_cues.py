"""Polarization cues on a glossy sphere.

Renders four polarizer-angle images of a dark, glossy sphere, recovers the
Stokes vector per pixel and reads off the angle and degree of linear
polarization.  The angle only fixes the surface azimuth up to four
choices (the pi and pi/2 ambiguities).  A coarse normal prior, here taken
from finite differences of depth, is enough to pick the right one.

    python3 demos/01_polarization_cues.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from polarsplat import core, fileio, patchmatch as pm, synth

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "polarization"
out.mkdir(parents=True, exist_ok=True)

scene = synth.SceneSpec(albedo=(0.03, 0.03, 0.03), specular_strength=0.9, specular_max=1.0,
                        shininess=10)
cam = synth.make_camera_ring(8, 4.0, 0.4, width=128, height=128, fov_deg=35)[0]
view = synth.render_view(scene, cam)

stokes = core.stokes_from_angles(view.capture)
pol = core.aolp_dolp(stokes)
fg = view.foreground
print(f"foreground pixels: {fg.sum()}")
print(f"DoLP: median {np.median(pol.dolp[fg]):.3f}, max {pol.dolp[fg].max():.3f}")

# the measured AoLP agrees with the renderer's ground truth modulo pi
d = np.abs((pol.aolp - view.gt_aolp + np.pi / 2) % np.pi - np.pi / 2)
ok = pol.aolp_valid & fg
print(f"AoLP vs ground truth: max error {d[ok].max():.2e} rad over {ok.sum()} px")

prior = core.normals_from_depth(cam, view.gt_depth)
chosen = pm.azimuth_branches(prior, pol)
truth = pm.true_branch(view.gt_azimuth, pol.aolp)
sel = ok & (np.linalg.norm(prior, axis=-1) > 0)
for name, m in (("specular (DoLP >= 0.9)", sel & (pol.dolp >= 0.9)),
                ("diffuse (DoLP <= 0.1)", sel & (pol.dolp <= 0.1)),
                ("all", sel)):
    if m.any():
        print(f"azimuth branch correct, {name}: {(chosen == truth)[m].mean():.4f} of {m.sum()} px")

fileio.write_png16(out / "intensity.png", np.clip(core.intensity_image(stokes), 0, 1))
fileio.write_png16(out / "dolp.png", np.repeat(pol.dolp[..., None], 3, axis=-1))
fileio.write_png16(out / "aolp.png", np.repeat((pol.aolp / np.pi)[..., None], 3, axis=-1))
print(f"images written to {out}")
