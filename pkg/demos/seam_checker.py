"""Render a checkerboard through panoramic UVs with and without the seam fix.

Writes seam_fixed.png and seam_broken.png; the broken render shows the
smeared column where triangles straddle u = 0.
"""

import sys
from pathlib import Path

import numpy as np

from proxyworld import terrain as T
from proxyworld.imageio import write_png


def band(segments=32, radius=10.0, rows=16):
    ang = (np.arange(segments) + 0.5) / segments * 2 * np.pi
    ys = np.linspace(-4.0, 4.0, rows + 1)
    verts = np.array([(radius * np.sin(a), y, radius * np.cos(a)) for y in ys for a in ang])
    tris = []
    for r in range(rows):
        for s in range(segments):
            a, b = r * segments + s, r * segments + (s + 1) % segments
            tris += [(a, b, a + segments), (b, b + segments, a + segments)]
    return T.TerrainMesh(verts, np.array(tris))


def main(out="."):
    out = Path(out)
    W, H = 512, 256
    yy, xx = np.mgrid[0:H, 0:W]
    tex = (((xx // 32) + (yy // 32)) % 2).astype(float)[..., None]
    mesh, o = T.assign_panoramic_uv(band(), np.zeros(3)), np.zeros(3)
    for name, m in (("fixed", T.fix_seam_uvs(mesh)), ("broken", mesh)):
        img = T.render_uv_texture(m, o, tex, W)
        write_png(out / f"seam_{name}.png", np.nan_to_num(img, nan=0.5))
        print(f"wrote {out / f'seam_{name}.png'}")


if __name__ == "__main__":
    main(*sys.argv[1:])
