"""Fit and inspect the cubic that moves rendered metric depth into the estimated-depth domain."""

import sys

import numpy as np

from proxyworld import depthadapt as D
from proxyworld import fixtures
from proxyworld.meshio import read_obj
from proxyworld.panorama import SKY_DEPTH, render_erp_depth
from proxyworld.terrain import TerrainMesh, default_origin, load_template_library


def main(workdir):
    fixtures.build_fixtures(workdir)
    lib = D.load_library(f"{workdir}/depth_refs")
    for tpl in load_template_library(f"{workdir}/terrain/index.json"):
        obj = read_obj(tpl.mesh_path)
        mesh = TerrainMesh(obj.vertices, obj.triangles)
        depth = render_erp_depth(mesh, default_origin(mesh), 256)
        q = D.thumbnail(depth)
        ref = D.retrieve_reference(q, lib)
        poly = D.fit_remap(q, ref)
        land = depth.plane() < SKY_DEPTH
        print(f"{tpl.id:<15} ref={ref.id:<15} sim={D.cosine(q, ref):.3f} "
              f"rms={poly.residual_rms:.4f} monotonic={poly.monotonic} "
              f"metric {depth.plane()[land].min():.1f}..{depth.plane()[land].max():.1f} m")
    print("coefficients of the last fit (t^3, t^2, t, 1):", np.round(poly.coefficients, 4))


if __name__ == "__main__":
    import tempfile

    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="proxyworld_"))
