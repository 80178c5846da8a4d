import numpy as np
import pytest

from proxyworld import fixtures
from proxyworld.terrain import TerrainMesh


def grid_plane(half=10.0, cells=20, y=0.0):
    """Tessellated square plane at height ``y``, two triangles per cell."""
    s = np.linspace(-half, half, cells + 1)
    xx, zz = np.meshgrid(s, s)
    verts = np.stack([xx.ravel(), np.full(xx.size, y), zz.ravel()], axis=1)
    n = cells + 1
    i, j = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    a = (i * n + j).ravel()
    b, c, d = a + 1, a + n, a + n + 1
    tris = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    return verts, tris


@pytest.fixture
def plane_mesh():
    v, t = grid_plane(half=200.0, cells=40)
    return TerrainMesh(v, t)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixtures")
    fixtures.build_fixtures(root)
    return root


# -- acceptance summary ------------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        key = props["criterion"]
        if report.failed or key not in _CRITERIA:
            _CRITERIA[key] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k.split()[0])):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{status}  {key}" + (f"  ({detail})" if detail else ""))
