import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshrefine.core import Intrinsics, Pose, View, projection_from_intrinsics
from meshrefine.io import (
    FormatError,
    ManifestError,
    SceneManifest,
    UnsupportedCameraModel,
    ViewRecord,
    depth_mask,
    export_obj,
    import_colmap_text,
    parse_manifest,
    read_pfm,
    read_points,
    read_ppm,
    write_manifest,
    write_pfm,
    write_points,
    write_ppm,
)
from meshrefine.meshing import build_depth_mesh


def test_pfm_round_trip_bit_identical(tmp_path):
    d = np.array([[1, 2], [3, 4]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", d)
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32 and back.tobytes() == d.tobytes()


def test_pfm_nan_is_invalid(tmp_path):
    d = np.ones((3, 4), dtype=np.float32)
    d[1, 2] = np.nan
    write_pfm(tmp_path / "a.pfm", d)
    mask = depth_mask(read_pfm(tmp_path / "a.pfm"))
    assert (~mask).sum() == 1 and not mask[1, 2]


def test_pfm_rejects_colour_and_garbage(tmp_path):
    p = tmp_path / "c.pfm"
    p.write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(FormatError):
        read_pfm(p)
    p.write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(FormatError):
        read_pfm(p)
    p.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(FormatError, match="truncated"):
        read_pfm(p)
    p.write_bytes(b"Pf\n1 1\n1.0\n" + b"\0" * 4)
    with pytest.raises(FormatError, match="big-endian"):
        read_pfm(p)


def test_pfm_bottom_to_top_rows(tmp_path):
    d = np.array([[1, 2], [3, 4]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", d)
    raw = (tmp_path / "a.pfm").read_bytes()
    payload = np.frombuffer(raw[-16:], dtype="<f4")
    assert list(payload) == [3, 4, 1, 2]


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip_property(tmp_path_factory, d):
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(p, d)
    assert read_pfm(p).tobytes() == d.tobytes()


def test_ppm_quantisation(tmp_path):
    img = np.zeros((2, 3, 3))
    write_ppm(tmp_path / "k.ppm", img)
    assert set((tmp_path / "k.ppm").read_bytes()[-18:]) == {0}
    img[0, 0] = [1.0, 0.5, 0.0]
    write_ppm(tmp_path / "k.ppm", img)
    back = read_ppm(tmp_path / "k.ppm")
    assert back[0, 0, 0] == 1.0
    assert back[0, 0, 1] == 128 / 255
    assert back[0, 0, 1] == pytest.approx(0.50196, abs=1e-5)


@given(arrays(np.float64, (3, 4, 3), elements=st.floats(0, 1)))
def test_ppm_round_trip_within_quantum(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(p, img)
    assert np.max(np.abs(read_ppm(p) - img)) <= 0.5 / 255 + 1e-12


def test_ppm_comments_and_errors(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x10\x20\x30")
    assert np.allclose(read_ppm(p)[0, 0] * 255, [16, 32, 48])
    p.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError):
        read_ppm(p)
    p.write_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0")
    with pytest.raises(FormatError):
        read_ppm(p)


def _minimal_scene(tmp_path, extra=""):
    write_ppm(tmp_path / "v0.ppm", np.zeros((4, 4, 3)))
    write_pfm(tmp_path / "mono.pfm", np.ones((4, 4), np.float32))
    write_points(tmp_path / "pts.txt", np.array([[0.0, 0.0, 2.0]]))
    text = (
        "version 1\nnear 0.1\nfar 100\nref_view 0\n"
        "view 0 v0.ppm 4 4 2 2 2 2 1 0 0 0 0 0 0\npoints pts.txt\nmono mono.pfm\n" + extra
    )
    (tmp_path / "scene.txt").write_text(text)
    return tmp_path / "scene.txt"


def test_manifest_minimal_parses(tmp_path):
    m = parse_manifest(_minimal_scene(tmp_path))
    assert m.ref_view == 0 and len(m.views) == 1 and m.gt is None
    assert m.views[0].intrinsics.fx == 2.0


def test_manifest_missing_mono(tmp_path):
    p = _minimal_scene(tmp_path)
    p.write_text("\n".join(l for l in p.read_text().splitlines() if not l.startswith("mono")))
    with pytest.raises(FormatError, match="missing key: mono"):
        parse_manifest(p)


def test_manifest_bad_ref_view(tmp_path):
    p = _minimal_scene(tmp_path)
    p.write_text(p.read_text().replace("ref_view 0", "ref_view 3"))
    with pytest.raises(ManifestError):
        parse_manifest(p)


def test_manifest_errors(tmp_path):
    p = _minimal_scene(tmp_path)
    base = p.read_text()
    for bad in [base.replace("near 0.1", "near 200"), base + "colour red\n", base + "mono x.pfm\n", base + "gt missing.pfm\n"]:
        p.write_text(bad)
        with pytest.raises(ValueError):
            parse_manifest(p)


def test_manifest_round_trip(tmp_path):
    rec = ViewRecord(3, "a.ppm", 8, 6, 5.5, 5.25, 4.0, 3.0, (1.0, 0.0, 0.0, 0.0), (0.1, -0.2, 0.3))
    m = SceneManifest(0.25, 50.0, 3, [rec], "p.txt", "m.pfm", "g.pfm", root=tmp_path)
    write_manifest(tmp_path / "s.txt", m)
    back = parse_manifest(tmp_path / "s.txt", check_files=False)
    assert back == m


def test_points_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    write_points(tmp_path / "p.txt", pts)
    assert np.array_equal(read_points(tmp_path / "p.txt"), pts)
    (tmp_path / "q.txt").write_text("1 2\n")
    with pytest.raises(FormatError):
        read_points(tmp_path / "q.txt")


def _colmap(tmp_path, model="SIMPLE_PINHOLE 640 480 500 320 240"):
    (tmp_path / "cameras.txt").write_text(f"# cams\n1 {model}\n")
    (tmp_path / "images.txt").write_text(
        "# images\n"
        "1 1 0 0 0 0 0 0 1 a.jpg\n10 20 1 30 2\n"
        "2 1 0 0 0 1 0 0 1 b.jpg\n\n"
    )
    (tmp_path / "points3D.txt").write_text(
        "# pts\n1 0.5 0.5 3 0 0 0 0.1 1 0 2 0\n2 1 1 4 0 0 0 0.1 2 0\n"
    )


def test_colmap_import(tmp_path):
    _colmap(tmp_path)
    views, pts = import_colmap_text(tmp_path, "a.jpg")
    assert [v.id for v in views] == [1, 2]
    c = views[0].intrinsics
    assert c.fx == c.fy == 500 and (c.cx, c.cy) == (320, 240)
    assert np.allclose(views[0].pose.R, np.eye(3))
    assert np.allclose(pts, [[0.5, 0.5, 3.0]])
    with pytest.raises(KeyError):
        import_colmap_text(tmp_path, "z.jpg")


def test_colmap_unsupported_model(tmp_path):
    _colmap(tmp_path, "OPENCV 640 480 500 500 320 240 0 0 0 0")
    with pytest.raises(UnsupportedCameraModel):
        import_colmap_text(tmp_path, 1)


def _quad_mesh(depth=2.0, size=8, d=4):
    c = Intrinsics(size, size, size / 2, size / 2, size, size)
    P = projection_from_intrinsics(c, 0.1, 100.0)
    return build_depth_mesh(np.full((size, size), depth), np.full((size, size, 3), 0.5), c, d, P), c


def test_obj_quad(tmp_path):
    mesh, c = _quad_mesh()
    export_obj(mesh, View(0, c, Pose.identity()), tmp_path / "m.obj")
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 4
    assert sum(l.startswith("f ") for l in lines) == 2


def test_obj_empty(tmp_path):
    mesh, c = _quad_mesh()
    empty = mesh.subset(np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64))
    export_obj(empty, View(0, c, Pose.identity()), tmp_path / "e.obj")
    lines = (tmp_path / "e.obj").read_text().splitlines()
    assert all(l.startswith("#") for l in lines)


def test_obj_principal_point_vertex(tmp_path):
    # samples at pixels 1, 3, 5 of a 6x6 image: the middle one is on the principal ray
    mesh, c = _quad_mesh(size=6, d=2)
    export_obj(mesh, View(0, c, Pose.identity()), tmp_path / "m.obj")
    vs = [l.split() for l in (tmp_path / "m.obj").read_text().splitlines() if l.startswith("v ")]
    xyz = np.array([[float(t) for t in v[1:4]] for v in vs])
    centre = xyz[np.argmin(np.abs(xyz[:, 0]) + np.abs(xyz[:, 1]))]
    assert np.allclose(centre, [0, 0, -2], atol=1e-9)
