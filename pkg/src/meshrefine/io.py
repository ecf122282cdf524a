"""Readers and writers: PFM depth, PPM colour, scene manifests, COLMAP text, OBJ export."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FLIP_YZ, Intrinsics, Pose, View


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class ManifestError(ValueError):
    """Manifest is syntactically valid but semantically inconsistent."""


class UnsupportedCameraModel(FormatError):
    pass


# --------------------------------------------------------------------- PFM


def write_pfm(path, depth: np.ndarray) -> None:
    """Write a single-channel little-endian PFM.  NaN marks invalid pixels."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"expected a 2D depth map, got shape {depth.shape}")
    h, w = depth.shape
    data = np.flipud(depth).astype("<f4", copy=False)
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def _read_header_line(f) -> str:
    line = f.readline()
    if not line:
        raise FormatError("truncated PFM header")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as a float32 ``(H, W)`` array (NaN = invalid)."""
    with open(path, "rb") as f:
        tag = _read_header_line(f)
        if tag == "PF":
            raise FormatError("3-channel PFM ('PF') given to the single-channel reader")
        if tag != "Pf":
            raise FormatError(f"not a PFM file (magic {tag!r})")
        dims = _read_header_line(f).split()
        if len(dims) != 2:
            raise FormatError("malformed PFM size line")
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(_read_header_line(f))
        except ValueError as exc:
            raise FormatError(f"malformed PFM header: {exc}") from None
        if w <= 0 or h <= 0:
            raise FormatError("non-positive PFM dimensions")
        if scale > 0:
            raise FormatError("big-endian PFM files are not supported")
        if scale == 0:
            raise FormatError("PFM scale must be non-zero")
        payload = f.read(4 * w * h)
    if len(payload) != 4 * w * h:
        raise FormatError(f"truncated PFM payload: {len(payload)} of {4 * w * h} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return np.flipud(data).astype(np.float32)


def depth_mask(depth: np.ndarray) -> np.ndarray:
    """Validity mask of a depth map: finite and strictly positive."""
    depth = np.asarray(depth)
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


# --------------------------------------------------------------------- PPM


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _ppm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens (with # comments)."""
    tokens, pos = [], 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise FormatError("truncated PPM header")
        tokens.append(m.group(2).decode("ascii", errors="replace"))
        pos = m.end()
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image with maxval 255 as float64 values ``v / 255``."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _ppm_tokens(buf, 4)
    if magic != "P6":
        raise FormatError(f"unsupported PPM magic {magic!r} (only binary P6)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} (only 255)")
    n = w * h * 3
    if len(buf) - start < n:
        raise FormatError("truncated PPM payload")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).reshape(h, w, 3) / 255.0


# --------------------------------------------------------------------- manifest


@dataclass
class ViewRecord:
    id: int
    image: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    q: tuple[float, float, float, float]
    t: tuple[float, float, float]

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def pose(self) -> Pose:
        return Pose.from_quaternion(self.q, self.t)


@dataclass
class SceneManifest:
    near: float
    far: float
    ref_view: int
    views: list[ViewRecord]
    points: str
    mono: str
    gt: str | None = None
    version: int = 1
    root: Path = field(default_factory=Path, compare=False)

    def resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def view(self, view_id: int) -> ViewRecord:
        for v in self.views:
            if v.id == view_id:
                return v
        raise KeyError(view_id)

    def validate(self, check_files: bool = True) -> None:
        if self.version != 1:
            raise ManifestError(f"unsupported manifest version {self.version}")
        if not (0 < self.near < self.far):
            raise ManifestError(f"invalid near/far {self.near}/{self.far}")
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate view id")
        if self.ref_view not in ids:
            raise ManifestError(f"ref_view {self.ref_view} is not among the views")
        for v in self.views:
            v.intrinsics  # noqa: B018 - validates
            v.pose  # noqa: B018
        if check_files:
            names = [v.image for v in self.views] + [self.points, self.mono]
            if self.gt is not None:
                names.append(self.gt)
            for name in names:
                if not self.resolve(name).is_file():
                    raise ManifestError(f"unresolvable path: {name}")


_SCALAR_KEYS = {"version": int, "near": float, "far": float, "ref_view": int, "points": str, "mono": str, "gt": str}
_REQUIRED = ("version", "near", "far", "ref_view", "points", "mono")


def parse_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    values: dict = {}
    views: list[ViewRecord] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        if not values and key != "version":
            raise FormatError(f"line {lineno}: manifest must start with 'version'")
        try:
            if key == "view":
                if len(args) != 15:
                    raise FormatError(f"line {lineno}: view needs 15 fields, got {len(args)}")
                nums = [float(a) for a in args[2:]]
                views.append(
                    ViewRecord(
                        id=int(args[0]),
                        image=args[1],
                        width=int(args[2]),
                        height=int(args[3]),
                        fx=nums[2],
                        fy=nums[3],
                        cx=nums[4],
                        cy=nums[5],
                        q=tuple(nums[6:10]),
                        t=tuple(nums[10:13]),
                    )
                )
            elif key in _SCALAR_KEYS:
                if key in values:
                    raise FormatError(f"line {lineno}: duplicate key: {key}")
                if len(args) != 1:
                    raise FormatError(f"line {lineno}: {key} takes exactly one value")
                values[key] = _SCALAR_KEYS[key](args[0])
            else:
                raise FormatError(f"line {lineno}: unknown key: {key}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"line {lineno}: {exc}") from None
    for key in _REQUIRED:
        if key not in values:
            raise FormatError(f"missing key: {key}")
    if not views:
        raise FormatError("missing key: view")
    manifest = SceneManifest(
        near=values["near"],
        far=values["far"],
        ref_view=values["ref_view"],
        views=views,
        points=values["points"],
        mono=values["mono"],
        gt=values.get("gt"),
        version=values["version"],
        root=path.parent,
    )
    manifest.validate(check_files=check_files)
    return manifest


def write_manifest(path, m: SceneManifest) -> None:
    lines = [
        f"version {m.version}",
        f"near {float(m.near)!r}",
        f"far {float(m.far)!r}",
        f"ref_view {m.ref_view}",
    ]
    for v in m.views:
        nums = [v.fx, v.fy, v.cx, v.cy, *v.q, *v.t]
        lines.append(f"view {v.id} {v.image} {v.width} {v.height} " + " ".join(repr(float(x)) for x in nums))
    lines.append(f"points {m.points}")
    lines.append(f"mono {m.mono}")
    if m.gt is not None:
        lines.append(f"gt {m.gt}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_points(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
    if pts.size == 0:
        raise FormatError("sparse point file is empty")
    if pts.shape[1] != 3:
        raise FormatError(f"expected 3 columns in point file, got {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise FormatError("non-finite point coordinates")
    return pts


def write_points(path, pts: np.ndarray) -> None:
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as f:
        for p in pts:
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


# --------------------------------------------------------------------- COLMAP


def _data_lines(path: Path):
    for line in path.read_text(encoding="utf-8").splitlines():
        s = line.strip()
        if s and not s.startswith("#"):
            yield s


def import_colmap_text(directory, ref_image: int | str):
    """Import a COLMAP text model.

    ``ref_image`` is an image id or image name.  Returns ``(views, points)`` with the
    views sorted by image id and only those 3D points whose track contains an
    observation in the reference image.
    """
    directory = Path(directory)
    cameras = {}
    for line in _data_lines(directory / "cameras.txt"):
        parts = line.split()
        cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params[:3]
            cameras[cam_id] = Intrinsics(f, f, cx, cy, w, h)
        elif model == "PINHOLE":
            fx, fy, cx, cy = params[:4]
            cameras[cam_id] = Intrinsics(fx, fy, cx, cy, w, h)
        else:
            raise UnsupportedCameraModel(f"unsupported camera model: {model}")

    views = []
    ref_id = None
    # header line + 2D-observation line per image; the second may be blank
    raw = [r for r in (directory / "images.txt").read_text(encoding="utf-8").splitlines() if not r.startswith("#")]
    for i in range(0, len(raw), 2):
        header = raw[i].split()
        if not header:
            continue
        image_id = int(header[0])
        q = [float(x) for x in header[1:5]]
        t = [float(x) for x in header[5:8]]
        cam_id, name = int(header[8]), header[9]
        views.append(View(image_id, cameras[cam_id], Pose.from_quaternion(q, t), image_path=name))
        if ref_image == image_id or ref_image == name:
            ref_id = image_id
    if ref_id is None:
        raise KeyError(f"reference image {ref_image!r} not found in images.txt")
    views.sort(key=lambda v: v.id)

    points = []
    for line in _data_lines(directory / "points3D.txt"):
        parts = line.split()
        track = parts[8:]
        image_ids = {int(track[k]) for k in range(0, len(track), 2)}
        if ref_id in image_ids:
            points.append([float(parts[1]), float(parts[2]), float(parts[3])])
    return views, np.array(points, dtype=float).reshape(-1, 3)


# --------------------------------------------------------------------- OBJ


def export_obj(mesh, cam: View, path) -> None:
    """Write ``mesh`` as an OBJ with vertex colours.

    Positions are world coordinates in a y-up frame (the camera-convention world
    rotated by 180 degrees about x), so a point 2 m in front of an identity camera
    is written as ``v 0 0 -2``.
    """
    X_gl = mesh.camera_points()
    X_cv = X_gl @ FLIP_YZ[:3, :3]
    X_world = (X_cv - cam.pose.t) @ cam.pose.R
    X_out = X_world @ FLIP_YZ[:3, :3]
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# depth mesh: {len(X_out)} vertices, {len(mesh.faces)} faces\n")
        for p, c in zip(X_out, mesh.colors):
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")

