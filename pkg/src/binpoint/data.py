"""Synthetic point-cloud generation, normalization, and file ingestion.

Shapes are sampled uniformly on the surface of simple primitives.  The
centrally symmetric ones (sphere, cube, cylinder, torus) are drawn as
antipodal pairs so the raw sample centroid is exactly zero; after unit-sphere
normalization a noise-free sphere therefore has every point at norm 1.

Determinism: all randomness flows through numpy's PCG64 via
``np.random.default_rng`` seeded with explicit integer seed sequences, which
is specified and platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Unknown shape kind or inconsistent dataset parameters."""


class ParseError(ValueError):
    """Malformed point-cloud file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(message + suffix)


SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "cone")
DEFAULT_CLASSES = ("sphere", "cube", "cylinder", "torus")


@dataclass
class PointCloud:
    points: np.ndarray  # n x 3 float64
    label: int = -1

    @property
    def n(self) -> int:
        return self.points.shape[0]


def normalize(points: np.ndarray) -> np.ndarray:
    """Center the centroid at the origin and scale the farthest point to norm 1."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        raise ConfigError("cannot normalize a degenerate (single-point) cloud")
    return centered / radius


# ---------------------------------------------------------------------------
# primitive surface samplers (raw, pre-normalization)
# ---------------------------------------------------------------------------

def _pair_antipodal(half: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Mirror half the points through the origin; exact zero centroid for even n."""
    pts = np.concatenate([half, -half], axis=0)
    if pts.shape[0] > n:  # odd n: drop one mirrored point
        pts = pts[:n]
    return pts


def _sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    half = rng.standard_normal(((n + 1) // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    return _pair_antipodal(half, n, rng)


def _cube(n: int, rng: np.random.Generator) -> np.ndarray:
    m = (n + 1) // 2
    face_axis = rng.integers(0, 3, size=m)
    uv = rng.uniform(-0.5, 0.5, size=(m, 2))
    half = np.empty((m, 3))
    for i in range(m):
        axes = [a for a in range(3) if a != face_axis[i]]
        half[i, face_axis[i]] = 0.5
        half[i, axes[0]], half[i, axes[1]] = uv[i]
    return _pair_antipodal(half, n, rng)


def _cylinder(n: int, rng: np.random.Generator, radius: float = 0.4, height: float = 1.2) -> np.ndarray:
    m = (n + 1) // 2
    side_area = 2 * np.pi * radius * height
    cap_area = 2 * np.pi * radius ** 2
    on_side = rng.uniform(size=m) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, size=m)
    half = np.empty((m, 3))
    z_side = rng.uniform(-height / 2, height / 2, size=m)
    r_cap = radius * np.sqrt(rng.uniform(size=m))
    half[:, 0] = np.where(on_side, radius * np.cos(theta), r_cap * np.cos(theta))
    half[:, 1] = np.where(on_side, radius * np.sin(theta), r_cap * np.sin(theta))
    half[:, 2] = np.where(on_side, z_side, height / 2)
    return _pair_antipodal(half, n, rng)


def _torus(n: int, rng: np.random.Generator, major: float = 0.4, minor: float = 0.15) -> np.ndarray:
    m = (n + 1) // 2
    u = rng.uniform(0, 2 * np.pi, size=m)
    # rejection sampling in v corrects for the non-uniform area element
    v = np.empty(m)
    filled = 0
    while filled < m:
        cand = rng.uniform(0, 2 * np.pi, size=2 * (m - filled))
        accept = rng.uniform(size=cand.size) < (major + minor * np.cos(cand)) / (major + minor)
        take = cand[accept][: m - filled]
        v[filled : filled + take.size] = take
        filled += take.size
    half = np.stack([
        (major + minor * np.cos(v)) * np.cos(u),
        (major + minor * np.cos(v)) * np.sin(u),
        minor * np.sin(v),
    ], axis=1)
    return _pair_antipodal(half, n, rng)


def _cone(n: int, rng: np.random.Generator, radius: float = 0.5, height: float = 1.0) -> np.ndarray:
    slant = np.sqrt(radius ** 2 + height ** 2)
    side_area = np.pi * radius * slant
    base_area = np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(size=n))  # uniform over the lateral surface
    r = np.where(on_side, radius * t, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, height * (1 - t) - height / 2, -height / 2)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "cone": _cone,
}


def sample_surface(kind: str, n: int, seed: int = 0) -> np.ndarray:
    """Raw surface sample in the primitive's own frame (no jitter/rotation/normalization)."""
    if kind not in _SAMPLERS:
        raise ConfigError(f"unknown shape kind {kind!r}; known: {', '.join(SHAPE_KINDS)}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    return _SAMPLERS[kind](n, rng)


def generate_shape(kind: str, n: int, noise_sigma: float = 0.0, seed: int = 0,
                   label: int = -1) -> PointCloud:
    """Sample a primitive surface, jitter, rotate about the z axis, normalize."""
    if kind not in _SAMPLERS:
        raise ConfigError(f"unknown shape kind {kind!r}; known: {', '.join(SHAPE_KINDS)}")
    if n < 8:
        raise ConfigError("need at least 8 points")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    pts = _SAMPLERS[kind](n, rng)  # same stream as sample_surface(kind, n, seed)
    if noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    angle = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return PointCloud(points=normalize(pts @ rot.T), label=label)


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def load_xyz(path) -> PointCloud:
    """Whitespace-separated "x y z" lines; result is normalized."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", line=lineno)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {line!r}", line=lineno) from None
    if not rows:
        raise ParseError(f"no points found in {path}")
    return PointCloud(points=normalize(np.array(rows)))


def _read_off(path) -> tuple[np.ndarray, list[list[int]]]:
    with open(path) as fh:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(fh)]
    lines = [(no, ln) for no, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError(f"empty OFF file {path}")
    idx = 0
    no, header = lines[idx]
    if header.startswith("OFF"):
        rest = header[3:].strip()
        idx += 1
        if rest:  # counts glued onto the header line (a common ModelNet quirk)
            lines.insert(idx, (no, rest))
    else:
        raise ParseError("missing OFF header", line=no)
    no, counts = lines[idx]
    parts = counts.split()
    if len(parts) < 2:
        raise ParseError("expected vertex and face counts", line=no)
    try:
        n_verts, n_faces = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"bad counts line {counts!r}", line=no) from None
    idx += 1
    if len(lines) < idx + n_verts + n_faces:
        raise ParseError(f"truncated OFF file: {len(lines) - idx} lines for "
                         f"{n_verts} vertices + {n_faces} faces")
    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        no, ln = lines[idx + i]
        parts = ln.split()
        if len(parts) < 3:
            raise ParseError("vertex line needs 3 coordinates", line=no)
        try:
            verts[i] = [float(v) for v in parts[:3]]
        except ValueError:
            raise ParseError(f"non-numeric vertex {ln!r}", line=no) from None
    faces = []
    for i in range(n_faces):
        no, ln = lines[idx + n_verts + i]
        parts = ln.split()
        try:
            k = int(parts[0])
            face = [int(v) for v in parts[1 : 1 + k]]
        except (ValueError, IndexError):
            raise ParseError(f"bad face line {ln!r}", line=no) from None
        if len(face) < 3 or any(v < 0 or v >= n_verts for v in face):
            raise ParseError(f"face references missing vertices: {ln!r}", line=no)
        faces.append(face)
    return verts, faces


def sample_mesh(vertices: np.ndarray, faces: list[list[int]], n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface sampling of a triangulated mesh (raw points)."""
    tris = []
    for face in faces:
        for i in range(1, len(face) - 1):  # fan-triangulate polygons
            tris.append((face[0], face[i], face[i + 1]))
    tri = np.array(tris)
    a, b, c = vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if areas.sum() == 0.0:
        raise ParseError("mesh has zero total surface area")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    chosen = rng.choice(len(tri), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return a[chosen] + u * (b[chosen] - a[chosen]) + v * (c[chosen] - a[chosen])


def load_off(path, n: int = 1024, seed: int = 0) -> PointCloud:
    """Standard OFF mesh, surface-sampled to n points and normalized."""
    verts, faces = _read_off(path)
    if faces:
        pts = sample_mesh(verts, faces, n, seed=seed)
    else:
        pts = verts
    return PointCloud(points=normalize(pts))


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def make_dataset(classes=DEFAULT_CLASSES, per_class: int = 100, n_points: int = 1024,
                 seed: int = 0, noise_sigma: float = 0.02,
                 ) -> tuple[list[PointCloud], list[PointCloud]]:
    """Stratified 80/20 train/test split of seeded synthetic clouds.

    Every sample gets its own child seed derived from (seed, class, index),
    so splits are disjoint by construction and the ordering is stable.
    """
    if per_class < 2:
        raise ConfigError("need at least 2 clouds per class")
    train, test = [], []
    for label, kind in enumerate(classes):
        n_train = int(per_class * 0.8)
        for i in range(per_class):
            child = np.random.SeedSequence(entropy=seed, spawn_key=(label, i))
            sample_seed = int(child.generate_state(1)[0])
            cloud = generate_shape(kind, n_points, noise_sigma=noise_sigma,
                                   seed=sample_seed, label=label)
            (train if i < n_train else test).append(cloud)
    return train, test


def write_manifest(path, clouds: list[PointCloud], directory: Path):
    """Line-based "path,label" index; one .xyz file per cloud."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, cloud in enumerate(clouds):
            fname = directory / f"cloud_{i:05d}.xyz"
            np.savetxt(fname, cloud.points, fmt="%.17g")
            fh.write(f"{fname},{cloud.label}\n")


def load_manifest(path) -> list[PointCloud]:
    clouds = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                fname, label = line.rsplit(",", 1)
                clouds.append(PointCloud(points=load_xyz(fname).points, label=int(label)))
            except ValueError:
                raise ParseError(f"bad manifest line {line!r}", line=lineno) from None
    return clouds
