"""Point cloud ingest, synthetic shape generation, mesh sampling and manifests.

All randomness goes through :func:`make_rng`, a Philox-4x64 counter-based
generator seeded via numpy's SeedSequence, so a given seed reproduces the
same dataset on every platform.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "cylinder", "twin_spheres")
SEGMENT_KINDS = ("cylinder", "twin_spheres")

CYLINDER_RADIUS = 1.0
CYLINDER_HEIGHT = 2.0
TWIN_RADIUS = 0.5
TWIN_GAP = 1.0


class DataError(ValueError):
    """Malformed or unusable input data."""


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: Optional[np.ndarray] = None
    class_id: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DataError(f"coords must be N x 3, got shape {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise DataError("point cloud is empty")
        if not np.isfinite(self.coords).all():
            raise DataError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise DataError(
                    f"{self.labels.shape[0] if self.labels.ndim else 0} labels for "
                    f"{self.coords.shape[0]} points")
            if (self.labels < 0).any():
                raise DataError("negative part label")

    def __len__(self):
        return self.coords.shape[0]

    def check_parts(self, num_parts):
        if self.labels is not None and (self.labels >= num_parts).any():
            raise DataError(f"part label outside [0, {num_parts})")


@dataclass
class DatasetManifest:
    entries: List[Tuple[Path, int]] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest has duplicate paths")

    def __len__(self):
        return len(self.entries)

    def check_classes(self, num_classes):
        for path, cid in self.entries:
            if not 0 <= cid < num_classes:
                raise DataError(f"class id {cid} of {path} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def load_xyz(path):
    """Read an XYZ file: 3 or 4 whitespace-separated fields per line.

    A 4th column is read as an integer part label. Blank lines and anything
    after ``#`` are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    rows, labels = [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4) or (width is not None and len(fields) != width):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            width = len(fields)
            try:
                rows.append([float(v) for v in fields[:3]])
                if width == 4:
                    labels.append(int(fields[3]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no points")
    coords = np.array(rows, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise DataError(f"{path}: non-finite coordinate")
    return PointCloud(coords, np.array(labels, dtype=np.int64) if width == 4 else None)


def save_xyz(path, cloud, labels=None):
    """Write coords with 17 significant digits; labels (if any) as a 4th column."""
    labels = cloud.labels if labels is None else np.asarray(labels)
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(cloud.coords):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if labels is not None:
                line += f" {int(labels[i])}"
            fh.write(line + "\n")


def load_off(path):
    """Minimal ASCII OFF reader -> (vertices [V, 3], faces [F, 3])."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise DataError(f"{path}: missing OFF header")
    rest = tokens[0][3:]
    tokens = ([rest] if rest else []) + tokens[1:]
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
        pos = 3
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            poly = [int(t) for t in tokens[pos + 1:pos + 1 + k]]
            pos += 1 + k
            # fan-triangulate polygons
            faces.extend([poly[0], poly[i], poly[i + 1]] for i in range(1, k - 1))
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: truncated or malformed OFF body ({exc})") from None
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_manifest(path, split="train"):
    """Parse ``path<TAB>class_id`` records; relative paths resolve next to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such manifest")
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'path<TAB>class_id'")
            try:
                cid = int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: class id {parts[1]!r} is not an integer") from None
            p = Path(parts[0])
            entries.append((p if p.is_absolute() else base / p, cid))
    return DatasetManifest(entries, split)


def save_manifest(path, manifest):
    base = Path(path).parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for p, cid in manifest.entries:
            p = Path(p)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            fh.write(f"{p.as_posix()}\t{cid}\n")


def load_dataset(manifest):
    clouds = []
    for p, cid in manifest.entries:
        c = load_xyz(p)
        c.class_id = cid
        clouds.append(c)
    return clouds


# ---------------------------------------------------------------------------
# sampling and synthesis
# ---------------------------------------------------------------------------

def sample_mesh(vertices, faces, n, seed):
    """Area-weighted triangle choice followed by uniform barycentric sampling."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if n < 1:
        raise DataError("n must be >= 1")
    if f.size == 0 or f.min() < 0 or f.max() >= len(v):
        raise DataError("faces reference missing vertices")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = area.sum()
    if not total > 0:
        raise DataError("mesh has zero surface area")
    rng = make_rng(seed)
    cdf = np.cumsum(area) / total
    tri = np.searchsorted(cdf, rng.random(n), side="right")
    tri = np.minimum(tri, len(f) - 1)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    a, b, c = a[tri], b[tri], c[tri]
    pts = a + u[:, None] * (b - a) + w[:, None] * (c - a)
    return PointCloud(pts)


def _unit_sphere(rng, n):
    x = rng.standard_normal((n, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for ax in range(3):
        sel = axis == ax
        others = [d for d in range(3) if d != ax]
        pts[sel, ax] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
    side_area = 2 * math.pi * r * h
    cap_area = math.pi * r * r
    probs = np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area)
    labels = rng.choice(3, size=n, p=probs)
    theta = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(-h / 2, h / 2, n)
    rad = r * np.sqrt(rng.random(n))
    pts = np.empty((n, 3))
    side = labels == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = z[side]
    cap = ~side
    pts[cap, 0] = rad[cap] * np.cos(theta[cap])
    pts[cap, 1] = rad[cap] * np.sin(theta[cap])
    pts[cap, 2] = np.where(labels[cap] == 1, h / 2, -h / 2)
    return pts, labels


def _twin_spheres(rng, n):
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    labels = rng.permutation(labels)
    offset = TWIN_RADIUS + TWIN_GAP / 2
    pts = TWIN_RADIUS * _unit_sphere(rng, n)
    pts[:, 0] += np.where(labels == 0, -offset, offset)
    return pts, labels


def gen_synthetic(kind, n, noise_sigma=0.0, seed=0):
    """Sample ``n`` points on a unit-scale surface of the given kind.

    cylinder labels: 0 side, 1 top cap (z = +h/2), 2 bottom cap.
    twin_spheres labels: 0 for the sphere at -x, 1 for the one at +x.
    """
    if kind not in SHAPE_KINDS:
        raise DataError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 8:
        raise DataError("n must be >= 8")
    if noise_sigma < 0:
        raise DataError("noise_sigma must be >= 0")
    rng = make_rng(seed)
    labels = None
    if kind == "sphere":
        pts = _unit_sphere(rng, n)
    elif kind == "cube":
        pts = _cube(rng, n)
    elif kind == "cylinder":
        pts, labels = _cylinder(rng, n)
    else:
        pts, labels = _twin_spheres(rng, n)
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    return PointCloud(pts, labels, SHAPE_KINDS.index(kind))


def normalize_cloud(cloud):
    """Center on the centroid and scale so the farthest point has norm 1."""
    # offsets from the first point keep the centroid error relative to the
    # cloud's extent, which is what makes a second pass a no-op to ~1 ulp
    d = cloud.coords - cloud.coords[0]
    mean = np.array([math.fsum(col) for col in d.T]) / len(d)
    centered = d - mean
    scale = np.sqrt((centered * centered).sum(axis=1)).max()
    if not scale > 0:
        raise DataError("cannot normalize: all points coincide")
    return PointCloud(centered / scale, cloud.labels, cloud.class_id)


# part-label offsets so one segmentation label space covers both categories
SEGMENT_PART_OFFSET = {"cylinder": 0, "twin_spheres": 3}
SEGMENT_NUM_PARTS = 5


def segment_part_sets():
    """Category index (within SEGMENT_KINDS) -> global part labels it may use."""
    return {0: [0, 1, 2], 1: [3, 4]}


def make_dataset(task, n_clouds, n_points, noise_sigma=0.01, seed=0):
    """Balanced synthetic dataset for ``classify`` or ``segment``.

    Classification uses all four kinds as classes. Segmentation uses the
    cylinder and twin_spheres kinds; class_id is the category index within
    SEGMENT_KINDS and labels are shifted into one global part space.
    """
    kinds = SHAPE_KINDS if task == "classify" else SEGMENT_KINDS
    if task not in ("classify", "segment"):
        raise DataError(f"unknown task {task!r}")
    seeds = np.random.SeedSequence(int(seed)).generate_state(n_clouds, dtype=np.uint64)
    clouds = []
    for i in range(n_clouds):
        kind = kinds[i % len(kinds)]
        c = gen_synthetic(kind, n_points, noise_sigma, int(seeds[i]))
        if task == "segment":
            c = PointCloud(c.coords, c.labels + SEGMENT_PART_OFFSET[kind], kinds.index(kind))
        clouds.append(c)
    return clouds


def write_dataset(out_dir, clouds, split):
    """Write clouds as XYZ files under ``out_dir/split`` plus ``out_dir/split.tsv``."""
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, c in enumerate(clouds):
        p = out_dir / split / f"{i:05d}.xyz"
        save_xyz(p, c)
        entries.append((p, int(c.class_id)))
    manifest = DatasetManifest(entries, split)
    save_manifest(out_dir / f"{split}.tsv", manifest)
    return manifest
