"""Synthetic labelled point clouds, datasets, and the PCLD file format.

Every primitive used here is centrally symmetric, so surface samples are drawn
in antipodal pairs: the noiseless centroid is then exactly the origin and
normalisation does not distort the shape.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError
from .geometry import PointCloud

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")
PART_KINDS = ("mug", "lamp", "table")
CATEGORY_PARTS = {"mug": (0, 1), "lamp": (2, 3, 4), "table": (5, 6)}
PART_NAMES = {0: "body", 1: "handle", 2: "base", 3: "pole", 4: "shade", 5: "top", 6: "legs"}
NUM_PARTS = 7
# (train, test) clouds per class or category written by ``clcsca gen-data``
DEFAULT_SPLITS = {"classification": (50, 25), "segmentation": (48, 16)}

CYLINDER_RADIUS = 0.5
CYLINDER_HALF_HEIGHT = 1.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.3


def normalize(coords: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale the farthest point to radius 1."""
    c = coords - coords.mean(axis=0)
    return c / np.sqrt((c * c).sum(axis=1)).max()


def rotate_z(coords: np.ndarray, angle: float) -> np.ndarray:
    ca, sa = math.cos(angle), math.sin(angle)
    rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    return coords @ rot.T


# ---------------------------------------------------------------------------
# surface samplers (uniform by area)


def _sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(n, rng, half):
    """Uniform on the surface of an axis-aligned box with half-extents ``half``."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * np.asarray(half)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return pts


def _cylinder_side(n, rng, radius, z0, z1):
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), rng.uniform(z0, z1, n)])


def _disk(n, rng, radius, z):
    rad = radius * np.sqrt(rng.uniform(0, 1, n))
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), np.full(n, z)])


def _cylinder(n, rng, radius=CYLINDER_RADIUS, half=CYLINDER_HALF_HEIGHT):
    side = 2 * np.pi * radius * 2 * half
    cap = np.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    out = _cylinder_side(n, rng, radius, -half, half)
    for w, z in ((1, half), (2, -half)):
        m = which == w
        out[m] = _disk(int(m.sum()), rng, radius, z)
    return out


def _torus_angles(n, rng, major, minor, u_range=(0.0, 2 * np.pi)):
    """Angles (u around the axis, v around the tube) with density ~ (R + r cos v)."""
    us, vs = [], []
    have = 0
    while have < n:
        m = 2 * (n - have) + 8
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) * (major + minor) <= major + minor * np.cos(v)
        vs.append(v[keep])
        us.append(rng.uniform(*u_range, m)[keep])
        have += int(keep.sum())
    return np.concatenate(us)[:n], np.concatenate(vs)[:n]


def _torus(n, rng, major=TORUS_MAJOR, minor=TORUS_MINOR):
    u, v = _torus_angles(n, rng, major, minor)
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


def _frustum_side(n, rng, r_bottom, r_top, z0, z1):
    """Lateral surface of a cone frustum; height fraction drawn with density ~ radius."""
    t = rng.uniform(0, 1, n)
    if abs(r_top - r_bottom) < 1e-12:
        s = t
    else:
        # inverse CDF of density proportional to r_bottom + (r_top - r_bottom) s on [0, 1]
        a = r_top - r_bottom
        s = (np.sqrt(r_bottom**2 + t * (r_top**2 - r_bottom**2)) - r_bottom) / a
    radius = r_bottom + (r_top - r_bottom) * s
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z0 + s * (z1 - z0)])


_PRIMITIVES = {
    "sphere": _sphere,
    "cube": lambda n, rng: _box(n, rng, (1.0, 1.0, 1.0)),
    "cylinder": _cylinder,
    "torus": _torus,
}


def gen_shape(
    kind: str,
    n_points: int,
    noise_sigma: float,
    rng: np.random.Generator,
    rotate: bool = True,
) -> PointCloud:
    """Uniform surface sample of a primitive, jittered, spun about z, normalised."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown shape kind {kind!r}")
    if n_points < 32:
        raise ContractError(f"need at least 32 points, got {n_points}")
    half = _PRIMITIVES[kind]((n_points + 1) // 2, rng)
    pts = np.concatenate([half, -half])[:n_points]
    if rotate:
        pts = rotate_z(pts, rng.uniform(0, 2 * np.pi))
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(normalize(pts), cloud_label=SHAPE_KINDS.index(kind))


# ---------------------------------------------------------------------------
# part-labelled shapes


@dataclass
class Part:
    label: int
    area: float
    sample: object  # (n, rng) -> (n, 3)


def _allocate(n: int, areas: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``n`` points in proportion to ``areas``."""
    exact = n * areas / areas.sum()
    counts = np.floor(exact).astype(int)
    rest = n - counts.sum()
    counts[np.argsort(-(exact - counts), kind="stable")[:rest]] += 1
    return counts


def part_layout(kind: str, rng: np.random.Generator) -> tuple[dict, list[Part]]:
    """Random dimensions for one instance and its labelled parts."""
    if kind == "mug":
        dims = {
            "radius": rng.uniform(0.4, 0.5),
            "height": rng.uniform(0.9, 1.1),
            "handle_major": rng.uniform(0.2, 0.3),
            "handle_minor": rng.uniform(0.04, 0.06),
        }
        rb, h, hr, hm = dims["radius"], dims["height"], dims["handle_major"], dims["handle_minor"]

        def body(n, g):
            side, cap = 2 * np.pi * rb * h, np.pi * rb**2
            k = _allocate(n, np.array([side, cap]))
            return np.concatenate([_cylinder_side(k[0], g, rb, 0.0, h), _disk(k[1], g, rb, 0.0)])

        def handle(n, g):
            u, v = _torus_angles(n, g, hr, hm, (-np.pi / 2, np.pi / 2))
            ring = hr + hm * np.cos(v)
            return np.column_stack([rb + ring * np.cos(u), hm * np.sin(v), h / 2 + ring * np.sin(u)])

        parts = [
            Part(0, 2 * np.pi * rb * h + np.pi * rb**2, body),
            Part(1, 2 * np.pi**2 * hr * hm, handle),
        ]
    elif kind == "lamp":
        dims = {
            "base_radius": rng.uniform(0.3, 0.4),
            "base_height": rng.uniform(0.05, 0.08),
            "pole_radius": 0.03,
            "height": rng.uniform(0.8, 1.0),
            "shade_bottom": rng.uniform(0.3, 0.4),
            "shade_top": rng.uniform(0.1, 0.15),
            "shade_height": rng.uniform(0.25, 0.35),
        }
        br, bh, pr = dims["base_radius"], dims["base_height"], dims["pole_radius"]
        H, s1, s2, sh = dims["height"], dims["shade_bottom"], dims["shade_top"], dims["shade_height"]

        def base(n, g):
            k = _allocate(n, np.array([np.pi * br**2, 2 * np.pi * br * bh]))
            return np.concatenate([_disk(k[0], g, br, bh), _cylinder_side(k[1], g, br, 0.0, bh)])

        parts = [
            Part(2, np.pi * br**2 + 2 * np.pi * br * bh, base),
            Part(3, 2 * np.pi * pr * (H - bh), lambda n, g: _cylinder_side(n, g, pr, bh, H)),
            Part(
                4,
                np.pi * (s1 + s2) * math.hypot(s1 - s2, sh),
                lambda n, g: _frustum_side(n, g, s1, s2, H - sh / 2, H + sh / 2),
            ),
        ]
    elif kind == "table":
        dims = {
            "width": rng.uniform(0.9, 1.1),
            "depth": rng.uniform(0.5, 0.7),
            "thickness": 0.05,
            "leg_width": 0.06,
            "leg_height": rng.uniform(0.6, 0.8),
        }
        w, d, t, lw, lh = (dims[k] for k in ("width", "depth", "thickness", "leg_width", "leg_height"))

        def top(n, g):
            return _box(n, g, (w / 2, d / 2, t / 2)) + np.array([0.0, 0.0, lh + t / 2])

        def legs(n, g):
            corners = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]]) * [w / 2 - lw, d / 2 - lw]
            which = g.integers(0, 4, n)
            side = g.integers(0, 4, n)
            a = g.uniform(-lw / 2, lw / 2, n)
            z = g.uniform(0.0, lh, n)
            off = np.where(side % 2 == 0, lw / 2, -lw / 2)
            x = np.where(side < 2, off, a)
            y = np.where(side < 2, a, off)
            return np.column_stack([corners[which, 0] + x, corners[which, 1] + y, z])

        parts = [
            Part(5, 2 * (w * d + w * t + d * t), top),
            Part(6, 4 * 4 * lw * lh, legs),
        ]
    else:
        raise ContractError(f"unknown part shape kind {kind!r}")
    return dims, parts


def gen_part_shape(
    kind: str,
    n_points: int,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
    rotate: bool = True,
) -> PointCloud:
    """Composite object with exact per-point part labels.

    Each part receives points in proportion to its surface area.
    """
    if n_points < 32:
        raise ContractError(f"need at least 32 points, got {n_points}")
    _, parts = part_layout(kind, rng)
    counts = _allocate(n_points, np.array([p.area for p in parts]))
    pts = np.concatenate([p.sample(c, rng) for p, c in zip(parts, counts)])
    labels = np.concatenate([np.full(c, p.label) for p, c in zip(parts, counts)])
    perm = rng.permutation(n_points)
    pts, labels = pts[perm], labels[perm]
    if rotate:
        pts = rotate_z(pts, rng.uniform(0, 2 * np.pi))
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(normalize(pts), point_labels=labels, cloud_label=PART_KINDS.index(kind))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    samples: list[PointCloud]
    class_names: list[str]
    task: str = "classification"
    split: str = "train"
    part_map: dict[str, tuple[int, ...]] | None = None
    paths: list[str] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> PointCloud:
        return self.samples[i]

    def validate(self) -> None:
        for i, pc in enumerate(self.samples):
            if self.task == "segmentation":
                allowed = self.part_map[self.class_names[pc.cloud_label]]
                bad = np.setdiff1d(pc.point_labels, allowed)
                if bad.size:
                    raise DataError(f"sample {i}: labels {bad.tolist()} outside part set {allowed}")


def sample_seed(seed: int, split: str, cls: int, index: int) -> list[int]:
    """Entropy words for one sample; distinct splits never share a stream."""
    return [int(seed), 0, 0 if split == "train" else 1, int(cls), int(index)]


def make_dataset(
    task: str,
    per_class_train: int,
    per_class_test: int,
    seed: int,
    n_points: int | None = None,
    noise_sigma: float | None = None,
    kinds: tuple[str, ...] | None = None,
) -> tuple[Dataset, Dataset]:
    """Class-balanced train/test sets from disjoint random streams."""
    if task == "classification":
        kinds = kinds or SHAPE_KINDS
        n_points = n_points or 256
        noise_sigma = 0.02 if noise_sigma is None else noise_sigma
        make = lambda k, rng: gen_shape(k, n_points, noise_sigma, rng)
        part_map = None
    elif task == "segmentation":
        kinds = kinds or PART_KINDS
        n_points = n_points or 512
        noise_sigma = 0.0 if noise_sigma is None else noise_sigma
        make = lambda k, rng: gen_part_shape(k, n_points, rng, noise_sigma)
        part_map = {k: CATEGORY_PARTS[k] for k in kinds}
    else:
        raise ContractError(f"unknown task {task!r}")
    out = []
    for split, per_class in (("train", per_class_train), ("test", per_class_test)):
        samples = []
        for c, kind in enumerate(kinds):
            for i in range(per_class):
                pc = make(kind, np.random.default_rng(sample_seed(seed, split, c, i)))
                pc.cloud_label = c
                samples.append(pc)
        out.append(Dataset(samples, list(kinds), task, split, part_map))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# PCLD files

PCLD_MAGIC = b"PCLD"
PCLD_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def save_cloud(path, pc: PointCloud) -> None:
    """Write one cloud. Coordinates and attributes are stored as float32.

    Layout (little-endian): ``PCLD``, u32 version, u64 N, u32 a, u32 flags
    (bit0 point labels, bit1 cloud label), N*3 float32 xyz, N*a float32 attrs,
    [N u16 labels], [u16 cloud label].
    """
    n, a = len(pc), pc.num_attrs
    flags = (1 if pc.point_labels is not None else 0) | (2 if pc.cloud_label is not None else 0)
    chunks = [
        _HEADER.pack(PCLD_MAGIC, PCLD_VERSION, n, a, flags),
        pc.coords.astype("<f4").tobytes(),
        pc.attrs.astype("<f4").tobytes(),
    ]
    if pc.point_labels is not None:
        if pc.point_labels.min(initial=0) < 0 or pc.point_labels.max(initial=0) > 0xFFFF:
            raise ContractError("point labels must fit in u16")
        chunks.append(pc.point_labels.astype("<u2").tobytes())
    if pc.cloud_label is not None:
        chunks.append(struct.pack("<H", pc.cloud_label))
    Path(path).write_bytes(b"".join(chunks))


def load_cloud(path) -> PointCloud:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, n, a, flags = _HEADER.unpack_from(buf, 0)
    if magic != PCLD_MAGIC:
        raise FormatError("bad PCLD magic", 0)
    if version != PCLD_VERSION:
        raise FormatError(f"unsupported PCLD version {version}", 4)
    if n < 1:
        raise FormatError("cloud has no points", 8)
    if flags & ~3:
        raise FormatError(f"unknown flag bits {flags:#x}", 20)
    pos = _HEADER.size

    def take(count, dtype):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated: expected {nbytes} more bytes", pos)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr

    coords = take(n * 3, "<f4").astype(np.float64).reshape(n, 3)
    attrs = take(n * a, "<f4").astype(np.float64).reshape(n, a)
    labels = take(n, "<u2").astype(np.int64) if flags & 1 else None
    cloud_label = int(take(1, "<u2")[0]) if flags & 2 else None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return PointCloud(coords, attrs, labels, cloud_label)


def quantize(pc: PointCloud) -> PointCloud:
    """The cloud exactly as it will read back from a PCLD file."""
    return PointCloud(
        pc.coords.astype(np.float32).astype(np.float64),
        pc.attrs.astype(np.float32).astype(np.float64),
        None if pc.point_labels is None else pc.point_labels.copy(),
        pc.cloud_label,
    )


MANIFEST_VERSION = 1


def save_dataset(root, train: Dataset, test: Dataset) -> Path:
    """Write every sample as PCLD plus ``manifest.json``; returns the manifest path."""
    root = Path(root)
    entries = {}
    for ds in (train, test):
        (root / ds.split).mkdir(parents=True, exist_ok=True)
        rows = []
        for i, pc in enumerate(ds.samples):
            rel = f"{ds.split}/{i:05d}.pcld"
            save_cloud(root / rel, pc)
            rows.append({"path": rel, "label": pc.cloud_label})
        entries[ds.split] = rows
    manifest = {
        "version": MANIFEST_VERSION,
        "task": train.task,
        "class_names": train.class_names,
        "part_labels": None if train.part_map is None else {k: list(v) for k, v in train.part_map.items()},
        "splits": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path, split: str) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    m = json.loads(manifest_path.read_text())
    if m.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {m.get('version')}")
    if split not in m["splits"]:
        raise DataError(f"manifest has no split {split!r}")
    base = manifest_path.parent
    rows = m["splits"][split]
    samples = [load_cloud(base / r["path"]) for r in rows]
    part_map = None
    if m.get("part_labels"):
        part_map = {k: tuple(v) for k, v in m["part_labels"].items()}
    ds = Dataset(samples, list(m["class_names"]), m["task"], split, part_map, [os.fspath(base / r["path"]) for r in rows])
    ds.validate()
    return ds
