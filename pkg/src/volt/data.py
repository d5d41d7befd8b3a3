"""Synthetic multi-view dataset.

Parametric voxel shapes are rendered as orthographic silhouettes from evenly
spaced azimuths around the vertical (z) axis and embedded by a frozen random
linear map, which stands in for a pretrained view-shared image encoder.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng

SHAPE_KINDS = ("box", "sphere", "ell", "cross", "stack")
MANIFEST = "manifest.txt"


class DataError(ValueError):
    """Malformed, inconsistent or incompatible dataset content."""


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@dataclass
class ShapeSpec:
    kind: str
    params: dict
    pose: int = 0  # quarter turns about the vertical axis


def _fill_box(grid: np.ndarray, lo, hi):
    g = grid.shape[0]
    lo, hi = np.asarray(lo, dtype=int), np.asarray(hi, dtype=int)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate box {tuple(lo)}..{tuple(hi)}")
    if np.any(lo < 0) or np.any(hi > g):
        raise ValueError(f"box {tuple(lo)}..{tuple(hi)} exceeds grid of size {g}")
    grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1


def generate_shape(spec: ShapeSpec, g: int) -> np.ndarray:
    """Binary ``(g, g, g)`` uint8 grid for ``spec``.

    Boxes are half-open index ranges ``lo <= i < hi``; sphere centers are in
    index units, so a sphere at ``(g/2,) * 3`` is centered on a voxel.
    """
    grid = np.zeros((g, g, g), dtype=np.uint8)
    p = spec.params
    if spec.kind == "box":
        _fill_box(grid, p["lo"], p["hi"])
    elif spec.kind == "sphere":
        # center in voxel-index units: voxel (i, j, k) has its center at (i, j, k)
        c, r = np.asarray(p["center"], dtype=float), float(p["radius"])
        if r <= 0 or np.any(c - r < -0.5) or np.any(c + r > g - 0.5):
            raise ValueError(f"sphere at {tuple(c)} radius {r} exceeds grid of size {g}")
        idx = np.indices((g, g, g)).transpose(1, 2, 3, 0)
        grid[((idx - c) ** 2).sum(-1) <= r * r] = 1
    elif spec.kind == "ell":
        lo, hi, t = np.asarray(p["lo"]), np.asarray(p["hi"]), int(p["thickness"])
        _fill_box(grid, lo, (hi[0], lo[1] + t, hi[2]))  # post
        _fill_box(grid, lo, (hi[0], hi[1], lo[2] + t))  # foot
    elif spec.kind == "cross":
        c, a, b = np.asarray(p["center"], dtype=int), int(p["half"]), int(p["thick"])
        for axis in range(3):
            lo, hi = c - b, c + b
            lo[axis], hi[axis] = c[axis] - a, c[axis] + a
            _fill_box(grid, lo, hi)
    elif spec.kind == "stack":
        _fill_box(grid, p["base_lo"], p["base_hi"])
        _fill_box(grid, p["top_lo"], p["top_hi"])
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    if spec.pose % 4:
        grid = np.ascontiguousarray(np.rot90(grid, k=spec.pose % 4, axes=(0, 1)))
    if not grid.any():
        raise ValueError("shape is empty")
    return grid


def random_shape_spec(rng: np.random.Generator, g: int) -> ShapeSpec:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    pose = int(rng.integers(4))
    q = max(g // 4, 1)

    def corner_box(min_size):
        size = rng.integers(min_size, g - 1, size=3, endpoint=True)
        lo = np.array([rng.integers(0, g - s + 1) for s in size])
        return lo, lo + size

    if kind == "box":
        lo, hi = corner_box(q)
        params = {"lo": lo.tolist(), "hi": hi.tolist()}
    elif kind == "sphere":
        r = float(rng.uniform(q, g / 2 - 0.5))
        c = rng.uniform(r - 0.5, g - 0.5 - r, size=3)
        params = {"center": c.tolist(), "radius": r}
    elif kind == "ell":
        lo, hi = corner_box(2 * q)
        t = int(rng.integers(1, max(int((hi - lo).min()) // 2, 1) + 1))
        params = {"lo": lo.tolist(), "hi": hi.tolist(), "thickness": t}
    elif kind == "cross":
        a = int(rng.integers(q, g // 2 + 1))
        b = int(rng.integers(1, max(a // 2, 1) + 1))
        c = rng.integers(a, g - a + 1, size=3)
        params = {"center": c.tolist(), "half": a, "thick": b}
    else:
        wb = int(rng.integers(2 * q, g + 1))
        hb = int(rng.integers(q, g // 2 + 1))
        wt = int(rng.integers(1, wb + 1))
        ht = int(rng.integers(1, g - hb + 1))
        x0, y0 = (int(v) for v in rng.integers(0, g - wb + 1, size=2))
        xt, yt = x0 + int(rng.integers(0, wb - wt + 1)), y0 + int(rng.integers(0, wb - wt + 1))
        params = {
            "base_lo": [x0, y0, 0], "base_hi": [x0 + wb, y0 + wb, hb],
            "top_lo": [xt, yt, hb], "top_hi": [xt + wt, yt + wt, hb + ht],
        }
    return ShapeSpec(kind, params, pose)


# ---------------------------------------------------------------------------
# rendering and embedding
# ---------------------------------------------------------------------------

def render_silhouette(grid, azimuth: float, p: int = 16) -> np.ndarray:
    """Orthographic silhouette seen along +x after turning the object by ``-azimuth``.

    Returns a ``(p, p)`` uint8 image; row index follows z, column index follows y.
    """
    occ = np.argwhere(np.asarray(grid) > 0.5)
    img = np.zeros((p, p), dtype=np.uint8)
    if len(occ) == 0:
        return img
    g = np.asarray(grid).shape[0]
    centers = (occ + 0.5) / g - 0.5
    c, s = np.cos(-azimuth), np.sin(-azimuth)
    y = s * centers[:, 0] + c * centers[:, 1] + 0.5
    z = centers[:, 2] + 0.5
    col = np.floor(y * p).astype(int)
    row = np.floor(z * p).astype(int)
    keep = (col >= 0) & (col < p) & (row >= 0) & (row < p)
    img[row[keep], col[keep]] = 1
    return img


class FrozenEmbedder:
    """Fixed linear map from flattened ``p x p`` silhouettes to ``d`` features."""

    def __init__(self, p: int = 16, d: int = 64, seed: int = 0):
        self.p, self.d, self.seed = p, d, seed
        self.matrix = make_rng(seed, "embedder").normal(0.0, 1.0 / p, size=(p * p, d))
        self.matrix.flags.writeable = False

    @property
    def fingerprint(self) -> str:
        return hashlib.blake2b(self.matrix.tobytes(), digest_size=8).hexdigest()

    def __call__(self, silhouettes) -> np.ndarray:
        s = np.asarray(silhouettes, dtype=np.float64)
        if s.shape[-2:] != (self.p, self.p):
            raise ValueError(f"silhouettes must be {self.p}x{self.p}, got {s.shape}")
        flat = s.reshape(-1, self.p * self.p)
        # BLAS takes a different summation path for a single row; pad so any
        # subset of views embeds bit-identically to the full stack
        out = np.vstack([flat, np.zeros_like(flat[:1])]) @ self.matrix
        return out[:-1].reshape(*s.shape[:-2], self.d)


def embed_views(silhouettes, seed: int = 0, d: int = 64) -> np.ndarray:
    s = np.asarray(silhouettes)
    return FrozenEmbedder(s.shape[-1], d, seed)(s)


# ---------------------------------------------------------------------------
# voxel files
# ---------------------------------------------------------------------------

def write_voxels(path, grid, probabilistic: bool = False) -> None:
    """``VG01`` (uint8 occupancy) or ``VGP1`` (float64 probabilities), x fastest."""
    grid = np.asarray(grid)
    g = grid.shape[0]
    if grid.shape != (g, g, g):
        raise ValueError(f"expected a cubic grid, got {grid.shape}")
    flat = grid.ravel(order="F")
    if probabilistic:
        body = flat.astype("<f8").tobytes()
        magic = b"VGP1"
    else:
        if not np.isin(flat, (0, 1)).all():
            raise ValueError("binary grid must contain only 0 and 1")
        body = flat.astype(np.uint8).tobytes()
        magic = b"VG01"
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", g) + body)


def read_voxels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, g = raw[:4], struct.unpack("<I", raw[4:8])[0]
    if magic == b"VG01":
        dtype, size = np.uint8, 1
    elif magic == b"VGP1":
        dtype, size = np.dtype("<f8"), 8
    else:
        raise DataError(f"{path}: unknown voxel file magic {magic!r}")
    if len(raw) != 8 + size * g**3:
        raise DataError(f"{path}: truncated voxel file")
    return np.frombuffer(raw[8:], dtype=dtype).reshape((g, g, g), order="F").astype(
        np.uint8 if size == 1 else np.float64)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    object_id: int
    kind: str
    grid: np.ndarray
    azimuths: np.ndarray
    silhouettes: np.ndarray
    embeddings: np.ndarray


def is_validation(object_id: int) -> bool:
    """Deterministic 80/20 split on a hash of the object id."""
    h = hashlib.blake2b(str(object_id).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % 5 == 0


def view_subset(m: int, k: int) -> np.ndarray:
    """``k`` of ``m`` evenly spread view indices (always includes view 0)."""
    if not 1 <= k <= m:
        raise ValueError(f"cannot take {k} of {m} views")
    return np.floor(np.arange(k) * m / k).astype(int)


@dataclass
class Dataset:
    samples: list[Sample]
    seed: int
    embed_seed: int
    fingerprint: str
    g: int
    p: int
    d: int
    m_views: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return ((s.embeddings, s.grid) for s in self.samples)

    def views_array(self, k: int | None = None) -> np.ndarray:
        idx = slice(None) if k is None else view_subset(self.m_views, k)
        return np.stack([s.embeddings[idx] for s in self.samples]).astype(np.float64)

    def grids_array(self) -> np.ndarray:
        return np.stack([s.grid for s in self.samples]).astype(np.float64)

    def split(self) -> tuple[list[int], list[int]]:
        val = [s.object_id for s in self.samples if is_validation(s.object_id)]
        train = [s.object_id for s in self.samples if not is_validation(s.object_id)]
        return train, val

    def subset(self, ids) -> "Dataset":
        ids = set(ids)
        return Dataset([s for s in self.samples if s.object_id in ids], self.seed, self.embed_seed,
                       self.fingerprint, self.g, self.p, self.d, self.m_views, dict(self.meta))

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [
            "volt-dataset 1",
            f"seed = {self.seed}",
            f"embed_seed = {self.embed_seed}",
            f"embedder_fingerprint = {self.fingerprint}",
            f"g = {self.g}",
            f"p = {self.p}",
            f"d = {self.d}",
            f"views = {self.m_views}",
            f"objects = {len(self.samples)}",
            "#id\tkind\tviews\tsplit\tvoxels\tembeddings\tsilhouettes\tazimuths",
        ]
        for s in self.samples:
            stem = f"obj_{s.object_id:05d}"
            write_voxels(out / f"{stem}.vg", s.grid)
            np.save(out / f"{stem}_emb.npy", s.embeddings)
            np.save(out / f"{stem}_sil.npy", s.silhouettes)
            np.save(out / f"{stem}_az.npy", s.azimuths)
            split = "val" if is_validation(s.object_id) else "train"
            lines.append("\t".join([str(s.object_id), s.kind, str(len(s.azimuths)), split, f"{stem}.vg",
                                    f"{stem}_emb.npy", f"{stem}_sil.npy", f"{stem}_az.npy"]))
        path = out / MANIFEST
        path.write_text("\n".join(lines) + "\n")
        return path


def build_dataset(n_objects: int, m_views: int = 24, g: int = 16, seed: int = 0, p: int = 16, d: int = 64,
                  embed_seed: int = 0, jitter: bool = False) -> Dataset:
    """Generate ``n_objects`` random shapes with ``m_views`` silhouettes each."""
    if n_objects < 2:
        raise ValueError("need at least two objects")
    if not 1 <= m_views <= 24:
        raise ValueError("m_views must be in [1, 24]")
    embedder = FrozenEmbedder(p, d, embed_seed)
    samples = []
    for obj in range(n_objects):
        rng = make_rng(seed, f"object/{obj}")
        spec = random_shape_spec(rng, g)
        grid = generate_shape(spec, g)
        phase = rng.uniform(0, 2 * np.pi / m_views) if jitter else 0.0
        az = 2 * np.pi * np.arange(m_views) / m_views + phase
        sil = np.stack([render_silhouette(grid, a, p) for a in az])
        samples.append(Sample(obj, spec.kind, grid, az, sil, embedder(sil)))
    return Dataset(samples, seed, embed_seed, embedder.fingerprint, g, p, d, m_views)


def _parse_header(lines: list[str]) -> tuple[dict, list[str]]:
    if not lines or lines[0].strip() != "volt-dataset 1":
        raise DataError("not a dataset manifest")
    header, i = {}, 1
    while i < len(lines) and "=" in lines[i] and not lines[i].startswith("#"):
        key, val = (x.strip() for x in lines[i].split("=", 1))
        header[key] = val
        i += 1
    return header, [ln for ln in lines[i:] if ln and not ln.startswith("#")]


def load_dataset(path, embedder: FrozenEmbedder | None = None) -> Dataset:
    """Load a saved dataset directory (or its manifest) and verify the embedder fingerprint."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    header, records = _parse_header(manifest.read_text().splitlines())
    try:
        g, p, d = int(header["g"]), int(header["p"]), int(header["d"])
        embed_seed, fp = int(header["embed_seed"]), header["embedder_fingerprint"]
        seed, views = int(header["seed"]), int(header["views"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad manifest header: {exc}") from exc
    expected = (embedder or FrozenEmbedder(p, d, embed_seed)).fingerprint
    if fp != expected:
        raise DataError(f"embedder fingerprint {fp} does not match {expected}")
    samples = []
    for rec in records:
        oid, kind, _, _, vox, emb, sil, az = rec.split("\t")
        samples.append(Sample(int(oid), kind, read_voxels(root / vox), np.load(root / az),
                              np.load(root / sil), np.load(root / emb)))
    return Dataset(samples, seed, embed_seed, fp, g, p, d, views)


def merge_datasets(*shards: Dataset) -> Dataset:
    """Concatenate shards; refuses shards produced with different embedders or geometry."""
    first = shards[0]
    for s in shards[1:]:
        if s.fingerprint != first.fingerprint:
            raise DataError("shards were embedded with different frozen embedders")
        if (s.g, s.p, s.d, s.m_views) != (first.g, first.p, first.d, first.m_views):
            raise DataError("shards disagree on grid, image size, width or view count")
    samples = [x for s in shards for x in s.samples]
    if len({x.object_id for x in samples}) != len(samples):
        raise DataError("object ids collide across shards")
    return Dataset(samples, first.seed, first.embed_seed, first.fingerprint, first.g, first.p, first.d,
                   first.m_views)
