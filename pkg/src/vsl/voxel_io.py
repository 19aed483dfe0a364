"""Voxel data ingestion: meshes, occupancy grids, images, dataset manifests.

File formats
------------
VSLV voxel file: magic b"VSLV", one version byte (=1), three uint32
little-endian dims (dx, dy, dz), then ceil(dx*dy*dz/8) payload bytes,
bit-packed in x-fastest order (x varies fastest, then y, then z) with the
most significant bit first.

Dataset manifest: JSON Lines, one object per line with keys
"path", "label", "split" (split in {"train", "test"}).

OFF and binvox files are read per their public format definitions.
"""

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, MeshParseError, ShapeError, VoxelFormatError

VSLV_MAGIC = b"VSLV"
VSLV_VERSION = 1
IMAGE_SIZE = 100
SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# meshes


@dataclass
class TriangleMesh:
    """Triangle soup: vertices (N,3) float64, faces (M,3) int vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshParseError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise MeshParseError("negative face index")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


def parse_off(text) -> TriangleMesh:
    """Parse an OFF mesh from a string or text stream.

    Polygon faces with more than 3 vertices are fan-triangulated. Raises
    MeshParseError naming the offending line on malformed input.
    """
    if hasattr(text, "read"):
        text = text.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")

    lines = text.splitlines()

    def content(line):
        return line.split("#", 1)[0].strip()

    # Significant lines with their 1-based numbers.
    rows = [(i + 1, content(line)) for i, line in enumerate(lines) if content(line)]
    if not rows:
        raise MeshParseError("line 1: empty OFF stream")

    lineno, header = rows[0]
    if not header.startswith("OFF"):
        raise MeshParseError(f"line {lineno}: missing OFF header")
    rest = header[3:].strip()
    cursor = 1
    if rest:
        # ModelNet quirk: counts may share the header line ("OFF490 480 0").
        counts_line, counts_no = rest, lineno
    else:
        if len(rows) < 2:
            raise MeshParseError(f"line {lineno}: truncated stream, missing counts")
        counts_no, counts_line = rows[1]
        cursor = 2

    parts = counts_line.split()
    if len(parts) < 2:
        raise MeshParseError(f"line {counts_no}: malformed count line {counts_line!r}")
    try:
        n_vertices, n_faces = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshParseError(
            f"line {counts_no}: malformed count line {counts_line!r}"
        ) from None
    if n_vertices < 0 or n_faces < 0:
        raise MeshParseError(f"line {counts_no}: negative counts")

    if len(rows) < cursor + n_vertices + n_faces:
        raise MeshParseError(
            f"line {rows[-1][0]}: truncated stream "
            f"(expected {n_vertices} vertices and {n_faces} faces)"
        )

    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    for k in range(n_vertices):
        lineno, line = rows[cursor + k]
        parts = line.split()
        if len(parts) < 3:
            raise MeshParseError(f"line {lineno}: vertex needs 3 coordinates")
        try:
            vertices[k] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            raise MeshParseError(f"line {lineno}: bad vertex coordinate") from None

    triangles = []
    for k in range(n_faces):
        lineno, line = rows[cursor + n_vertices + k]
        parts = line.split()
        try:
            arity = int(parts[0])
            idx = [int(p) for p in parts[1 : 1 + arity]]
        except (ValueError, IndexError):
            raise MeshParseError(f"line {lineno}: malformed face") from None
        if arity < 3 or len(idx) != arity:
            raise MeshParseError(f"line {lineno}: face needs at least 3 indices")
        for i in idx:
            if i < 0 or i >= n_vertices:
                raise MeshParseError(f"line {lineno}: vertex index {i} out of range")
        for j in range(1, arity - 1):  # fan triangulation
            triangles.append((idx[0], idx[j], idx[j + 1]))

    return TriangleMesh(vertices=vertices, faces=np.array(triangles, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# occupancy grids


@dataclass(eq=False)
class VoxelGrid:
    """Binary occupancy grid. occupancy is uint8 (dx,dy,dz), cells in {0,1}."""

    dims: tuple
    occupancy: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ShapeError(f"grid dims must be 3 positive integers, got {self.dims}")
        occ = np.asarray(self.occupancy)
        if occ.shape != self.dims:
            raise ShapeError(f"occupancy shape {occ.shape} != dims {self.dims}")
        if occ.size and not np.isin(occ, (0, 1)).all():
            raise ShapeError("occupancy cells must be 0 or 1")
        self.occupancy = occ.astype(np.uint8)

    @classmethod
    def empty(cls, dims=(30, 30, 30)):
        return cls(dims=tuple(dims), occupancy=np.zeros(dims, dtype=np.uint8))

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array)
        return cls(dims=array.shape, occupancy=(array > 0).astype(np.uint8))

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other):
        return (
            isinstance(other, VoxelGrid)
            and self.dims == other.dims
            and np.array_equal(self.occupancy, other.occupancy)
        )


def _triangle_cell_overlap(v0, v1, v2, cells):
    """Separating-axis triangle vs closed unit-cube test, batched over cells.

    cells: (M,3) integer lower corners. Returns a boolean mask (M,). Touching
    counts as overlap (all separation comparisons are strict).
    """
    centers = cells.astype(np.float64) + 0.5
    t = np.stack([v0 - centers, v1 - centers, v2 - centers], axis=0)  # (3,M,3)
    separated = np.zeros(len(cells), dtype=bool)

    # Box face normals.
    lo = t.min(axis=0)
    hi = t.max(axis=0)
    separated |= (lo > 0.5).any(axis=1) | (hi < -0.5).any(axis=1)

    edges = (v1 - v0, v2 - v1, v0 - v2)

    def axis_test(ax):
        r = 0.5 * np.abs(ax).sum()
        p = t @ ax  # (3,M)
        return (p.min(axis=0) > r) | (p.max(axis=0) < -r)

    # Triangle plane.
    normal = np.cross(edges[0], edges[1])
    separated |= axis_test(normal)

    # Nine edge cross products with the box axes.
    for ex, ey, ez in edges:
        separated |= axis_test(np.array([0.0, ez, -ey]))
        separated |= axis_test(np.array([-ez, 0.0, ex]))
        separated |= axis_test(np.array([ey, -ex, 0.0]))

    return ~separated


def normalize_mesh(mesh: TriangleMesh, dims) -> np.ndarray:
    """Map mesh vertices into grid coordinates.

    Isotropic rescale so the bounding box fits the grid, then center. Axes
    with zero extent are centered on the grid midplane. Raises ShapeError
    for a fully degenerate (point) bounding box.
    """
    dims = np.asarray(dims, dtype=np.float64)
    verts = mesh.vertices
    bmin = verts.min(axis=0)
    bmax = verts.max(axis=0)
    extent = bmax - bmin
    live = extent > 0
    if not live.any():
        raise ShapeError("degenerate mesh: zero-extent bounding box")
    scale = (dims[live] / extent[live]).min()
    offset = (dims - scale * extent) / 2.0
    return (verts - bmin) * scale + offset


def voxelize(mesh: TriangleMesh, dims=(30, 30, 30)) -> VoxelGrid:
    """Rasterize a mesh surface into a solid occupancy grid.

    The mesh is bounding-box normalized into the grid, every cell whose
    closed unit cube intersects a triangle is marked, and enclosed interior
    regions are filled (complement of the 6-connected exterior flood fill).
    """
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ShapeError(f"dims must be positive, got {dims}")
    if mesh.num_faces == 0:
        raise ShapeError("mesh has no faces")

    verts = normalize_mesh(mesh, dims)
    surface = np.zeros(dims, dtype=bool)
    upper = np.array(dims) - 1

    for f in mesh.faces:
        tri = verts[f]
        lo = np.clip(np.floor(tri.min(axis=0)).astype(np.int64) - 1, 0, upper)
        hi = np.clip(np.floor(tri.max(axis=0)).astype(np.int64) + 1, 0, upper)
        xs, ys, zs = (np.arange(lo[a], hi[a] + 1) for a in range(3))
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        hit = _triangle_cell_overlap(tri[0], tri[1], tri[2], grid)
        cells = grid[hit]
        surface[cells[:, 0], cells[:, 1], cells[:, 2]] = True

    solid = ndimage.binary_fill_holes(
        surface, structure=ndimage.generate_binary_structure(3, 1)
    )
    return VoxelGrid(dims=dims, occupancy=solid.astype(np.uint8))


# ---------------------------------------------------------------------------
# VSLV voxel files


def write_voxel(grid: VoxelGrid, sink) -> None:
    """Serialize a grid to a binary stream in VSLV format."""
    dx, dy, dz = grid.dims
    sink.write(VSLV_MAGIC)
    sink.write(struct.pack("<B3I", VSLV_VERSION, dx, dy, dz))
    flat = grid.occupancy.ravel(order="F")  # x fastest, then y, then z
    sink.write(np.packbits(flat, bitorder="big").tobytes())


def read_voxel(source) -> VoxelGrid:
    """Read a VSLV grid from a binary stream."""
    header = source.read(4)
    if header != VSLV_MAGIC:
        raise VoxelFormatError(f"bad magic {header!r}, expected {VSLV_MAGIC!r}")
    meta = source.read(13)
    if len(meta) != 13:
        raise VoxelFormatError("truncated VSLV header")
    version, dx, dy, dz = struct.unpack("<B3I", meta)
    if version != VSLV_VERSION:
        raise VoxelFormatError(f"unsupported VSLV version {version}")
    if min(dx, dy, dz) <= 0:
        raise VoxelFormatError(f"invalid dims ({dx}, {dy}, {dz})")
    n = dx * dy * dz
    n_bytes = (n + 7) // 8
    payload = source.read(n_bytes)
    if len(payload) != n_bytes:
        raise VoxelFormatError(
            f"payload length mismatch: expected {n_bytes} bytes, got {len(payload)}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="big")[:n]
    occ = bits.reshape((dx, dy, dz), order="F")
    return VoxelGrid(dims=(dx, dy, dz), occupancy=occ)


def save_voxel_file(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as fh:
        write_voxel(grid, fh)


def read_binvox(source) -> VoxelGrid:
    """Read a binvox file (run-length encoded, y-fastest then z then x)."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_binvox(fh)
    line = source.readline().strip()
    if not line.startswith(b"#binvox"):
        raise VoxelFormatError("missing #binvox header")
    dims = None
    while True:
        line = source.readline()
        if not line:
            raise VoxelFormatError("binvox header ended before data")
        tokens = line.strip().split()
        if not tokens:
            continue
        if tokens[0] == b"dim":
            dims = tuple(int(t) for t in tokens[1:4])
        elif tokens[0] == b"data":
            break
    if dims is None or len(dims) != 3:
        raise VoxelFormatError("binvox header missing dim line")
    dx, dy, dz = dims
    n = dx * dy * dz
    raw = np.frombuffer(source.read(), dtype=np.uint8)
    if raw.size % 2 != 0:
        raise VoxelFormatError("binvox RLE payload has odd length")
    values = raw[0::2]
    counts = raw[1::2].astype(np.int64)
    if counts.sum() != n:
        raise VoxelFormatError(
            f"binvox RLE total {counts.sum()} does not match {n} cells"
        )
    flat = np.repeat(values, counts)
    # binvox order: y fastest, then z, then x.
    occ = flat.reshape((dx, dz, dy)).transpose(0, 2, 1)
    return VoxelGrid(dims=(dx, dy, dz), occupancy=(occ > 0).astype(np.uint8))


def load_voxel_file(path, dims=(30, 30, 30)) -> VoxelGrid:
    """Load a grid from .vslv, .binvox, or .off (meshes get voxelized)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".vslv":
        with open(path, "rb") as fh:
            return read_voxel(fh)
    if suffix == ".binvox":
        return read_binvox(path)
    if suffix == ".off":
        return voxelize(parse_off(path.read_text()), dims=dims)
    raise DataError(f"unsupported voxel file type: {path}")


# ---------------------------------------------------------------------------
# images


@dataclass
class ImageSample:
    """RGB image normalized to 100x100x3 in [0,1], optionally paired with a grid."""

    pixels: np.ndarray
    paired_voxel: VoxelGrid | None = None
    category: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ShapeError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ShapeError("image values must lie in [0,1]")
        self.pixels = px


def _resize_channels(img: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.empty((height, width, 3), dtype=np.float32)
    for c in range(3):
        channel = Image.fromarray(img[:, :, c], mode="F")
        out[:, :, c] = np.asarray(
            channel.resize((width, height), Image.Resampling.BILINEAR)
        )
    return out


def prepare_image(raw: np.ndarray, bbox=None, category: str = "") -> ImageSample:
    """Crop, rescale longest side to 100, zero-pad to 100x100, normalize.

    bbox is (left, top, right, bottom) in pixels, exclusive on the right and
    bottom; None takes the full frame. Odd padding puts the extra row/column
    at the bottom/right.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    else:
        img = np.clip(raw.astype(np.float32), 0.0, 1.0)

    h, w = img.shape[:2]
    if bbox is None:
        bbox = (0, 0, w, h)
    left, top, right, bottom = (int(v) for v in bbox)
    if not (0 <= left < right <= w and 0 <= top < bottom <= h):
        raise ShapeError(f"bbox {bbox} invalid for {w}x{h} image")
    crop = img[top:bottom, left:right]

    ch, cw = crop.shape[:2]
    longest = max(ch, cw)
    if longest != IMAGE_SIZE:
        new_h = max(1, round(ch * IMAGE_SIZE / longest))
        new_w = max(1, round(cw * IMAGE_SIZE / longest))
        crop = _resize_channels(crop, new_w, new_h)
        ch, cw = new_h, new_w

    pad_top = (IMAGE_SIZE - ch) // 2
    pad_left = (IMAGE_SIZE - cw) // 2
    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    out[pad_top : pad_top + ch, pad_left : pad_left + cw] = crop
    return ImageSample(pixels=np.clip(out, 0.0, 1.0), category=category)


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r} for {e.path}")
            if e.path in seen:
                raise DataError(f"duplicate path in manifest: {e.path}")
            seen.add(e.path)

    @classmethod
    def read_jsonl(cls, path):
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from None
                missing = {"path", "label", "split"} - obj.keys()
                if missing:
                    raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
                entries.append(ManifestEntry(obj["path"], obj["label"], obj["split"]))
        return cls(entries=entries)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps({"path": e.path, "label": e.label, "split": e.split})
                    + "\n"
                )


@dataclass
class Sample:
    path: str
    label: str
    split: str
    voxel: VoxelGrid | None = None
    image: np.ndarray | None = None


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _load_sample(path: Path, entry: ManifestEntry, dims) -> Sample:
    suffix = path.suffix.lower()
    if suffix in _IMAGE_SUFFIXES:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB"))
        image = prepare_image(raw).pixels
        voxel = None
        sidecar = path.with_suffix(".vslv")
        if sidecar.exists():
            with open(sidecar, "rb") as fh:
                voxel = read_voxel(fh)
        return Sample(str(path), entry.label, entry.split, voxel=voxel, image=image)
    voxel = load_voxel_file(path, dims=dims)
    return Sample(str(path), entry.label, entry.split, voxel=voxel)


def load_dataset(manifest: DatasetManifest, split: str, *, root=None,
                 dims=(30, 30, 30), seed=None) -> list:
    """Load all samples of one split, in manifest order (or seeded order).

    Image entries pick up a paired voxel from a same-stem .vslv sidecar when
    present. Loading is sequential and therefore deterministic; pass a seed
    to get a reproducible shuffled order instead of manifest order.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    root = Path(root) if root is not None else None
    picked = [e for e in manifest.entries if e.split == split]
    missing = [
        str((root / e.path) if root else Path(e.path))
        for e in picked
        if not ((root / e.path) if root else Path(e.path)).exists()
    ]
    if missing:
        raise DataError("missing dataset files: " + ", ".join(missing))
    samples = [
        _load_sample((root / e.path) if root else Path(e.path), e, dims) for e in picked
    ]
    if seed is not None:
        order = np.random.default_rng(int(seed)).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples
