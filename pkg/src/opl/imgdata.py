"""Image/label data model, netpbm file I/O, synthetic scenes, dataset indexing.

Images travel as binary PPM (P6) and label maps as binary PGM (P5) with the
class count recorded in a "# classes=C" header comment, so that every file
round-trips bit-exactly without any compression dependency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .rng import RngStream, derive_seed

IGNORE = 255

# rendering constants for synthetic scenes
_EDGE_BLEND_PX = 0.6
_MIN_COLOR_SEP = 0.6
_SHAPE_MIN_FRAC = 0.14
_SHAPE_MAX_FRAC = 0.30
_OUTLINE_WIDTH_PX = 1.0
_OUTLINE_SHADE = 0.35


@dataclass
class ImageTensor:
    """RGB image, float32 values in [0,1], shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValidationError("image data must have shape (H, W, 3)")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    """Per-pixel class indices 0..C-1 (or IGNORE=255), shape (H, W)."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ValidationError("label data must have shape (H, W)")
        if not 1 <= self.num_classes <= 254:
            raise ValidationError("num_classes must be in 1..254")
        bad = (self.data >= self.num_classes) & (self.data != IGNORE)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValidationError(
                "label value %d at (%d,%d) exceeds num_classes=%d"
                % (self.data[r, c], r, c, self.num_classes)
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class SceneSpec:
    """Parameters of the deterministic synthetic scene generator."""

    height: int
    width: int
    num_classes: int
    shapes_per_scene: tuple[int, int] = (3, 6)
    texture_noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2 (class 0 is background)")
        if self.height < 1 or self.width < 1:
            raise ValidationError("scene dimensions must be positive")
        lo, hi = self.shapes_per_scene
        if lo < 0 or hi < lo:
            raise ValidationError("shapes_per_scene must be a non-empty range")
        if self.texture_noise_sigma < 0:
            raise ValidationError("texture_noise_sigma must be >= 0")


@dataclass
class DatasetIndex:
    """Entries of (image path, label path) plus per-class pixel counts."""

    entries: list[tuple[str, str]]
    num_classes: int
    class_histogram: np.ndarray
    entry_histograms: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# netpbm parsing


def _parse_pnm_header(buf: bytes, path):
    """Return (magic, width, height, maxval, payload offset, comments)."""
    if len(buf) < 2:
        raise FormatError("%s: truncated header at byte 0" % path)
    magic = buf[:2].decode("latin-1")
    if magic not in ("P5", "P6"):
        raise FormatError("%s: unsupported magic %r at byte 0" % (path, magic))
    pos = 2
    fields = []
    comments = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("%s: truncated header at byte %d" % (path, pos))
        ch = buf[pos]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == ord("#"):
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("%s: unterminated comment at byte %d" % (path, pos))
            comments.append(buf[pos + 1 : end].decode("latin-1").strip())
            pos = end + 1
        elif ch in b"0123456789":
            start = pos
            while pos < len(buf) and buf[pos] in b"0123456789":
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise FormatError("%s: unexpected byte %r at byte %d" % (path, bytes([ch]), pos))
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise FormatError("%s: missing whitespace after maxval at byte %d" % (path, pos))
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError("%s: unsupported max value %d at byte %d" % (path, maxval, pos))
    if width < 1 or height < 1:
        raise FormatError("%s: bad dimensions %dx%d" % (path, width, height))
    return magic, width, height, maxval, pos, comments


def _read_pnm(path):
    buf = Path(path).read_bytes()
    magic, width, height, maxval, pos, comments = _parse_pnm_header(buf, path)
    nchan = 3 if magic == "P6" else 1
    need = width * height * nchan
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise FormatError(
            "%s: truncated payload at byte %d (need %d bytes, have %d)"
            % (path, pos, need, len(payload))
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, nchan)
    return magic, data, comments


def load_image(path) -> ImageTensor:
    """Read a P6 (RGB) or P5 (grey, replicated to 3 channels) image."""
    magic, raw, _ = _read_pnm(path)
    if magic == "P5":
        raw = np.repeat(raw, 3, axis=2)
    return ImageTensor(raw.astype(np.float32) / 255.0)


def save_image(img: ImageTensor, path):
    raw = np.round(img.data * 255.0).astype(np.uint8)
    header = b"P6\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + raw.tobytes())


def load_label(path) -> LabelMap:
    magic, raw, comments = _read_pnm(path)
    if magic != "P5":
        raise FormatError("%s: label maps must be P5, got %s" % (path, magic))
    num_classes = None
    for c in comments:
        if c.startswith("classes="):
            num_classes = int(c.split("=", 1)[1])
    if num_classes is None:
        raise FormatError("%s: missing '# classes=C' header comment" % path)
    return LabelMap(raw[:, :, 0], num_classes)


def save_label(lbl: LabelMap, path):
    header = b"P5\n# classes=%d\n%d %d\n255\n" % (lbl.num_classes, lbl.width, lbl.height)
    Path(path).write_bytes(header + lbl.data.tobytes())


# ---------------------------------------------------------------------------
# synthetic scenes


def _shape_sdf(rng: RngStream, H: int, W: int) -> np.ndarray:
    """Signed distance (negative inside) of one random shape on the pixel grid."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    m = min(H, W)
    ry = m * (_SHAPE_MIN_FRAC + rng.uniform() * (_SHAPE_MAX_FRAC - _SHAPE_MIN_FRAC))
    rx = m * (_SHAPE_MIN_FRAC + rng.uniform() * (_SHAPE_MAX_FRAC - _SHAPE_MIN_FRAC))
    cy = ry + rng.uniform() * (H - 2 * ry)
    cx = rx + rng.uniform() * (W - 2 * rx)
    kind = rng.randint(3)
    if kind == 0:  # axis-aligned rectangle
        qy = np.abs(yy - cy) - ry
        qx = np.abs(xx - cx) - rx
        outside = np.hypot(np.maximum(qy, 0.0), np.maximum(qx, 0.0))
        inside = np.minimum(np.maximum(qy, qx), 0.0)
        return outside + inside
    if kind == 1:  # ellipse (normalized radial approximation)
        f = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        return (f - 1.0) * min(rx, ry)
    # convex polygon inscribed in the ellipse: half-plane intersection SDF
    nvert = 5 + rng.randint(3)
    angles = np.sort(np.array([rng.uniform() for _ in range(nvert)]) * 2 * np.pi)
    if np.min(np.diff(angles, append=angles[0] + 2 * np.pi)) < 0.15:
        angles = np.linspace(0.0, 2 * np.pi, nvert, endpoint=False) + angles[0]
    vy = cy + ry * np.sin(angles)
    vx = cx + rx * np.cos(angles)
    d = np.full((H, W), -np.inf)
    for i in range(nvert):
        j = (i + 1) % nvert
        ey, ex = vy[j] - vy[i], vx[j] - vx[i]
        norm = math.hypot(ey, ex)
        # outward normal for vertices ordered by increasing angle
        ny, nx = -ex / norm, ey / norm
        d = np.maximum(d, (yy - vy[i]) * ny + (xx - vx[i]) * nx)
    return d


def _palette(num_classes: int, seed: int) -> np.ndarray:
    """One base color per class, pairwise separated, fixed across a dataset."""
    rng = RngStream(derive_seed(seed, 0xC0102))
    colors = []
    sep = _MIN_COLOR_SEP
    attempts = 0
    while len(colors) < num_classes:
        cand = 0.08 + 0.84 * rng.uniforms(3)
        if all(np.linalg.norm(cand - c) >= sep for c in colors):
            colors.append(cand)
        attempts += 1
        if attempts % 200 == 0:  # many classes: relax separation rather than spin
            sep *= 0.8
    return np.stack(colors)


def generate_scene(spec: SceneSpec, index: int) -> tuple[ImageTensor, LabelMap]:
    """Deterministic labeled scene: colored shapes over a background.

    Later shapes occlude earlier ones.  Labels are crisp.  Each shape is
    rendered in its class's base color with a darkened ~1 px outline ring
    just inside its boundary (still labeled as the shape), a sub-pixel
    anti-alias blend at the boundary, and Gaussian texture noise; the image
    is quantized to the 8-bit grid so file round-trips are exact.
    """
    spec.validate()
    H, W, C = spec.height, spec.width, spec.num_classes
    palette = _palette(C, spec.seed)
    rng = RngStream(derive_seed(spec.seed, index, 0x5CE7E))

    img = np.tile(palette[0], (H, W, 1))
    lbl = np.zeros((H, W), dtype=np.uint8)

    lo, hi = spec.shapes_per_scene
    n_shapes = lo + rng.randint(hi - lo + 1)
    offset = rng.randint(C - 1) if C > 1 else 0
    for i in range(n_shapes):
        cls = 1 + (offset + i) % (C - 1)
        d = _shape_sdf(rng, H, W)
        lbl[d < 0] = cls
        ring = np.clip(-d / _OUTLINE_WIDTH_PX, 0.0, 1.0)
        shade = (_OUTLINE_SHADE + (1.0 - _OUTLINE_SHADE) * ring)[:, :, None]
        color = shade * palette[cls]
        alpha = np.clip(0.5 - d / _EDGE_BLEND_PX, 0.0, 1.0)[:, :, None]
        img = alpha * color + (1.0 - alpha) * img

    if spec.texture_noise_sigma > 0:
        noise = rng.normals(H * W * 3).reshape(H, W, 3)
        img = img + spec.texture_noise_sigma * noise
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return ImageTensor(img.astype(np.float32)), LabelMap(lbl, C)


# ---------------------------------------------------------------------------
# dataset index


def _label_histogram(lbl: LabelMap) -> np.ndarray:
    counts = np.bincount(lbl.data.reshape(-1), minlength=256)[: lbl.num_classes]
    return counts.astype(np.int64)


def build_index(entries: list[tuple[str, str]]) -> DatasetIndex:
    """Scan label files, validate image/label agreement, tally class pixels."""
    if not entries:
        raise ValidationError("dataset index has no entries")
    num_classes = None
    hists = []
    for img_path, lbl_path in entries:
        lbl = load_label(lbl_path)
        img = load_image(img_path)
        if (img.height, img.width) != (lbl.height, lbl.width):
            raise ValidationError(
                "%s and %s disagree on dimensions" % (img_path, lbl_path)
            )
        if num_classes is None:
            num_classes = lbl.num_classes
        elif lbl.num_classes != num_classes:
            raise ValidationError("%s: inconsistent class count" % lbl_path)
        hists.append(_label_histogram(lbl))
    total = np.sum(hists, axis=0)
    return DatasetIndex(list(entries), num_classes, total, hists)


def save_index_csv(index: DatasetIndex, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "label"])
        w.writerows(index.entries)


def load_index_csv(path) -> DatasetIndex:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image", "label"]:
            raise FormatError("%s: expected header 'image,label'" % path)
        base = Path(path).parent
        entries = []
        for row in reader:
            if len(row) != 2:
                raise FormatError("%s: malformed row %r" % (path, row))
            entries.append(
                (str((base / row[0]) if not Path(row[0]).is_absolute() else row[0]),
                 str((base / row[1]) if not Path(row[1]).is_absolute() else row[1]))
            )
    return build_index(entries)


def write_scene_set(spec: SceneSpec, count: int, out_dir, start_index: int = 0,
                    prefix: str = "scene") -> DatasetIndex:
    """Generate `count` scenes to disk and return their index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        img, lbl = generate_scene(spec, start_index + i)
        ip = out / ("%s_%04d.ppm" % (prefix, start_index + i))
        lp = out / ("%s_%04d.pgm" % (prefix, start_index + i))
        save_image(img, ip)
        save_label(lbl, lp)
        entries.append((str(ip), str(lp)))
    return build_index(entries)


def select_subset_class_preserving(index: DatasetIndex, fraction: float,
                                   seed: int) -> DatasetIndex:
    """Greedy subset whose class-frequency vector tracks the full set's.

    Repeatedly adds the entry minimizing the L1 gap between the running
    per-class pixel-frequency vector and the full-set vector; equal gaps are
    broken by the seeded stream.  Returns ceil(fraction * N) entries.
    """
    if not index.entries:
        raise ValidationError("cannot select from an empty index")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must be in (0, 1]")
    n_take = math.ceil(fraction * len(index.entries))
    target = index.class_histogram / max(1, index.class_histogram.sum())
    rng = RngStream(derive_seed(seed, 0x5E1EC7))

    hists = index.entry_histograms
    remaining = list(range(len(index.entries)))
    running = np.zeros_like(target)
    chosen: list[int] = []
    for _ in range(n_take):
        gaps = []
        for i in remaining:
            cand = running + hists[i]
            freq = cand / max(1, cand.sum())
            gaps.append(np.abs(freq - target).sum())
        gaps = np.asarray(gaps)
        best = np.flatnonzero(gaps <= gaps.min() + 1e-12)
        pick = remaining[best[rng.randint(len(best))]]
        chosen.append(pick)
        running = running + hists[pick]
        remaining.remove(pick)

    return DatasetIndex(
        [index.entries[i] for i in chosen],
        index.num_classes,
        np.sum([hists[i] for i in chosen], axis=0),
        [hists[i] for i in chosen],
    )
