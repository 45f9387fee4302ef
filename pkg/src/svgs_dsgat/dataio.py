"""Binary PGM/PPM rasters, line-delimited annotations and a synthetic scene generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .graph import RngStream

ANNOTATION_HEADER = "uwdet/1"
ANNOTATION_FILE = "annotations.uwdet"
URPC_CLASSES = ("sea cucumber", "sea urchin", "scallop", "starfish")
SHAPES = ("disc", "ring", "cross", "bar")

# one tint per class; every tint is far brighter than the 0.2 background
CLASS_COLORS = (
    (0.98, 0.72, 0.50),
    (0.50, 0.98, 0.72),
    (0.72, 0.50, 0.98),
    (0.98, 0.98, 0.45),
)


class FormatError(ValueError):
    """Malformed raster or annotation file."""


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    pixels: np.ndarray  # flat, row-major, channel-interleaved, values in [0, 1]

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        px = np.clip(np.asarray(self.pixels, dtype=np.float64).reshape(-1), 0.0, 1.0)
        if px.size != self.width * self.height * self.channels:
            raise ValueError("pixel count does not match width*height*channels")
        self.pixels = px

    @classmethod
    def from_array(cls, arr: np.ndarray) -> ImageBuffer:
        """From an (H, W) or (H, W, C) float array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, arr.reshape(-1))

    def array(self) -> np.ndarray:
        """(H, W, C) view of the pixels."""
        return self.pixels.reshape(self.height, self.width, self.channels)


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at byte {start}")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> ImageBuffer:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte 0 (expected P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        try:
            values.append(int(tok))
        except ValueError:
            raise FormatError(f"invalid {name} {tok!r} at byte {pos - len(tok)}") from None
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"maxval {maxval} at byte {pos - len(str(maxval))} is not 255")
    if width < 1 or height < 1:
        raise FormatError(f"non-positive dimensions at byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload at byte {pos + len(payload)}: need {need} bytes")
    px = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageBuffer(width, height, channels, px)


def encode_netpbm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    # round half away from zero; values are non-negative so floor(x + 0.5)
    q = np.floor(np.clip(img.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + q.tobytes()


def read_image(path) -> ImageBuffer:
    return decode_netpbm(Path(path).read_bytes())


def write_image(img: ImageBuffer, path) -> None:
    Path(path).write_bytes(encode_netpbm(img))


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass
class BoxRecord:
    x: float
    y: float
    w: float
    h: float
    class_id: int
    track_id: int | None = None

    def to_json(self) -> dict:
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "class": self.class_id}
        if self.track_id is not None:
            d["track"] = self.track_id
        return d


@dataclass
class ImageRecord:
    image_id: str
    file: str
    width: int
    height: int
    boxes: list[BoxRecord] = field(default_factory=list)
    frame: int | None = None


@dataclass
class AnnotationSet:
    classes: tuple[str, ...] = URPC_CLASSES
    records: list[ImageRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def validate(self) -> None:
        for r in self.records:
            for b in r.boxes:
                _check_box(b, r, len(self.classes))


def _check_box(b: BoxRecord, r: ImageRecord, n_classes: int, line: int | None = None) -> None:
    where = f"line {line}: " if line is not None else ""
    if not (b.w > 0 and b.h > 0):
        raise FormatError(f"{where}box in {r.image_id} has non-positive extent")
    if b.x < 0 or b.y < 0 or b.x + b.w > r.width or b.y + b.h > r.height:
        raise FormatError(f"{where}box in {r.image_id} lies outside the {r.width}x{r.height} image")
    if not 0 <= b.class_id < n_classes:
        raise FormatError(f"{where}class {b.class_id} not in the class table")


def write_annotations(ann: AnnotationSet, path) -> None:
    """Header line, a class-table line, then one JSON object per image."""
    lines = [ANNOTATION_HEADER, json.dumps({"classes": list(ann.classes)})]
    for r in ann.records:
        rec = {"image_id": r.image_id, "file": r.file, "width": r.width, "height": r.height}
        if r.frame is not None:
            rec["frame"] = r.frame
        rec["boxes"] = [b.to_json() for b in r.boxes]
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotations(path) -> AnnotationSet:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return AnnotationSet(records=[])
    lines = text.splitlines()
    if lines[0].strip() != ANNOTATION_HEADER:
        raise FormatError(f"line 1: expected header {ANNOTATION_HEADER!r}")
    classes = URPC_CLASSES
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise FormatError(f"line {lineno}: expected a JSON object")
        if "classes" in obj and "image_id" not in obj:
            classes = tuple(obj["classes"])
            continue
        try:
            rec = ImageRecord(
                image_id=str(obj["image_id"]),
                file=str(obj["file"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
                frame=obj.get("frame"),
                boxes=[
                    BoxRecord(b["x"], b["y"], b["w"], b["h"], int(b["class"]), b.get("track"))
                    for b in obj["boxes"]
                ],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: malformed record ({exc})") from None
        for b in rec.boxes:
            _check_box(b, rec, len(classes), lineno)
        records.append(rec)
    return AnnotationSet(classes=classes, records=records)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, x: float, y: float, w: float, h: float, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of one shape whose bounding box is (x, y, w, h).

    Pixel (r, c) is tested at its centre (c + 0.5, r + 0.5).
    """
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    cx, cy = x + w / 2, y + h / 2
    inside = (xx >= x) & (xx < x + w) & (yy >= y) & (yy < y + h)
    if shape == "disc":
        return inside & (((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0)
    if shape == "ring":
        rr = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2
        return inside & (rr <= 1.0) & (rr >= 0.3)
    if shape == "cross":
        return inside & ((np.abs(xx - cx) <= w / 6) | (np.abs(yy - cy) <= h / 6))
    if shape == "bar":
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def _shape_extent(shape: str, size: int) -> tuple[int, int]:
    if shape == "bar":
        return size, max(size // 2, 8)
    return size, size


def _separated(a, b, gap: float) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax + aw + gap <= bx or bx + bw + gap <= ax or ay + ah + gap <= by or by + bh + gap <= ay


def render_scene(objects, size: int, noise_seed: int, channels: int = 3,
                 noise_sigma: float = 0.05, background: float = 0.2, blur_sigma: float = 0.8) -> ImageBuffer:
    """Draw ``objects`` = [(shape, class_id, (x, y, w, h))] on a noisy background."""
    rng = np.random.Generator(np.random.PCG64(noise_seed))
    img = np.full((size, size, channels), background)
    for shape, cls, (x, y, w, h) in objects:
        mask = _shape_mask(shape, x, y, w, h, size, size)
        color = np.asarray(CLASS_COLORS[cls % len(CLASS_COLORS)])
        if channels == 1:
            color = color.mean(keepdims=True)
        img[mask] = color
    for c in range(channels):
        img[:, :, c] = gaussian_filter(img[:, :, c], blur_sigma, mode="nearest")
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return ImageBuffer.from_array(np.clip(img, 0.0, 1.0))


def _place(rng: RngStream, count: int, size: int, size_range, n_classes: int, gap: int):
    placed = []
    for _ in range(count):
        for _attempt in range(200):
            cls = rng.randbelow(n_classes)
            shape = SHAPES[cls % len(SHAPES)]
            w, h = _shape_extent(shape, rng.randint(*size_range))
            w, h = min(w, size), min(h, size)  # small canvases clip the object to the frame
            x = rng.randint(0, size - w)
            y = rng.randint(0, size - h)
            box = (float(x), float(y), float(w), float(h))
            if all(_separated(box, p[2], gap) for p in placed):
                placed.append((shape, cls, box))
                break
    return placed


def synth_generate(out_dir, seed: int = 42, n_images: int = 250, size: int = 64,
                   n_objects_range=(1, 3), classes=URPC_CLASSES, patch_size: int = 8,
                   object_size=(20, 28), channels: int = 3) -> AnnotationSet:
    """Write ``n_images`` still scenes plus ``annotations.uwdet`` into ``out_dir``."""
    _check_size(size, patch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed)
    ann = AnnotationSet(classes=tuple(classes))
    lo, hi = n_objects_range
    for i in range(n_images):
        rng = root.substream(1, i)
        count = rng.randint(lo, hi)
        objects = _place(rng, count, size, object_size, len(classes), gap=patch_size)
        img = render_scene(objects, size, rng.next_u64(), channels=channels)
        name = f"img_{i:05d}.{'ppm' if channels == 3 else 'pgm'}"
        write_image(img, out / name)
        boxes = [BoxRecord(*box, class_id=cls) for _, cls, box in objects]
        ann.records.append(ImageRecord(f"img_{i:05d}", name, size, size, boxes))
    write_annotations(ann, out / ANNOTATION_FILE)
    return ann


def synth_motion(out_dir, seed: int = 42, n_frames: int = 30, n_tracks: int = 3, size: int = 96,
                 classes=URPC_CLASSES, patch_size: int = 8, object_size=(20, 28),
                 max_speed: float = 1.0, channels: int = 3) -> AnnotationSet:
    """Write a frame sequence of objects moving with constant per-track velocity.

    Start positions and velocities are redrawn until every pair of tracks keeps
    a ``patch_size`` gap and stays inside the image for all frames.
    """
    _check_size(size, patch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(seed).substream(2)
    for _attempt in range(10_000):
        tracks = []
        for t in range(n_tracks):
            cls = t % len(classes)
            shape = SHAPES[cls % len(SHAPES)]
            w, h = _shape_extent(shape, rng.randint(*object_size))
            vx = rng.uniform(-max_speed, max_speed)
            vy = rng.uniform(-max_speed, max_speed)
            x0 = rng.uniform(0, size - w)
            y0 = rng.uniform(0, size - h)
            tracks.append((shape, cls, w, h, x0, y0, vx, vy))
        if _trajectories_ok(tracks, n_frames, size, patch_size):
            break
    else:
        raise ValueError("could not place non-colliding tracks; enlarge the image")
    ann = AnnotationSet(classes=tuple(classes))
    for f in range(n_frames):
        objects = []
        boxes = []
        for tid, (shape, cls, w, h, x0, y0, vx, vy) in enumerate(tracks):
            box = (x0 + vx * f, y0 + vy * f, float(w), float(h))
            objects.append((shape, cls, box))
            boxes.append(BoxRecord(*box, class_id=cls, track_id=tid))
        img = render_scene(objects, size, rng.substream(3, f).next_u64(), channels=channels)
        name = f"frame_{f:05d}.{'ppm' if channels == 3 else 'pgm'}"
        write_image(img, out / name)
        ann.records.append(ImageRecord(f"frame_{f:05d}", name, size, size, boxes, frame=f))
    write_annotations(ann, out / ANNOTATION_FILE)
    return ann


def _trajectories_ok(tracks, n_frames: int, size: int, gap: int) -> bool:
    for f in range(n_frames):
        boxes = [(x0 + vx * f, y0 + vy * f, w, h) for _, _, w, h, x0, y0, vx, vy in tracks]
        for (x, y, w, h) in boxes:
            if x < 0 or y < 0 or x + w > size or y + h > size:
                return False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if not _separated(boxes[i], boxes[j], gap):
                    return False
    return True


def _check_size(size: int, patch_size: int) -> None:
    if size <= 0 or size % patch_size:
        raise ValueError(f"image size {size} must be a positive multiple of the patch size {patch_size}")


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def node_labels(record: ImageRecord, patch_size: int, n_classes: int) -> np.ndarray:
    """Per-patch class indicators: a patch is positive for a class when its
    centre falls inside a box of that class."""
    rows, cols = record.height // patch_size, record.width // patch_size
    cy = (np.arange(rows) + 0.5) * patch_size
    cx = (np.arange(cols) + 0.5) * patch_size
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    lab = np.zeros((rows * cols, n_classes))
    for b in record.boxes:
        inside = (xx >= b.x) & (xx < b.x + b.w) & (yy >= b.y) & (yy < b.y + b.h)
        lab[inside.reshape(-1), b.class_id] = 1.0
    return lab


def load_dataset(data_dir, patch_size: int = 8, start: int = 0, stop: int | None = None):
    """Annotated grid graphs for records ``start:stop`` of a dataset directory.

    Returns (annotation set restricted to the slice, list of graphs).
    """
    from .graph import from_image_grid

    data_dir = Path(data_dir)
    ann = read_annotations(data_dir / ANNOTATION_FILE)
    recs = ann.records[start:stop]
    graphs = []
    for r in recs:
        img = read_image(data_dir / r.file)
        graphs.append(from_image_grid(img, patch_size, node_labels(r, patch_size, len(ann.classes)), r.image_id))
    return AnnotationSet(classes=ann.classes, records=recs), graphs
