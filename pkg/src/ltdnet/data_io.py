"""Synthetic shapes dataset, on-disk formats, and checkpoint persistence.

Images are binary PPM (P6), masks binary PGM (P5) whose pixel value is the
class id, boxes live in annotations.txt, dataset metadata in meta.txt.
Rasterization is integer-only and the PRNG is a SplitMix64 generator, so a
given seed produces byte-identical datasets on any platform.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"IVNT0001"

SHAPE_KINDS = ("rectangle", "ellipse", "triangle", "cross")


class ParseError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class SplitMix64:
    """Deterministic 64-bit PRNG (SplitMix constants of Steele et al.)."""

    GAMMA = 0x9E3779B97F4B07B5
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * self.MIX1) & self.MASK
        z = ((z ^ (z >> 27)) * self.MIX2) & self.MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"below: n must be positive, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)


@dataclass
class GroundTruthSample:
    image: np.ndarray    # (3, S, S) float64 in [0, 1]
    boxes: list          # [(class_id, (xmin, ymin, xmax, ymax))], normalized
    mask: np.ndarray     # (S, S) integer class ids, 0 = background


@dataclass
class Checkpoint:
    params: dict         # name -> float64 ndarray
    step: int = 0
    config: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shape rasterization (integer arithmetic only)

def _raster_rectangle(size, x0, y0, w, h):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def _raster_ellipse(size, x0, y0, w, h):
    ys, xs = np.mgrid[0:size, 0:size]
    # doubled coordinates keep centers integral
    cx2 = 2 * x0 + w - 1
    cy2 = 2 * y0 + h - 1
    rx = max(w - 1, 1)
    ry = max(h - 1, 1)
    dx = 2 * xs - cx2
    dy = 2 * ys - cy2
    return (dx.astype(np.int64) ** 2 * ry ** 2
            + dy.astype(np.int64) ** 2 * rx ** 2) <= rx ** 2 * ry ** 2


def _raster_triangle(size, x0, y0, w, h):
    # apex at top-center, base at the bottom edge
    ax, ay = 2 * x0 + w - 1, 2 * y0
    bx, by = 2 * x0, 2 * (y0 + h - 1)
    cx, cy = 2 * (x0 + w - 1), 2 * (y0 + h - 1)
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = 2 * xs.astype(np.int64), 2 * ys.astype(np.int64)

    def edge(x1, y1, x2, y2):
        return (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)

    e1 = edge(ax, ay, bx, by)
    e2 = edge(bx, by, cx, cy)
    e3 = edge(cx, cy, ax, ay)
    return ((e1 >= 0) & (e2 >= 0) & (e3 >= 0)) | ((e1 <= 0) & (e2 <= 0) & (e3 <= 0))


def _raster_cross(size, x0, y0, w, h):
    m = np.zeros((size, size), dtype=bool)
    bar_w = max(1, w // 3)
    bar_h = max(1, h // 3)
    vx = x0 + (w - bar_w) // 2
    hy = y0 + (h - bar_h) // 2
    m[y0:y0 + h, vx:vx + bar_w] = True
    m[hy:hy + bar_h, x0:x0 + w] = True
    return m


_RASTERIZERS = {
    "rectangle": _raster_rectangle,
    "ellipse": _raster_ellipse,
    "triangle": _raster_triangle,
    "cross": _raster_cross,
}


def _tight_box(raster, size):
    ys, xs = np.nonzero(raster)
    return (xs.min() / size, ys.min() / size,
            (xs.max() + 1) / size, (ys.max() + 1) / size)


def _distinct_color(rng, used):
    for _ in range(20):
        color = tuple(rng.randint(115, 255) for _ in range(3))
        if all(max(abs(a - b) for a, b in zip(color, u)) >= 40 for u in used):
            return color
    return color


def _generate_image(rng: SplitMix64, size: int, num_classes: int,
                    forced_class=None):
    """One sample as (uint8 image HWC, boxes, mask); rejects heavy occlusion."""
    n_kinds = num_classes - 1
    while True:
        n_obj = rng.randint(1, 4)
        lo = max(2, (15 * size) // 100)
        hi = max(lo, (60 * size) // 100)
        objects = []
        used_colors = []
        for k in range(n_obj):
            if k == 0 and forced_class is not None:
                cls = forced_class
            else:
                cls = 1 + rng.below(n_kinds)
            w = rng.randint(lo, hi)
            h = rng.randint(lo, hi)
            x0 = rng.randint(0, size - w)
            y0 = rng.randint(0, size - h)
            color = _distinct_color(rng, used_colors)
            used_colors.append(color)
            raster = _RASTERIZERS[SHAPE_KINDS[cls - 1]](size, x0, y0, w, h)
            objects.append((cls, raster, color))
        if any(not raster.any() for _, raster, _ in objects):
            continue

        mask = np.zeros((size, size), dtype=np.uint8)
        owner = np.full((size, size), -1, dtype=np.int64)
        for idx, (cls, raster, _) in enumerate(objects):
            mask[raster] = cls
            owner[raster] = idx
        # every object must stay mostly visible after occlusion (>= 85%):
        # boxes cover the full extent, so heavily hidden objects would make
        # both tasks unlearnable rather than merely hard
        ok = all((owner == idx).sum() * 20 >= 17 * (raster.sum())
                 for idx, (_, raster, _) in enumerate(objects))
        if not ok:
            continue

        img = np.empty((size, size, 3), dtype=np.uint8)
        noise = np.array([rng.below(77) for _ in range(size * size * 3)],
                         dtype=np.uint8)
        img[:] = noise.reshape(size, size, 3)
        for idx, (cls, raster, color) in enumerate(objects):
            visible = owner == idx
            img[visible] = color
        boxes = [(cls, _tight_box(raster, size))
                 for cls, raster, _ in objects]
        return img, boxes, mask


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _ppm_bytes(img_hwc_uint8):
    h, w, _ = img_hwc_uint8.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img_hwc_uint8.tobytes()


def _pgm_bytes(mask_uint8):
    h, w = mask_uint8.shape
    return b"P5\n%d %d\n255\n" % (w, h) + mask_uint8.tobytes()


def generate_shapes_dataset(n: int, size: int, num_classes: int, seed: int,
                            out_dir) -> None:
    """Write a deterministic shapes dataset to out_dir.

    1-4 flat-colored shapes per image on a noise background; later objects
    occlude earlier ones in the mask while boxes keep the full extent. Each
    foreground class is guaranteed at least max(1, n // 20) appearances.
    """
    if num_classes < 2 or num_classes - 1 > len(SHAPE_KINDS):
        raise ValueError(
            f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}], got {num_classes}")
    rng = SplitMix64(seed)
    samples = [_generate_image(rng, size, num_classes) for _ in range(n)]

    # rejection resampling: regenerate trailing images until every class
    # reaches the minimum count
    min_count = max(1, n // 20)
    for _ in range(8 * num_classes):
        counts = {c: 0 for c in range(1, num_classes)}
        for _, boxes, _ in samples:
            for cls, _ in boxes:
                counts[cls] += 1
        deficient = [c for c, k in counts.items() if k < min_count]
        if not deficient:
            break
        replace_at = n - 1
        for c in deficient:
            for _ in range(min_count - counts[c]):
                samples[replace_at] = _generate_image(rng, size, num_classes,
                                                      forced_class=c)
                replace_at -= 1

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    ann_lines = []
    for i, (img, boxes, mask) in enumerate(samples):
        _atomic_write(os.path.join(out_dir, "images", f"{i:06d}.ppm"),
                      _ppm_bytes(img))
        _atomic_write(os.path.join(out_dir, "masks", f"{i:06d}.pgm"),
                      _pgm_bytes(mask))
        for cls, (x0, y0, x1, y1) in boxes:
            ann_lines.append(
                f"{i:06d} {cls} {x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f}\n")
    _atomic_write(os.path.join(out_dir, "annotations.txt"),
                  "".join(ann_lines).encode())
    meta = (f"size = {size}\nclasses = {num_classes}\nseed = {seed}\n"
            f"count = {n}\n")
    _atomic_write(os.path.join(out_dir, "meta.txt"), meta.encode())


# ---------------------------------------------------------------------------
# loading

def _read_netpbm(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    # magic, width, height, maxval separated by single whitespace runs
    for _ in range(4):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, start, "truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != magic:
        raise ParseError(path, 0, f"bad magic {fields[0]!r}, expected {magic!r}")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise ParseError(path, 3, "non-integer header field") from None
    if maxval != 255:
        raise ParseError(path, 0, f"unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise ParseError(path, pos + len(payload),
                         f"expected {need} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)), w, h


def parse_config_text(text: str) -> dict:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_dataset(directory):
    """Read a generated dataset back as GroundTruthSample objects."""
    meta_path = os.path.join(directory, "meta.txt")
    with open(meta_path, "r") as f:
        meta = parse_config_text(f.read())
    count = int(meta["count"])
    size = int(meta["size"])

    boxes_by_image = {}
    ann_path = os.path.join(directory, "annotations.txt")
    with open(ann_path, "r") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(ann_path, lineno, f"expected 6 fields: {line!r}")
            img_id = int(parts[0])
            cls = int(parts[1])
            box = tuple(float(v) for v in parts[2:])
            boxes_by_image.setdefault(img_id, []).append((cls, box))

    samples = []
    for i in range(count):
        img, w, h = _read_netpbm(os.path.join(directory, "images", f"{i:06d}.ppm"),
                                 b"P6")
        mask, _, _ = _read_netpbm(os.path.join(directory, "masks", f"{i:06d}.pgm"),
                                  b"P5")
        if w != size or h != size:
            raise ParseError(os.path.join(directory, "images", f"{i:06d}.ppm"),
                             0, f"image size {w}x{h} != meta size {size}")
        image = img.astype(np.float64).transpose(2, 0, 1) / 255.0
        samples.append(GroundTruthSample(image=image,
                                         boxes=boxes_by_image.get(i, []),
                                         mask=mask.astype(np.int64)))
    return samples, meta


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary format: magic, step u64, config text, then named tensors."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", ckpt.step)]
    cfg_text = "".join(f"{k} = {v}\n" for k, v in sorted(ckpt.config.items()))
    cfg_bytes = cfg_text.encode()
    parts.append(struct.pack("<I", len(cfg_bytes)))
    parts.append(cfg_bytes)
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f8", order="C")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(path, pos, f"truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise ParseError(path, 0, "bad checkpoint magic")
    step = struct.unpack("<Q", take(8, "step"))[0]
    cfg_len = struct.unpack("<I", take(4, "config length"))[0]
    config = parse_config_text(take(cfg_len, "config").decode())
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    params = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "name").decode()
        rank = struct.unpack("<I", take(4, "rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(8 * size, f"tensor {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return Checkpoint(params=params, step=step, config=config)
