"""Input preprocessing, image files and the synthetic overlapping-cars corpus.

Arrays here are plain float32 numpy arrays in (C, H, W) layout (or
(B, C, H, W) where noted); models wrap them in ``Tensor`` at the boundary.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng, derive

log = logging.getLogger(__name__)

CLASS_NAMES = ["background", "road", "building", "car"]
BACKGROUND, ROAD, BUILDING, CAR = range(4)
COMPLEX_CLASSES = ("car",)

PALETTE = {
    BACKGROUND: (135, 185, 235),
    ROAD: (90, 90, 96),
    BUILDING: (170, 120, 80),
    CAR: (210, 50, 40),
}


class ImageFormatError(ValueError):
    pass


@dataclass
class LabelMap:
    ids: np.ndarray  # (H, W) integer class ids
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    complex_ids: set[int] = field(default_factory=lambda: {CAR})
    # per-object masks, only filled in by generate_scene
    car_masks: list[np.ndarray] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# -- encoding ---------------------------------------------------------------
def one_hot_encode(m: LabelMap | np.ndarray, num_classes: int) -> np.ndarray:
    ids = m.ids if isinstance(m, LabelMap) else np.asarray(m)
    bad = np.argwhere((ids < 0) | (ids >= num_classes))
    if len(bad):
        y, x = bad[0]
        raise ValueError(f"class id {ids[y, x]} at pixel (row={y}, col={x}) is outside [0, {num_classes})"
                         f" ({len(bad)} offending pixels)")
    return (ids[None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.float32)


def decode_one_hot(encoded: np.ndarray) -> np.ndarray:
    return encoded.argmax(axis=0)


def extract_instance_map(m: LabelMap, complex_ids=None) -> np.ndarray:
    """One binary channel per complex class: 1 on that class, black elsewhere."""
    ids = sorted(m.complex_ids if complex_ids is None else complex_ids)
    for c in ids:
        if not 0 <= c < m.num_classes:
            raise ValueError(f"complex class id {c} not in the class table")
    if not ids:
        warnings.warn("no complex classes given; instance map has zero channels", stacklevel=2)
        return np.zeros((0, m.height, m.width), np.float32)
    return np.stack([(m.ids == c) for c in ids]).astype(np.float32)


def encode_input(m: LabelMap, use_instance: bool = True) -> np.ndarray:
    x = one_hot_encode(m, m.num_classes)
    if use_instance:
        x = np.concatenate([x, extract_instance_map(m)], axis=0)
    return x


def input_channels(num_classes: int, num_complex: int, use_instance: bool) -> int:
    return num_classes + (num_complex if use_instance else 0)


def add_noise(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """x + N(0, sigma^2) per element, unclamped."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    z = rng.normal(x.size).reshape(x.shape)
    return (x + sigma * z).astype(x.dtype)


def resize_nearest(x: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the two trailing axes; source index floor(i * n / size)."""
    h, w = x.shape[-2:]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return x[..., rows[:, None], cols[None, :]]


def jitter_crop(inp: np.ndarray, target: np.ndarray, base: int, enlarged: int, rng: Rng | None = None,
                offset: tuple[int, int] | None = None):
    """Resize both to ``enlarged`` then crop the same random ``base`` window."""
    if enlarged < base:
        raise ValueError(f"enlarged size {enlarged} must be >= base size {base}")
    if inp.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"input {inp.shape} and target {target.shape} are not pixel aligned")
    if offset is None:
        span = enlarged - base + 1
        offset = (rng.integers(0, span), rng.integers(0, span)) if span > 1 else (0, 0)
    oy, ox = offset
    if not (0 <= oy <= enlarged - base and 0 <= ox <= enlarged - base):
        raise ValueError(f"offset {offset} outside [0, {enlarged - base}]")
    big_in = resize_nearest(inp, enlarged)
    big_t = resize_nearest(target, enlarged)
    return (np.ascontiguousarray(big_in[..., oy : oy + base, ox : ox + base]),
            np.ascontiguousarray(big_t[..., oy : oy + base, ox : ox + base]))


# -- synthetic scenes -------------------------------------------------------
@dataclass
class SyntheticSceneSpec:
    seed: int
    num_objects: int = 4
    car_fraction: float = 0.65
    overlap_rate: float = 0.5
    size: int = 64


@dataclass
class CarBox:
    top: int
    left: int
    height: int
    width: int


def _rounded_rect_mask(h: int, w: int, box: CarBox, radius: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    t, l = box.top, box.left
    b, r = t + box.height - 1, l + box.width - 1
    inside = (yy >= t) & (yy <= b) & (xx >= l) & (xx <= r)
    if radius > 0:
        cy = np.clip(yy, t + radius, b - radius)
        cx = np.clip(xx, l + radius, r - radius)
        inside &= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    return inside


def _border(mask: np.ndarray) -> np.ndarray:
    pad = np.pad(mask, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return mask & ~interior


def generate_scene(spec: SyntheticSceneSpec):
    """Render (LabelMap, target uint8 image of shape (3, H, W)).

    Objects are buildings (standing on the horizon) and cars (rounded
    rectangles on the road). Each car gets a top-to-bottom shading ramp
    inside its own box, a small tint keyed by its instance index and a 1-px
    darker border; later cars occlude earlier ones. With ``overlap_rate``
    probability a car is placed to overlap the previous car. Zero objects
    give a pure background layout.
    """
    S = spec.size
    rng = Rng(spec.seed)
    ids = np.full((S, S), BACKGROUND, np.int64)
    img = np.empty((S, S, 3), np.float64)
    img[:] = PALETTE[BACKGROUND]
    cars: list[tuple[CarBox, np.ndarray]] = []
    scale = S / 64.0
    if spec.num_objects > 0:
        horizon = int(S * (0.38 + 0.12 * rng.uniform(1)[0]))
        ids[horizon:] = ROAD
        img[horizon:] = PALETTE[ROAD]
        kinds = rng.uniform(spec.num_objects) < spec.car_fraction
        n_cars = int(kinds.sum())
        for _ in range(spec.num_objects - n_cars):
            bw = max(3, int(S * rng.uniform(1, 0.15, 0.35)[0]))
            bh = max(3, int(horizon * rng.uniform(1, 0.35, 0.95)[0]))
            left = rng.integers(0, S - bw + 1)
            ids[horizon - bh : horizon, left : left + bw] = BUILDING
            img[horizon - bh : horizon, left : left + bw] = PALETTE[BUILDING]
        radius = max(1, int(round(2 * scale)))
        prev: CarBox | None = None
        for k in range(n_cars):
            ch = max(4, int(S * rng.uniform(1, 0.12, 0.2)[0]))
            cw = max(6, int(S * rng.uniform(1, 0.2, 0.34)[0]))
            lo_top = max(horizon - ch // 2, 0)
            hi_top = S - ch
            if prev is not None and rng.uniform(1)[0] < spec.overlap_rate:
                dy = rng.integers(-(ch // 2), ch // 2 + 1)
                dx = rng.integers(cw // 4, (3 * cw) // 4 + 1) * (1 if rng.uniform(1)[0] < 0.5 else -1)
                top = int(np.clip(prev.top + dy, lo_top, hi_top))
                left = int(np.clip(prev.left + dx, 0, S - cw))
            else:
                top = rng.integers(lo_top, max(hi_top, lo_top) + 1)
                left = rng.integers(0, S - cw + 1)
            box = CarBox(top, left, ch, cw)
            mask = _rounded_rect_mask(S, S, box, radius)
            ramp = 1.0 - 0.45 * (np.arange(S) - top) / max(ch - 1, 1)
            tint = 1.0 - 0.05 * (k % 3)
            color = np.asarray(PALETTE[CAR], np.float64) * tint
            shade = ramp[:, None, None] * color[None, None, :]
            shade = np.broadcast_to(shade, (S, S, 3)).copy()
            shade[_border(mask)] *= 0.5
            ids[mask] = CAR
            img[mask] = shade[mask]
            cars.append((box, mask))
            prev = box
    target = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8).transpose(2, 0, 1)
    return LabelMap(ids, car_masks=[m for _, m in cars]), target


def scene_spec_for(master_seed: int, index: int, size: int, overlap_rate: float) -> SyntheticSceneSpec:
    seed = derive(master_seed, index)
    r = Rng(derive(seed, 0x0B1EC7))
    return SyntheticSceneSpec(seed=seed, num_objects=r.integers(3, 7), overlap_rate=overlap_rate, size=size)


# -- image files ------------------------------------------------------------
def _read_netpbm(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ImageFormatError(f"expected magic {magic!r} at byte 0, found {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ImageFormatError(f"header ends early at byte {pos}")
        c = data[pos : pos + 1]
        if c in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        else:
            m = re.compile(rb"[0-9]+").match(data, pos)
            if not m:
                raise ImageFormatError(f"malformed header: unexpected byte {c!r} at byte {pos}")
            fields.append(int(m.group()))
            pos = m.end()
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
        raise ImageFormatError(f"malformed header: missing whitespace after maxval at byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval} (header ends at byte {pos})")
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    return w, h, pos


def read_ppm_bytes(path) -> np.ndarray:
    """Raw (3, H, W) uint8 samples of a binary P6 file."""
    data = Path(path).read_bytes()
    w, h, pos = _read_netpbm(data, b"P6")
    need = w * h * 3
    if len(data) - pos < need:
        raise ImageFormatError(f"pixel data truncated: {len(data) - pos} bytes after byte {pos}, need {need}")
    return np.frombuffer(data, np.uint8, need, pos).reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_ppm_bytes(path, pixels: np.ndarray) -> None:
    c, h, w = pixels.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {pixels.shape}")
    body = np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 -> [-1, 1] via 2v/255 - 1."""
    return (pixels.astype(np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)).astype(np.float32)


def to_pixels(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8 with round-half-up."""
    v = np.floor((x.astype(np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    return to_unit(read_ppm_bytes(path))


def write_image(path, x: np.ndarray) -> None:
    write_ppm_bytes(path, to_pixels(x))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _read_netpbm(data, b"P5")
    if len(data) - pos < w * h:
        raise ImageFormatError(f"pixel data truncated: {len(data) - pos} bytes after byte {pos}, need {w * h}")
    return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w).copy()


def write_pgm(path, ids: np.ndarray) -> None:
    if ids.min() < 0 or ids.max() > 255:
        raise ValueError("PGM label ids must lie in [0, 255]")
    h, w = ids.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + ids.astype(np.uint8).tobytes())


def write_class_table(path, names) -> None:
    Path(path).write_text("".join(f"{i}\t{n}\n" for i, n in enumerate(names)), encoding="utf-8")


def read_class_table(path) -> list[str]:
    names: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            i, name = line.split("\t", 1)
            names[int(i)] = name.strip()
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>name', got {line!r}") from None
    if sorted(names) != list(range(len(names))):
        raise ValueError(f"{path}: class ids must be 0..N-1, got {sorted(names)}")
    return [names[i] for i in range(len(names))]


# -- manifests & corpus -----------------------------------------------------
MANIFEST_HEADER = "layout_path\ttarget_path\tseed"


@dataclass
class ManifestEntry:
    layout: Path
    target: Path
    seed: int


def write_manifest(path, rows) -> None:
    lines = [MANIFEST_HEADER] + [f"{l}\t{t}\t{s}" for l, t, s in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or (lineno == 1 and line.strip() == MANIFEST_HEADER):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(root / parts[0], root / parts[1], int(parts[2])))
    return entries


def synthesize_dataset(out_dir, seed: int, count: int, size: int = 64, overlap_rate: float = 0.5,
                       heldout: int = 0) -> dict[str, Path]:
    """Write layouts (PGM), targets (PPM), classes.txt, manifest.tsv and heldout.tsv.

    Scenes ``0..count-1`` go to the training manifest and
    ``count..count+heldout-1`` to the held-out one.
    """
    out = Path(out_dir)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(parents=True, exist_ok=True)
    write_class_table(out / "classes.txt", CLASS_NAMES)
    rows: dict[str, list] = {"manifest.tsv": [], "heldout.tsv": []}
    for i in range(count + heldout):
        spec = scene_spec_for(seed, i, size, overlap_rate)
        lm, target = generate_scene(spec)
        lp, tp = f"layouts/scene_{i:05d}.pgm", f"targets/scene_{i:05d}.ppm"
        write_pgm(out / lp, lm.ids)
        write_ppm_bytes(out / tp, target)
        rows["manifest.tsv" if i < count else "heldout.tsv"].append((lp, tp, spec.seed))
    paths = {}
    for name, r in rows.items():
        if name == "heldout.tsv" and heldout == 0:
            continue
        write_manifest(out / name, r)
        paths[name] = out / name
    return paths


@dataclass
class Corpus:
    inputs: np.ndarray   # (N, C, H, W) float32, clean encoded layouts
    targets: np.ndarray  # (N, 3, H, W) float32 in [-1, 1]
    paths: list[Path]
    class_names: list[str]


def load_corpus(manifest, use_instance: bool = True, complex_classes=COMPLEX_CLASSES,
                class_table=None) -> Corpus:
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    table = Path(class_table) if class_table else manifest.parent / "classes.txt"
    names = read_class_table(table) if table.exists() else list(CLASS_NAMES)
    complex_ids = {names.index(c) for c in complex_classes if c in names}
    ins, tgs = [], []
    for e in entries:
        lm = LabelMap(read_pgm(e.layout).astype(np.int64), names, complex_ids)
        ins.append(encode_input(lm, use_instance))
        tgs.append(read_image(e.target))
    if not entries:
        return Corpus(np.zeros((0, 0, 0, 0), np.float32), np.zeros((0, 3, 0, 0), np.float32), [], names)
    return Corpus(np.stack(ins), np.stack(tgs), [e.target for e in entries], names)
