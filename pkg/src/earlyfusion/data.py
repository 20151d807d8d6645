"""Synthetic grounded-shape datasets and their on-disk format.

Layout written by :func:`synth_dataset`::

    <out>/images/<split>_<index>.pgm
    <out>/masks/<split>_<index>.pgm
    <out>/{train,val,test}.jsonl     # {"image": ..., "mask": ..., "text": ...}

Paths inside a manifest are relative to the manifest's directory (absolute
paths are accepted as well), so the same loader reads real datasets laid out
as image/mask/text triples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError
from .text import SHAPES, SIZES, GroundingPhrase, all_phrases, embed_text, render_phrase

SPLITS = ("train", "val", "test")
NOISE_SIGMA = 0.05
SIZE_RANGES = {"small": (0.10, 0.15), "large": (0.20, 0.30)}
# shape box offset from the cell centre, as a fraction of the free margin
DEFAULT_JITTER = 0.5
_MAX_PLACEMENTS = 100


@dataclass
class Sample:
    image: np.ndarray  # [1, C, H, W] in [0, 1]
    mask: np.ndarray  # [1, 1, H, W] in {0, 1}
    phrase: GroundingPhrase | None
    id: str
    text: str = ""

    def __post_init__(self):
        if not self.text and self.phrase is not None:
            self.text = render_phrase(self.phrase)


# ---------------------------------------------------------------------------
# shape rasterisation


def _signed_distance(kind: str, x: np.ndarray, y: np.ndarray, x0: float, y0: float, side: float) -> np.ndarray:
    """Approximate signed distance (negative inside) to a shape filling the box."""
    cx, cy, half = x0 + side / 2, y0 + side / 2, side / 2
    if kind == "circle":
        return np.hypot(x - cx, y - cy) - half
    if kind == "square":
        return np.maximum(np.abs(x - cx), np.abs(y - cy)) - half
    # apex-up isosceles triangle: base on the bottom edge of the box
    base = y - (y0 + side)
    norm = np.hypot(side, side / 2)
    left = ((x0 + side / 2 - x) * side - (y - y0) * (side / 2)) / norm
    right = ((x - x0 - side / 2) * side - (y - y0) * (side / 2)) / norm
    return np.maximum(base, np.maximum(left, right))


def _place(rng: np.random.Generator, size: int, row: int, col: int, qualifier: str, jitter: float) -> tuple[float, float, float]:
    lo, hi = SIZE_RANGES[qualifier]
    side = rng.uniform(lo, hi) * size
    cell = size / 3
    margin = (cell - side) / 2
    x0 = col * cell + margin + jitter * rng.uniform(-margin, margin)
    y0 = row * cell + margin + jitter * rng.uniform(-margin, margin)
    return x0, y0, side


def _render(kind: str, box, size: int) -> tuple[np.ndarray, np.ndarray]:
    centres = np.arange(size) + 0.5
    xx, yy = np.meshgrid(centres, centres)
    sd = _signed_distance(kind, xx, yy, *box)
    coverage = np.clip(0.5 - sd, 0.0, 1.0)
    return coverage, sd <= 0


def synth_sample(
    rng: np.random.Generator,
    size: int = 64,
    channels: int = 1,
    distractor: bool = True,
    sample_id: str | None = None,
    jitter: float = DEFAULT_JITTER,
) -> Sample:
    """One image with the described shape (in the mask) and optionally a distractor.

    The distractor is a different shape kind in a different grid cell and is
    never part of the mask. ``jitter`` in [0, 1] scales how far a shape box
    may drift from its cell centre (1 = anywhere inside the cell).
    """
    if size % 8:
        raise ValueError(f"image size must be divisible by 8, got {size}")
    if not 0.0 <= jitter <= 1.0:
        raise ValueError(f"jitter must lie in [0, 1], got {jitter}")
    phrases = all_phrases()
    phrase = phrases[rng.integers(len(phrases))]
    # at tiny sizes a small shape can fall between pixel centres; redraw it
    for _ in range(_MAX_PLACEMENTS):
        box = _place(rng, size, phrase.row, phrase.col, phrase.size_qualifier, jitter)
        coverage, inside = _render(phrase.shape_kind, box, size)
        if inside.any():
            break
    else:
        raise ValueError(f"cannot rasterise a {phrase.size_qualifier} shape at {size}x{size}")
    image = rng.uniform(0.6, 1.0) * coverage
    if distractor:
        kind = rng.choice([s for s in SHAPES if s != phrase.shape_kind])
        cells = [c for c in range(9) if c != phrase.row * 3 + phrase.col]
        cell = cells[rng.integers(len(cells))]
        qualifier = SIZES[rng.integers(2)]
        d_box = _place(rng, size, cell // 3, cell % 3, qualifier, jitter)
        d_cov, _ = _render(kind, d_box, size)
        image = np.maximum(image, rng.uniform(0.6, 1.0) * d_cov)
    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, image.shape), 0.0, 1.0)
    if sample_id is None:
        sample_id = f"{int(rng.integers(2**32)):08x}"
    img = np.broadcast_to(image, (1, channels, size, size)).copy()
    return Sample(img, inside[None, None].astype(np.float64), phrase, sample_id)


def cell_indicator(phrase: GroundingPhrase, size: int) -> np.ndarray:
    """Binary map of the grid cell named by ``phrase`` (pixel centres)."""
    c = np.arange(size) + 0.5
    rows = (c >= phrase.row * size / 3) & (c < (phrase.row + 1) * size / 3)
    cols = (c >= phrase.col * size / 3) & (c < (phrase.col + 1) * size / 3)
    return np.outer(rows, cols)


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """(x, y) centroid of foreground pixel centres."""
    ys, xs = np.nonzero(np.asarray(mask).reshape(mask.shape[-2:]))
    return float(xs.mean() + 0.5), float(ys.mean() + 0.5)


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pgm(path, t) -> None:
    """Write ``[1, C, H, W]`` (or ``[H, W]``) values in [0, 1] as binary P5 (C=1) or P6 (C=3)."""
    arr = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise FormatError(f"cannot write tensor of shape {list(arr.shape)} as PGM/PPM")
    _, c, h, w = arr.shape
    payload = np.floor(np.clip(arr[0], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    payload = payload.transpose(1, 2, 0)  # interleave channels
    magic = b"P5" if c == 1 else b"P6"
    try:
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (w, h))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:i])
    return tokens, i + 1  # exactly one whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Read a binary P5/P6 file as float64 ``[1, C, H, W]`` in [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    tokens, offset = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header {tokens!r}") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    c = 1 if magic == b"P5" else 3
    payload = buf[offset:]
    if len(payload) != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float64) / 255.0)[None]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    image_path: Path
    mask_path: Path
    text: str
    id: str


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)
    split: str = "train"
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def load_manifest(path) -> Manifest:
    """Parse and validate a JSONL manifest. Errors carry 1-based line numbers."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    records: list[Record] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise FormatError("record is not an object", lineno)
        for key in ("image", "mask", "text"):
            if key not in obj:
                raise FormatError(f"missing key {key!r}", lineno)
        if not isinstance(obj["text"], str) or not obj["text"].strip():
            raise FormatError("text must be a non-empty string", lineno)
        image, mask = root / obj["image"], root / obj["mask"]
        for p in (image, mask):
            if not p.is_file():
                raise FormatError(f"unresolvable path {str(p)!r}", lineno)
        rec_id = str(obj.get("id", Path(obj["image"]).stem))
        if rec_id in seen:
            raise FormatError(f"duplicate id {rec_id!r}", lineno)
        seen.add(rec_id)
        records.append(Record(image, mask, obj["text"], rec_id))
    split = path.stem if path.stem in SPLITS else "train"
    return Manifest(records, split, path)


@dataclass
class ArrayDataset:
    """A manifest loaded into memory, with text already embedded."""

    images: np.ndarray  # [N, C, H, W]
    masks: np.ndarray  # [N, 1, H, W]
    embeddings: np.ndarray  # [N, 768]
    texts: list[str]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def load_arrays(manifest: Manifest, vocab_seed: int) -> ArrayDataset:
    images, masks, embs = [], [], []
    for rec in manifest:
        images.append(read_pgm(rec.image_path)[0])
        mask = read_pgm(rec.mask_path)[0][:1]
        masks.append((mask > 0.5).astype(np.float64))
        embs.append(embed_text(rec.text, vocab_seed))
    if not images:
        return ArrayDataset(np.zeros((0, 1, 1, 1)), np.zeros((0, 1, 1, 1)), np.zeros((0, 768)), [], [])
    shapes = {im.shape for im in images} | {(images[0].shape[0], *m.shape[1:]) for m in masks}
    if len(shapes) != 1:
        raise FormatError(f"{manifest.path}: inconsistent image/mask shapes {sorted(shapes)}")
    return ArrayDataset(
        np.stack(images), np.stack(masks), np.stack(embs), [r.text for r in manifest], [r.id for r in manifest]
    )


def synth_dataset(
    seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    size: int,
    out_dir,
    distractor: bool = True,
    jitter: float = DEFAULT_JITTER,
) -> tuple[Manifest, Manifest, Manifest]:
    """Generate and write the three splits; sample ``i`` of split ``s`` uses stream ``(seed, s, i)``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    manifests = []
    for split_idx, (split, n) in enumerate(zip(SPLITS, (n_train, n_val, n_test))):
        lines = []
        records = []
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_idx, i]))
            sid = f"{split}_{i:05d}"
            s = synth_sample(rng, size, 1, distractor, sid, jitter)
            img_rel, mask_rel = f"images/{sid}.pgm", f"masks/{sid}.pgm"
            write_pgm(out / img_rel, s.image)
            write_pgm(out / mask_rel, s.mask)
            lines.append(json.dumps({"image": img_rel, "mask": mask_rel, "text": s.text}))
            records.append(Record(out / img_rel, out / mask_rel, s.text, sid))
        manifest_path = out / f"{split}.jsonl"
        try:
            manifest_path.write_text("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise IoError(f"cannot write {manifest_path}: {exc}") from exc
        manifests.append(Manifest(records, split, manifest_path))
    return tuple(manifests)


def dataset_exists(data_dir) -> bool:
    return all(os.path.isfile(Path(data_dir) / f"{s}.jsonl") for s in SPLITS)
