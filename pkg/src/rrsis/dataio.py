"""Triplet manifests, a synthetic shapes generator and dataset statistics.

Manifest format: one UTF-8 line per record with tab-separated fields
``id, image, mask, split, category, expression`` and an optional seventh
JSON ``attributes`` field. Lines starting with ``#`` are comments. Image
and mask paths are relative to the manifest's directory. Images are RGB
PNGs, masks single-channel PNGs holding 0/255.
"""

from __future__ import annotations

import json
import logging
import math
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .encoders import CLS_ID, PAD_ID, UNK_ID
from .errors import ManifestError
from .types import Triplet

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

COLORS = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "white": (0.97, 0.97, 0.97),
    "purple": (0.6, 0.2, 0.75),
}
SHAPE_CATEGORY = {"rectangle": "building", "circle": "tank", "triangle": "tent"}

WORDS = (
    list(COLORS)
    + list(SHAPE_CATEGORY)
    + list(SHAPE_CATEGORY.values())
    + "small large top bottom left right center above below of larger smaller than it".split()
    + "one two three only object objects the at in image".split()
)


def normalize_words(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return text.lower().translate(str.maketrans("", "", string.punctuation)).split()


class Vocabulary:
    """Fixed word list; ids 0-2 are reserved for padding, summary and unknown."""

    def __init__(self, words: Sequence[str] = WORDS, size: int = 64):
        words = list(dict.fromkeys(words))
        if len(words) + 3 > size:
            raise ValueError(f"{len(words)} words do not fit a vocabulary of {size}")
        self.size = size
        self.words = ["<pad>", "<cls>", "<unk>"] + words
        self.index = {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.index.get(w, UNK_ID) for w in normalize_words(text))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[i] for i in ids if i not in (PAD_ID, CLS_ID))


# --------------------------------------------------------------------------
# manifest i/o


@dataclass
class ManifestRecord:
    id: str
    image: str
    mask: str
    split: str
    category: str
    expression: str
    attributes: dict = field(default_factory=dict)

    def to_line(self) -> str:
        fields = [self.id, self.image, self.mask, self.split, self.category, self.expression]
        for f in fields:
            if "\t" in f or "\n" in f:
                raise ValueError(f"record {self.id}: fields may not contain tabs or newlines")
        if self.attributes:
            fields.append(json.dumps(self.attributes, sort_keys=True))
        return "\t".join(fields)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (6, 7):
            raise ManifestError(len(records), f"line {lineno + 1} has {len(parts)} fields, expected 6 or 7")
        attrs = json.loads(parts[6]) if len(parts) == 7 else {}
        rec = ManifestRecord(*parts[:6], attributes=attrs)
        if rec.split not in SPLITS:
            raise ManifestError(len(records), f"unknown split {rec.split!r}")
        if rec.id in seen:
            raise ManifestError(len(records), f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["#id\timage\tmask\tsplit\tcategory\texpression"] + [r.to_line() for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    values = set(np.unique(raw).tolist())
    if not values <= {0, 1, 255}:
        warnings.warn(f"{path}: non-binary mask values {sorted(values)[:6]}; binarizing", stacklevel=2)
    return (raw != 0).astype(np.uint8)


def write_image(image: np.ndarray, path: str | Path):
    Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8), "RGB").save(path)


def write_mask(mask: np.ndarray, path: str | Path):
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, "L").save(path)


def load_manifest(path: str | Path, split: str | None = None, vocab: Vocabulary | None = None) -> list[Triplet]:
    """Decode every record (optionally one split) in manifest order."""
    path = Path(path)
    vocab = vocab or Vocabulary()
    root = path.parent
    out = []
    for index, rec in enumerate(read_manifest(path)):
        if split is not None and rec.split != split:
            continue
        try:
            image = read_image(root / rec.image)
            mask = read_mask(root / rec.mask)
        except (OSError, ValueError) as exc:
            raise ManifestError(index, f"cannot load {rec.id!r}: {exc}") from exc
        if mask.shape != image.shape[:2]:
            raise ManifestError(index, f"mask {mask.shape} does not match image {image.shape[:2]}")
        out.append(
            Triplet(
                image=image,
                expression=vocab.encode(rec.expression),
                mask=mask,
                text=rec.expression,
                category=rec.category,
                source_id=rec.id,
                attributes=dict(rec.attributes, split=rec.split),
            )
        )
    return out


def save_dataset(triplets: Sequence[Triplet], directory: str | Path, split: str = "train", name="manifest.tsv") -> Path:
    """Write PNGs for every triplet and a manifest referencing them."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, t in enumerate(triplets):
        rid = t.source_id or f"{split}-{i:05d}"
        write_image(t.image, directory / "images" / f"{rid}.png")
        write_mask(t.mask, directory / "masks" / f"{rid}.png")
        attrs = {k: v for k, v in t.attributes.items() if k != "split"}
        records.append(
            ManifestRecord(rid, f"images/{rid}.png", f"masks/{rid}.png", split, t.category, t.text, attrs)
        )
    return write_manifest(records, directory / name)


# --------------------------------------------------------------------------
# synthetic shapes


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.45, size=(size // 8 + 1, size // 8 + 1, 3))
    coarse[..., 1] += 0.05
    up = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    return np.clip(up + rng.normal(0.0, 0.03, size=(size, size, 3)), 0.0, 1.0)


def _rasterize(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "rectangle":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= 0.7 * r)
    # upward triangle, enlarged so its area matches a circle of radius r
    r = 1.25 * r
    inside = (ys <= cy + r) & (ys >= cy - r)
    half = (ys - (cy - r)) / 2.0
    return inside & (np.abs(xs - cx) <= half)


def _position_words(cx: float, cy: float, size: int) -> str:
    v = "top" if cy < size / 3 else "bottom" if cy > 2 * size / 3 else ""
    h = "left" if cx < size / 3 else "right" if cx > 2 * size / 3 else ""
    return " ".join(w for w in (v, h) if w) or "center"


def _relation(a: dict, b: dict) -> str:
    dx, dy = a["cx"] - b["cx"], a["cy"] - b["cy"]
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def synth_triplet(rng: np.random.Generator, size: int, vocab: Vocabulary, source_id: str = "") -> Triplet:
    count = int(rng.integers(1, 4))
    objects = []
    taken = np.zeros((size, size), dtype=bool)
    combos = [(c, s) for c in COLORS for s in SHAPE_CATEGORY]
    order = rng.permutation(len(combos))
    attempts = 0
    while len(objects) < count and attempts < 200:
        attempts += 1
        color, shape = combos[order[len(objects)]]
        big = bool(rng.integers(0, 2))
        r = size * (rng.uniform(0.22, 0.28) if big else rng.uniform(0.15, 0.18))
        cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
        pix = _rasterize(shape, cx, cy, r, size)
        grown = _rasterize(shape, cx, cy, r + 2, size)
        if (grown & taken).any():
            continue
        taken |= pix
        objects.append(dict(color=color, shape=shape, cx=cx, cy=cy, r=r, pixels=pix, area=int(pix.sum())))
    image = _texture(rng, size)
    for obj in objects:
        image[obj["pixels"]] = np.asarray(COLORS[obj["color"]]) + rng.normal(0, 0.02, size=(obj["area"], 3))
    image = np.clip(image, 0.0, 1.0)
    ref = objects[int(rng.integers(0, len(objects)))]
    others = [o for o in objects if o is not ref]
    size_word = "large" if ref["r"] >= 0.2 * size else "small"
    category = SHAPE_CATEGORY[ref["shape"]]
    parts = [f"{size_word} {ref['color']} {ref['shape']} {category} at {_position_words(ref['cx'], ref['cy'], size)}"]
    attrs = dict(
        category=category,
        color=ref["color"],
        shape=ref["shape"],
        size=size_word,
        position=_position_words(ref["cx"], ref["cy"], size),
        count=len(objects),
    )
    if others:
        other = others[0]
        rel = _relation(ref, other)
        bigger = "larger" if ref["area"] >= other["area"] else "smaller"
        parts.append(f"{rel} the {other['color']} {other['shape']}")
        parts.append(f"{bigger} than it")
        parts.append(f"one of {['one', 'two', 'three'][len(objects) - 1]} objects")
        attrs.update(relative_position=rel, relative_size=bigger)
    else:
        parts.append("the only object in the image")
    text = ", ".join(parts)
    return Triplet(
        image=image,
        expression=vocab.encode(text),
        mask=ref["pixels"].astype(np.uint8),
        text=text,
        category=category,
        source_id=source_id,
        attributes=attrs,
    )


def synth_generate(n: int, image_size: int = 64, seed: int = 0, vocab: Vocabulary | None = None) -> list[Triplet]:
    """``n`` shape scenes, each with one referred object; fully determined by ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(seed)
    return [synth_triplet(rng, image_size, vocab, source_id=f"synth{seed}-{i:05d}") for i in range(n)]


# --------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    count: int
    average_length: float
    word_length_hist: dict[int, int]
    category_counts: dict[str, int]
    size_hist: dict[str, int]
    vocabulary_size: int
    top_words: list[tuple[str, int]]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "average_length": self.average_length,
            "word_length_hist": {str(k): v for k, v in sorted(self.word_length_hist.items())},
            "category_counts": dict(sorted(self.category_counts.items())),
            "size_hist": self.size_hist,
            "vocabulary_size": self.vocabulary_size,
            "top_words": [list(p) for p in self.top_words],
        }


def size_bucket(pixels: int) -> str:
    """Power-of-two bucket label for an object area."""
    if pixels <= 0:
        return "0"
    k = int(math.floor(math.log2(pixels)))
    return f"{2 ** k}-{2 ** (k + 1) - 1}"


def dataset_stats(
    expressions: Sequence[str],
    categories: Sequence[str] | None = None,
    mask_areas: Sequence[int] | None = None,
    top_k: int = 50,
) -> DatasetStats:
    """Expression-length, category, object-size and vocabulary statistics."""
    words = [normalize_words(e) for e in expressions]
    lengths = [len(w) for w in words]
    freq = Counter(w for ws in words for w in ws)
    sizes = Counter(size_bucket(int(a)) for a in mask_areas) if mask_areas is not None else Counter()
    size_hist = dict(sorted(sizes.items(), key=lambda kv: -1 if kv[0] == "0" else int(kv[0].split("-")[0])))
    return DatasetStats(
        count=len(expressions),
        average_length=float(np.mean(lengths)) if lengths else 0.0,
        word_length_hist=dict(Counter(lengths)),
        category_counts=dict(Counter(categories or [])),
        size_hist=size_hist,
        vocabulary_size=len(freq),
        top_words=sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k],
    )


def manifest_stats(path: str | Path, split: str | None = None, top_k: int = 50) -> DatasetStats:
    triplets = load_manifest(path, split=split)
    return dataset_stats(
        [t.text for t in triplets],
        [t.category for t in triplets],
        [int(t.mask.sum()) for t in triplets],
        top_k=top_k,
    )


def plot_stats(stats: DatasetStats, directory: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, hist, xlabel in (
        ("word_length.png", {str(k): v for k, v in sorted(stats.word_length_hist.items())}, "words per expression"),
        ("categories.png", stats.category_counts, "category"),
        ("object_size.png", stats.size_hist, "mask pixels"),
    ):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(list(hist), list(hist.values()), color="#4878a8")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("records")
        ax.tick_params(axis="x", labelrotation=45)
        fig.tight_layout()
        fig.savefig(directory / name, dpi=100)
        plt.close(fig)
        written.append(directory / name)
    return written
