"""Attention dumps: flat little-endian float32 arrays plus a JSON index.

Each ``<name>.f32`` file starts with a header::

    b"RSAD"     4-byte magic
    uint32 LE   format version (1)
    uint32 LE   ndim
    uint32 LE   dims[ndim]

followed by the array in C order. ``index.json`` lists every array with its
file name and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSAD"
VERSION = 1


def write_array(path, array) -> Path:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    return path


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not an attention dump array")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(shape).copy()


def write_dump(directory, arrays: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"format": "float32-le", "version": VERSION, "arrays": []}
    for name, arr in arrays.items():
        fname = f"{name}.f32"
        write_array(directory / fname, arr)
        index["arrays"].append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return directory


def read_dump(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    return {e["name"]: read_array(directory / e["file"]) for e in index["arrays"]}


def attention_arrays(out, index: int = 0) -> dict[str, np.ndarray]:
    """Collect the per-sample maps from a model forward output.

    Stage score matrices ``S1..S4``, stage saliency ``s1..s4``, the deficit
    map ``M``, the selected ``regions`` as (row, col) rows, and the decoder's
    attention: the summary token's cross-attention over visual tokens
    (``dec_cls_attn``), the visual-to-language cross-attention
    (``dec_v2l_attn``) and the deformable sampling weights (``dec_deform_weights``).
    """
    agg, dec = out.aggregation, out.decoder

    def np_(t):
        return t.detach().cpu().double().numpy()

    arrays = {}
    for i, s in enumerate(agg.scores):
        arrays[f"S{i + 1}"] = np_(s[index])
    for i, s in enumerate(agg.saliency):
        arrays[f"s{i + 1}"] = np_(s[index])
    arrays["M"] = np_(agg.deficit[index])
    arrays["regions"] = np.argwhere(np_(agg.regions[index]) > 0).astype(np.float32).reshape(-1, 2)
    att = dec.attention
    if "l2v_cross" in att:
        arrays["dec_cls_attn"] = np_(att["l2v_cross"][index].mean(0)[dec.cls_index])
    if "v2l_cross" in att:
        arrays["dec_v2l_attn"] = np_(att["v2l_cross"][index].mean(0))
    if "deform" in att:
        arrays["dec_deform_weights"] = np_(att["deform"][index])
    return arrays


def heatmaps(arrays: dict[str, np.ndarray], level_sizes) -> dict[str, np.ndarray]:
    """2-D maps suitable for rendering, keyed by output name."""
    maps = {}
    for i, (h, w) in enumerate(level_sizes):
        if f"S{i + 1}" in arrays:
            maps[f"S{i + 1}"] = arrays[f"S{i + 1}"].mean(axis=1).reshape(h, w)
        if f"s{i + 1}" in arrays:
            maps[f"s{i + 1}"] = arrays[f"s{i + 1}"]
    if "M" in arrays:
        maps["M"] = arrays["M"]
    if "dec_cls_attn" in arrays:
        start = 0
        for i, (h, w) in enumerate(level_sizes):
            maps[f"dec_cls_attn_level{i + 1}"] = arrays["dec_cls_attn"][start : start + h * w].reshape(h, w)
            start += h * w
    return maps


def render_heatmaps(arrays, level_sizes, directory, image=None) -> list[Path]:
    """Write one PNG per map; with ``image`` the map is blended over it."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cmap = colormaps["jet"]
    written = []
    for name, m in heatmaps(arrays, level_sizes).items():
        lo, hi = float(m.min()), float(m.max())
        norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        rgb = (cmap(norm)[..., :3] * 255).astype(np.uint8)
        im = Image.fromarray(rgb)
        if image is not None:
            base = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
            im = Image.blend(base, im.resize(base.size, Image.BILINEAR), 0.5)
        else:
            im = im.resize((max(64, m.shape[1] * 8), max(64, m.shape[0] * 8)), Image.NEAREST)
        path = directory / f"{name}.png"
        im.save(path)
        written.append(path)
    return written
