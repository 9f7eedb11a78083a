"""Scalar-loop reference implementations.

Everything here works on plain float64 numpy arrays and Python loops and
imports nothing from the model code. Linear layers are ``(W, b)`` pairs with
``W`` shaped ``(out, in)``. These routines are slow by design.
"""

from __future__ import annotations

import math

import numpy as np


def linear(x, wb):
    w, b = wb
    out = np.zeros(w.shape[0])
    for j in range(w.shape[0]):
        acc = 0.0 if b is None else float(b[j])
        for k in range(w.shape[1]):
            acc += w[j, k] * x[k]
        out[j] = acc
    return out


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def layer_norm(v, gamma, beta, eps=1e-5):
    n = len(v)
    mean = sum(v) / n
    var = sum((x - mean) ** 2 for x in v) / n
    return np.array([(v[i] - mean) / math.sqrt(var + eps) * gamma[i] + beta[i] for i in range(n)])


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


# ---------------------------------------------------------------- attention


def oracle_attention(queries, keys, values, scale, key_mask=None):
    """Scaled dot-product attention, one query, key and value entry at a time."""
    lq, lk = len(queries), len(keys)
    out = np.zeros((lq, values.shape[1]))
    weights = np.zeros((lq, lk))
    for i in range(lq):
        scores = []
        for j in range(lk):
            if key_mask is not None and not key_mask[j]:
                scores.append(-math.inf)
                continue
            acc = 0.0
            for d in range(queries.shape[1]):
                acc += queries[i, d] * keys[j, d]
            scores.append(acc * scale)
        finite = max(s for s in scores if s != -math.inf)
        e = [0.0 if s == -math.inf else math.exp(s - finite) for s in scores]
        total = sum(e)
        for j in range(lk):
            weights[i, j] = e[j] / total
            for d in range(values.shape[1]):
                out[i, d] += weights[i, j] * values[j, d]
    return out, weights


def multi_head_attention(query_in, kv_in, p, heads, key_mask=None):
    """``p`` holds ``q``, ``k``, ``v``, ``o`` linear pairs."""
    q = np.array([linear(x, p["q"]) for x in query_in])
    k = np.array([linear(x, p["k"]) for x in kv_in])
    v = np.array([linear(x, p["v"]) for x in kv_in])
    hd = q.shape[1] // heads
    merged = np.zeros((len(query_in), q.shape[1]))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        out, _ = oracle_attention(q[:, sl], k[:, sl], v[:, sl], 1.0 / math.sqrt(hd), key_mask)
        merged[:, sl] = out
    return np.array([linear(x, p["o"]) for x in merged])


def feed_forward(x, p):
    h = np.array([gelu(v) for v in linear(x, p["fc1"])])
    return linear(h, p["fc2"])


# ---------------------------------------------------------------- resampling


def _source_index(dst, in_size, out_size):
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    return max(src, 0.0)


def bilinear_resize(x, size):
    """Half-pixel-centre bilinear resampling of ``(H, W, C)`` with edge clamping."""
    h, w, c = x.shape
    oh, ow = size
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        sy = _source_index(i, h, oh)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(ow):
            sx = _source_index(j, w, ow)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            for ch in range(c):
                out[i, j, ch] = (
                    (1 - ly) * ((1 - lx) * x[y0, x0, ch] + lx * x[y0, x1, ch])
                    + ly * ((1 - lx) * x[y1, x0, ch] + lx * x[y1, x1, ch])
                )
    return out


def bilinear_sample_zero_pad(fmap, px, py):
    """Sample ``(H, W, C)`` at continuous pixel coordinates; outside reads zero."""
    h, w, c = fmap.shape
    x0, y0 = int(math.floor(px)), int(math.floor(py))
    fx, fy = px - x0, py - y0
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                for ch in range(c):
                    out[ch] += wy * wx * fmap[yy, xx, ch]
    return out


# ---------------------------------------------------------------- fusion


def oracle_fuse_stage(level, text, pad_mask, p, mask_padding=False):
    """Gated language reweighting of one ``(H, W, C)`` level; returns ``(fused, scores)``."""
    h, w, c = level.shape
    length, dl = text.shape
    lk = np.array([linear(t, p["w_k"]) for t in text])
    lv = np.array([linear(t, p["w_v"]) for t in text])
    if mask_padding:
        for t in range(length):
            if not pad_mask[t]:
                lk[t, :] = 0.0
                lv[t, :] = 0.0
    fused = np.zeros_like(level)
    scores = np.zeros((h * w, dl))
    for y in range(h):
        for x in range(w):
            pix = y * w + x
            vq = linear(level[y, x], p["w_q"])
            for d in range(dl):
                acc = 0.0
                for t in range(length):
                    acc += vq[t] * lk[t, d]
                scores[pix, d] = acc
            probs = softmax([s / math.sqrt(length) for s in scores[pix]])
            att = np.zeros(length)
            for t in range(length):
                for d in range(dl):
                    att[t] += probs[d] * lv[t, d]
            gated = np.array([gelu(v) for v in linear(att, p["gate"])])
            rw = linear(gated, p["reweight"])
            for ch in range(c):
                fused[y, x, ch] = rw[ch] * level[y, x, ch]
    return fused, scores


def oracle_saliency(scores, size, target, seq_len):
    grid = bilinear_resize(scores.reshape(size[0], size[1], -1), target)
    cells = target[0] * target[1]
    dl = grid.shape[2]
    sal = np.zeros(target)
    for d in range(dl):
        col = [grid[i // target[1], i % target[1], d] / math.sqrt(seq_len) for i in range(cells)]
        probs = softmax(col)
        for i in range(cells):
            sal[i // target[1], i % target[1]] += probs[i] / dl
    return sal


def oracle_deficit(saliency):
    h, w = saliency[0].shape
    m = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for i in range(len(saliency) - 1):
                m[y, x] += abs(saliency[i][y, x] - saliency[i + 1][y, x])
    return m


def oracle_topk(m, k):
    h, w = m.shape
    cells = [(-m[y, x], y * w + x, (y, x)) for y in range(h) for x in range(w)]
    cells.sort()
    return [c[2] for c in cells[:k]]


def oracle_compensate(levels, regions, p, heads):
    """Cross-scale refinement of the listed ``(row, col)`` cells.

    ``p`` holds ``proj_in``/``proj_out`` (lists of four linear pairs),
    ``norm`` (gamma, beta) and ``msa`` (q/k/v/o pairs).
    """
    h4, w4, _ = levels[3].shape
    gathered = [bilinear_resize(v, (h4, w4)) for v in levels]
    out = [v.copy() for v in levels]
    for r, c in regions:
        tokens = np.array([linear(gathered[i][r, c], p["proj_in"][i]) for i in range(4)])
        normed = np.array([layer_norm(t, *p["norm"]) for t in tokens])
        refined = multi_head_attention(normed, normed, p["msa"], heads) + tokens
        for i in range(4):
            delta = linear(refined[i], p["proj_out"][i]) - gathered[i][r, c]
            f = levels[i].shape[0] // h4
            for y in range(r * f, (r + 1) * f):
                for x in range(c * f, (c + 1) * f):
                    out[i][y, x] += delta
    return out


# ---------------------------------------------------------------- decoder


def oracle_reference_points(level_sizes):
    pts = []
    for h, w in level_sizes:
        for y in range(h):
            for x in range(w):
                pts.append(((x + 0.5) / w, (y + 0.5) / h))
    return np.array(pts)


def oracle_ms_deform_attn(query, ref, value_tokens, level_sizes, p, heads, points):
    """Deformable attention; ``p`` holds ``value_proj``, ``offsets``, ``weights``, ``out_proj``."""
    levels = len(level_sizes)
    value = np.array([linear(v, p["value_proj"]) for v in value_tokens])
    dim = value.shape[1]
    hd = dim // heads
    maps, start = [], 0
    for h, w in level_sizes:
        maps.append(value[start : start + h * w].reshape(h, w, dim))
        start += h * w
    out = np.zeros((len(query), dim))
    for q in range(len(query)):
        off = linear(query[q], p["offsets"]).reshape(heads, levels, points, 2)
        logits = linear(query[q], p["weights"]).reshape(heads, levels * points)
        merged = np.zeros(dim)
        for hh in range(heads):
            a = softmax(list(logits[hh]))
            for l, (h, w) in enumerate(level_sizes):
                fmap = maps[l][:, :, hh * hd : (hh + 1) * hd]
                for pt in range(points):
                    lx = ref[q, 0] + off[hh, l, pt, 0] / w
                    ly = ref[q, 1] + off[hh, l, pt, 1] / h
                    sample = bilinear_sample_zero_pad(fmap, lx * w - 0.5, ly * h - 0.5)
                    merged[hh * hd : (hh + 1) * hd] += a[l * points + pt] * sample
        out[q] = linear(merged, p["out_proj"])
    return out


def oracle_l2v(text, visual, p, heads, key_mask=None):
    x = text + multi_head_attention(text, visual, p["cross"], heads)
    x = np.array([layer_norm(v, *p["norm0"]) for v in x])
    x = x + multi_head_attention(x, x, p["self_attn"], heads, key_mask)
    x = np.array([layer_norm(v, *p["norm1"]) for v in x])
    x = x + np.array([feed_forward(v, p["ffn"]) for v in x])
    return np.array([layer_norm(v, *p["norm2"]) for v in x])


def oracle_v2l(visual, text, level_sizes, p, heads, msda_heads, msda_points, key_mask=None):
    x = visual + multi_head_attention(visual, text, p["cross"], heads, key_mask)
    x = np.array([layer_norm(v, *p["norm0"]) for v in x])
    ref = oracle_reference_points(level_sizes)
    x = x + oracle_ms_deform_attn(x, ref, x, level_sizes, p["deform"], msda_heads, msda_points)
    x = np.array([layer_norm(v, *p["norm1"]) for v in x])
    x = x + np.array([feed_forward(v, p["ffn"]) for v in x])
    return np.array([layer_norm(v, *p["norm2"]) for v in x])


# ---------------------------------------------------------------- losses / metrics


def oracle_ce(logits, target):
    total, n = 0.0, 0
    for z, y in zip(np.ravel(logits), np.ravel(target)):
        s = sigmoid(z)
        total += -(y * math.log(s) + (1 - y) * math.log(1 - s))
        n += 1
    return total / n


def oracle_dice(logits, target, eps=1.0):
    inter = ps = ys = 0.0
    for z, y in zip(np.ravel(logits), np.ravel(target)):
        s = sigmoid(z)
        inter += s * y
        ps += s
        ys += y
    return 1.0 - (2.0 * inter + eps) / (ps + ys + eps)


def oracle_iou(pred, gt):
    """Integer intersection and union by visiting every pixel."""
    inter = union = 0
    rows, cols = len(pred), len(pred[0])
    for i in range(rows):
        for j in range(cols):
            a, b = bool(pred[i][j]), bool(gt[i][j])
            if a and b:
                inter += 1
            if a or b:
                union += 1
    return inter, union


def oracle_metrics(pairs, thresholds=(0.5, 0.6, 0.7, 0.8, 0.9)):
    si = su = 0
    ious = []
    for pred, gt in pairs:
        i, u = oracle_iou(pred, gt)
        si += i
        su += u
        ious.append(i / u if u else 1.0)
    out = {"oIoU": si / su if su else 1.0, "mIoU": math.fsum(ious) / len(ious)}
    for x in thresholds:
        out[f"Pr@{x}"] = sum(1 for v in ious if v >= x) / len(ious)
    out["count"] = len(ious)
    return out
