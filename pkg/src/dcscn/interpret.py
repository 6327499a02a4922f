"""Class-activation maps weighted by channel feature independence, and the
IoU trustworthiness index against ground-truth annotation masks.

Channel independence is the relative drop of the nuclear norm of the
(H*W) x C channel matrix when one channel is zeroed: channels whose content
is already encoded elsewhere barely move the norm and score near 0, unique
channels score high.  The CAM weights each upsampled channel map by its
independence score and by the class score obtained from re-classifying the
channel's overlay on the input.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError
from .network import _layer_maps, forward_stacks, predict, predict_batch
from .numerics import bilinear_resize, nuclear_norm, relu


@dataclass(frozen=True)
class IndependenceScores:
    values: np.ndarray        # FC per channel, each in [0, 1]
    degenerate: bool = False  # all-zero feature stack
    batch_id: str | None = None


@dataclass(frozen=True)
class CamMap:
    heat: np.ndarray        # (H, W) in [0, 1], max-normalised
    class_index: int
    highlight: np.ndarray   # (H, W) {0, 1}
    degenerate: bool = False


def layer_feature_stack(model, img, layer):
    """Post-activation, post-pool maps of layer `layer` (1-based) stacked
    over its kernels."""
    if not 1 <= layer <= len(model.layers):
        raise ConfigError(
            f"layer {layer} out of range [1, {len(model.layers)}]")
    return forward_stacks(model, img)[layer - 1]


def _normalize01(m):
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m), True
    return (m - lo) / (hi - lo), False


def overlay_channel(channel_map, img):
    """Resize a channel map to the input size, min-max normalise it to
    [0, 1], and multiply it into every image channel.  A constant map
    normalises to all zeros (degenerate: the overlay erases the image)."""
    img = np.asarray(img, dtype=np.float64)
    up = bilinear_resize(channel_map, img.shape[0], img.shape[1])
    normed, _ = _normalize01(up)
    return normed[:, :, None] * img


def class_scores(model, overlaid):
    """Softmax category scores of the model on an overlaid input."""
    probs, _ = predict(model, overlaid)
    return probs


def independence_coefficients(a, batch_id=None):
    """Per-channel feature independence of an (H, W, C) stack.

    FC_c = (||A||_* - ||A with channel c zeroed||_*) / ||A||_*, with A the
    (H*W) x C channel matrix.  A zero stack yields all-zero scores with the
    degenerate flag set.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] < 1:
        raise DimensionError(f"expected (H, W, C) stack, got shape {a.shape}")
    mat = a.reshape(-1, a.shape[2])
    total = nuclear_norm(mat)
    if total == 0.0:
        return IndependenceScores(np.zeros(mat.shape[1]), True, batch_id)
    values = np.empty(mat.shape[1])
    for c in range(mat.shape[1]):
        masked = mat.copy()
        masked[:, c] = 0.0
        values[c] = (total - nuclear_norm(masked)) / total
    return IndependenceScores(values, False, batch_id)


def _bilinear_stack(stack, out_h, out_w):
    """Align-corners bilinear resize of every map in a (B, h, w) stack."""
    b, h, w = stack.shape

    def axis_coords(src_len, dst_len):
        if dst_len == 1:
            return np.zeros(1)
        return np.arange(dst_len) * (src_len - 1) / (dst_len - 1)

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = stack[:, y0[:, None], x0[None, :]] * (1 - wx) \
        + stack[:, y0[:, None], x1[None, :]] * wx
    bot = stack[:, y1[:, None], x0[None, :]] * (1 - wx) \
        + stack[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def _cam_batch(model, images, classes, layer, theta):
    """CAMs for a batch of images; all per-channel overlay forwards run as
    one batched pass.  cam() is the single-sample front end of this path."""
    images = np.asarray(images, dtype=np.float64)
    batch = images.shape[0]
    stacks = images
    for spec in model.layers[:layer]:
        stacks = _layer_maps(stacks, spec)
    n_ch = stacks.shape[3]
    h, w = images.shape[1:3]
    fcs = np.stack([independence_coefficients(stacks[b]).values
                    for b in range(batch)])
    flat = stacks.transpose(0, 3, 1, 2).reshape(batch * n_ch, *stacks.shape[1:3])
    ups = _bilinear_stack(flat, h, w)
    lo = ups.min(axis=(1, 2), keepdims=True)
    hi = ups.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    normed = np.where(span > 0, (ups - lo) / np.where(span > 0, span, 1.0), 0.0)
    overlays = normed[:, :, :, None] * np.repeat(images, n_ch, axis=0)
    probs, _ = predict_batch(model, overlays)
    s_q = probs[np.arange(batch * n_ch), np.repeat(classes, n_ch)]
    weights = fcs.reshape(batch * n_ch) * s_q
    heat = relu((weights[:, None, None] * normed)
                .reshape(batch, n_ch, h, w).sum(axis=1))
    cams = []
    for b in range(batch):
        peak = float(heat[b].max())
        if peak <= 0.0:
            cams.append(CamMap(heat[b], int(classes[b]), np.zeros((h, w)),
                               degenerate=True))
        else:
            hb = heat[b] / peak
            cams.append(CamMap(hb, int(classes[b]),
                               (hb >= theta).astype(np.float64),
                               degenerate=False))
    return cams


def cam(model, img, layer, class_index, theta=0.5):
    """Class activation map for one sample at a given layer (1-based).

    heat = ReLU(sum_c FC_c * S_{c,q} * upsampled map_c), max-normalised;
    the highlight keeps pixels with heat >= theta * max(heat).
    """
    if not 0 <= class_index < model.n_classes:
        raise ConfigError(
            f"class {class_index} out of range [0, {model.n_classes})")
    if not 1 <= layer <= len(model.layers):
        raise ConfigError(
            f"layer {layer} out of range [1, {len(model.layers)}]")
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(model.input_shape):
        raise DimensionError(
            f"input shape {img.shape} does not match model {model.input_shape}")
    return _cam_batch(model, img[None], np.array([class_index]), layer, theta)[0]


def iou(a, b):
    """Intersection over union of two {0,1} masks; two empty masks agree
    vacuously (1.0)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0.5
    b = b > 0.5
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def iou_per_sample(model, ds, layer=None, theta=0.5):
    """IoU of the true-class CAM highlight against each sample's mask.

    Returns a list of (sample index, label, iou).  Every sample must carry a
    mask; offenders are reported by index.
    """
    missing = [i for i, s in enumerate(ds.samples) if s.mask is None]
    if missing:
        raise ConfigError(
            f"iou evaluation requires masks on all samples; missing for "
            f"indices {missing}")
    if layer is None:
        layer = len(model.layers)
    if not 1 <= layer <= len(model.layers):
        raise ConfigError(
            f"layer {layer} out of range [1, {len(model.layers)}]")
    n_ch = len(model.layers[layer - 1].kernels)
    chunk = max(1, 512 // max(n_ch, 1))
    rows = []
    for start in range(0, len(ds), chunk):
        part = ds.samples[start:start + chunk]
        images = np.stack([s.image for s in part])
        labels = np.array([s.label for s in part])
        cams = _cam_batch(model, images, labels, layer, theta)
        for j, (s, cm) in enumerate(zip(part, cams)):
            rows.append((start + j, s.label, iou(cm.highlight, s.mask)))
    return rows


def iou_dataset(model, ds, layer=None, theta=0.5):
    """Mean per-sample IoU over a fully annotated dataset."""
    rows = iou_per_sample(model, ds, layer, theta)
    return float(np.mean([r[2] for r in rows]))


def _contour(mask):
    """Boundary pixels of a binary mask (4-neighbourhood)."""
    m = mask > 0.5
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def export_heatmap(cam_map, img, path):
    """Render the CAM as a red overlay (50% blend) on the grayscale image,
    with the highlight contour traced in green, and save it as a PNG."""
    img = np.asarray(img, dtype=np.float64)
    gray = np.clip((img.mean(axis=2) + 1.0) / 2.0, 0.0, 1.0)
    red = 0.5 * gray + 0.5 * cam_map.heat
    rgb = np.stack([red, 0.5 * gray, 0.5 * gray], axis=2)
    edge = _contour(cam_map.highlight)
    rgb[edge] = (0.0, 1.0, 0.0)
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
    return path
