"""Class activation maps over tapped convolutional feature maps.

Five methods: GradCAM, GradCAM++, LayerCAM (gradient based) and ScoreCAM,
Faster-ScoreCAM (perturbation based). Gradient methods use the pre-softmax
logit of the target class as the score. All maps are upsampled bilinearly to
the input size and min-max normalised into [0, 1].

Any object with ``kind``, ``feature_taps``, ``num_classes``, ``forward`` and
``forward_with_taps`` can be explained, which keeps toy networks cheap in
tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import pnm
from .data import resize_bilinear
from .tensor import Tensor, backward, no_grad

METHODS = ("gradcam", "gradcampp", "scorecam", "faster_scorecam", "layercam")


class CamError(ValueError):
    pass


class CamUnsupportedArchitecture(CamError):
    """CAM needs spatial convolutional feature maps; a ViT has none."""


@dataclass
class CamRequest:
    model: object
    image: np.ndarray  # (1, H, W, C)
    target_class: Optional[int] = None
    layer: str = "auto"
    top_k: int = 16


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    method: str
    target_class: int
    source_layers: list = field(default_factory=list)
    forward_passes: int = 0  # scoring passes, ScoreCAM family only


def normalize(cam: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]. A zero map stays zero; a flat positive map
    becomes all ones."""
    lo, hi = float(cam.min()), float(cam.max())
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam) if hi > 0 else np.zeros_like(cam)


def upsample(cam: np.ndarray, hw) -> np.ndarray:
    return resize_bilinear(cam[None, :, :, None], hw)[0, :, :, 0]


def _image(req: CamRequest) -> np.ndarray:
    img = np.asarray(req.image.data if isinstance(req.image, Tensor) else req.image)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise CamError(f"CAM explains one image (1, H, W, C), got shape {img.shape}")
    return img


def _check_model(model) -> None:
    if getattr(model, "kind", None) != "cnn":
        raise CamUnsupportedArchitecture(
            "class activation maps need convolutional feature maps; a vision transformer "
            "processes images as patch sequences with self-attention and has none to weight"
        )


def _resolve_layer(model, layer: str) -> str:
    taps = list(model.feature_taps)
    if layer == "auto":
        return taps[-1]
    if layer not in taps:
        raise CamError(f"unknown feature tap {layer!r}; available: {', '.join(taps)}")
    return layer


def _target(req: CamRequest, logits: np.ndarray) -> int:
    k = logits.shape[-1]
    target = int(np.argmax(logits[0])) if req.target_class is None else int(req.target_class)
    if not 0 <= target < k:
        raise CamError(f"target class {target} outside [0, {k})")
    return target


def _gradients(req: CamRequest, layers: Sequence[str]):
    """Forward with taps, backprop the target logit; returns
    ``(target, {layer: (A, dscore/dA)})`` for the single image."""
    model = req.model
    img = _image(req)
    saved = {name: p.grad for name, p in getattr(model, "params", {}).items()}
    try:
        logits, taps = model.forward_with_taps(img)
        target = _target(req, logits.data)
        for name in layers:
            taps[name].grad = None
        backward(logits[0, target])
        out = {}
        for name in layers:
            a = taps[name].data[0].astype(np.float64)
            g = taps[name].grad
            out[name] = (a, np.zeros_like(a) if g is None else g[0].astype(np.float64))
    finally:
        for name, p in getattr(model, "params", {}).items():
            p.grad = saved[name]
    return target, out


def _finish(cam: np.ndarray, hw) -> np.ndarray:
    return normalize(upsample(np.maximum(cam, 0.0), hw))


def gradcam(req: CamRequest) -> Heatmap:
    _check_model(req.model)
    layer = _resolve_layer(req.model, req.layer)
    target, maps = _gradients(req, [layer])
    a, g = maps[layer]
    weights = g.mean(axis=(0, 1))
    cam = (a * weights).sum(axis=2)
    return Heatmap(_finish(cam, _image(req).shape[1:3]), "gradcam", target, [layer])


def gradcam_pp(req: CamRequest, eps: float = 1e-8) -> Heatmap:
    """GradCAM++ with the closed-form alphas of an exponentiated score:
    alpha = g^2 / (2 g^2 + sum_ab(A g^3) + eps), weight = sum(alpha relu(g))."""
    _check_model(req.model)
    layer = _resolve_layer(req.model, req.layer)
    target, maps = _gradients(req, [layer])
    a, g = maps[layer]
    g2 = g * g
    g3 = g2 * g
    total = (a * g3).sum(axis=(0, 1), keepdims=True)
    alpha = g2 / (2.0 * g2 + total + eps)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(0, 1))
    cam = (a * weights).sum(axis=2)
    return Heatmap(_finish(cam, _image(req).shape[1:3]), "gradcampp", target, [layer])


def layercam(req: CamRequest, layers: Optional[Sequence[str]] = None) -> Heatmap:
    """Per-location positive-gradient weighting, fused over ``layers`` by
    elementwise maximum of the individually normalised maps."""
    _check_model(req.model)
    names = [req.layer] if not layers else list(layers)
    names = [_resolve_layer(req.model, n) for n in names]
    target, maps = _gradients(req, list(dict.fromkeys(names)))
    hw = _image(req).shape[1:3]
    fused = None
    for name in names:
        a, g = maps[name]
        cam = _finish((np.maximum(g, 0.0) * a).sum(axis=2), hw)
        fused = cam if fused is None else np.maximum(fused, cam)
    return Heatmap(normalize(fused), "layercam", target, names)


def _score_core(model, img: np.ndarray, acts: np.ndarray, target: int, channels: Sequence[int]):
    hw = img.shape[1:3]
    with no_grad():
        base = _softmax(model.forward(np.zeros_like(img)).data[0])[target]
        passes = 1
        ups, contrib = [], []
        for k in channels:
            up = upsample(acts[:, :, k], hw)
            masked = (img * normalize(up)[None, :, :, None]).astype(img.dtype)
            score = _softmax(model.forward(masked).data[0])[target]
            passes += 1
            ups.append(up)
            contrib.append(score - base)
    weights = _softmax(np.asarray(contrib, dtype=np.float64))
    cam = np.zeros(hw)
    for w, up in zip(weights, ups):
        cam += w * up
    return normalize(np.maximum(cam, 0.0)), passes


def _softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _activations(req: CamRequest, layer: str):
    img = _image(req)
    with no_grad():
        logits, taps = req.model.forward_with_taps(img)
    return img, _target(req, logits.data), taps[layer].data[0].astype(np.float64)


def scorecam(req: CamRequest) -> Heatmap:
    """Gradient-free: weight each channel by how much its own activation,
    used as an input mask, raises the target probability over a black image."""
    _check_model(req.model)
    layer = _resolve_layer(req.model, req.layer)
    img, target, acts = _activations(req, layer)
    values, passes = _score_core(req.model, img, acts, target, range(acts.shape[2]))
    return Heatmap(values, "scorecam", target, [layer], passes)


def faster_scorecam(req: CamRequest) -> Heatmap:
    """ScoreCAM over the ``top_k`` channels with the largest spatial variance."""
    _check_model(req.model)
    if req.top_k < 1:
        raise CamError(f"top_k must be >= 1, got {req.top_k}")
    layer = _resolve_layer(req.model, req.layer)
    img, target, acts = _activations(req, layer)
    variance = acts.reshape(-1, acts.shape[2]).var(axis=0)
    ranked = np.argsort(-variance, kind="stable")
    # keep channel-index order so top_k >= C reproduces scorecam exactly
    chosen = sorted(int(k) for k in ranked[: min(req.top_k, acts.shape[2])])
    values, passes = _score_core(req.model, img, acts, target, chosen)
    return Heatmap(values, "faster_scorecam", target, [layer], passes)


def explain(req: CamRequest, method: str, layers: Optional[Sequence[str]] = None) -> Heatmap:
    if method == "gradcam":
        return gradcam(req)
    if method == "gradcampp":
        return gradcam_pp(req)
    if method == "scorecam":
        return scorecam(req)
    if method == "faster_scorecam":
        return faster_scorecam(req)
    if method == "layercam":
        return layercam(req, layers)
    raise CamError(f"unknown CAM method {method!r}; choose from {', '.join(METHODS)}")


def deletion_scores(model, image: np.ndarray, heatmap: Heatmap, fraction: float = 0.1):
    """Target probability before and after zeroing the top ``fraction`` of
    the heatmap's pixels."""
    img = _image(CamRequest(model, image))
    cutoff = np.quantile(heatmap.values, 1.0 - fraction)
    keep = (heatmap.values < cutoff) if cutoff > 0 else (heatmap.values <= 0)
    with no_grad():
        before = _softmax(model.forward(img).data[0])[heatmap.target_class]
        after = _softmax(model.forward(img * keep[None, :, :, None]).data[0])[heatmap.target_class]
    return float(before), float(after)


# -- rendering ---------------------------------------------------------------------------
def colorize(values: np.ndarray) -> np.ndarray:
    """Blue (0) -> green (0.5) -> red (1), linear in between; returns RGB in [0, 255]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    low = np.clip(v * 2.0, 0.0, 1.0)
    high = np.clip(v * 2.0 - 1.0, 0.0, 1.0)
    lower_half = v <= 0.5
    r = np.where(lower_half, 0.0, high)
    g = np.where(lower_half, low, 1.0 - high)
    b = np.where(lower_half, 1.0 - low, 0.0)
    return np.stack([r, g, b], axis=-1) * 255.0


def grayscale(base: np.ndarray) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    if base.ndim == 2:
        return base
    if base.shape[2] == 1:
        return base[:, :, 0]
    return base[:, :, :3] @ np.array([0.299, 0.587, 0.114])


def overlay(h: Heatmap, base: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colourised map over a grey copy of ``base``; uint8 RGB."""
    gray = grayscale(base)
    if gray.shape != h.values.shape:
        raise CamError(f"heatmap {h.values.shape} and base image {gray.shape[:2]} sizes differ")
    mixed = (1.0 - alpha) * (gray * 255.0)[:, :, None] + alpha * colorize(h.values)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def render_heatmap(h: Heatmap, base: np.ndarray, alpha: float = 0.5, path=None) -> np.ndarray:
    rgb = overlay(h, base, alpha)
    if path is not None:
        pnm.write(path, rgb)
    return rgb


def heatmap_filename(image_stem: str, method: str, target_class: int, suffix: str = ".ppm") -> str:
    return f"{image_stem}__{method}__c{target_class}{suffix}"
