"""Evaluation and cross-resolution diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch

from .data import (AugmentationConfig, normalize, preprocess_eval_set, render_multi_resolution,
                   sample_crop, sample_rng)
from .model import SwitchableClassifier, interpolate_bn_bank


def _eval_tensors(data, r, augmentation):
    if isinstance(data, tuple) and len(data) == 2 and torch.is_tensor(data[0]):
        return data
    return preprocess_eval_set(data, r, augmentation)


@torch.no_grad()
def predict_logits(model: SwitchableClassifier, images, r: int, batch_size: int = 256):
    """Eval-mode logits at side ``r``; non-training sides use an interpolated bank."""
    model.eval()
    if r in model.profile.resolutions:
        kw = dict(s=model.profile.index(r))
    else:
        kw = dict(bank=interpolate_bn_bank(model, r))
    return torch.cat([model(images[i:i + batch_size], train=False, **kw)
                      for i in range(0, len(images), batch_size)])


def topk_accuracy(logits, labels, k: int) -> float:
    k = min(k, logits.shape[-1])
    top = logits.topk(k, dim=-1).indices
    return 100.0 * (top == labels[:, None]).any(dim=-1).double().mean().item()


def evaluate(model: SwitchableClassifier, data, r: int,
             augmentation: AugmentationConfig = AugmentationConfig(), batch_size: int = 256) -> dict:
    """Top-1/top-5 accuracy (%) at side ``r``.

    ``data`` is a dataset (eval preprocessing is applied here) or an
    already preprocessed ``(images, labels)`` pair.
    """
    res = model.profile.resolutions
    if not res[-1] <= r <= res[0]:
        raise ValueError(f"resolution {r} outside the interpolation range [{res[-1]}, {res[0]}]")
    images, labels = _eval_tensors(data, r, augmentation)
    logits = predict_logits(model, images, r, batch_size)
    return dict(resolution=r, top1=topk_accuracy(logits, labels, 1), top5=topk_accuracy(logits, labels, 5),
                predictions=logits.argmax(-1).numpy(), labels=labels.numpy())


# ---------------------------------------------------------------------------
# disagreement


def disagreement_matrix(predictions: Sequence[np.ndarray], labels) -> np.ndarray:
    """Entry ``(i, j)``: % of samples right at resolution ``j`` and wrong at ``i``.

    The diagonal is NaN.
    """
    labels = np.asarray(labels)
    preds = [np.asarray(p) for p in predictions]
    if any(len(p) != len(labels) for p in preds):
        raise ValueError("every prediction list must match the label count")
    if len(labels) == 0:
        raise ValueError("no samples")
    right = np.stack([p == labels for p in preds])
    S = len(preds)
    out = np.full((S, S), np.nan)
    for i in range(S):
        for j in range(S):
            if i != j:
                out[i, j] = 100.0 * np.mean(right[j] & ~right[i])
    return out


def write_disagreement_csv(matrix, resolutions, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wrong_at\\right_at"] + [str(r) for r in resolutions])
        for r, row in zip(resolutions, matrix):
            w.writerow([str(r)] + ["-" if np.isnan(v) else f"{v:.1f}" for v in row])


# ---------------------------------------------------------------------------
# activation CDFs


@dataclass
class ActivationCdf:
    values: np.ndarray
    fractions: np.ndarray
    tag: str

    def __call__(self, x) -> float:
        """F(x) = P(X <= x)."""
        return np.searchsorted(self.values, x, side="right") / len(self.values)


def empirical_cdf(components, tag: str = "test-preprocessing", max_components: int = 10 ** 6,
                  seed: int = 0) -> ActivationCdf:
    v = np.asarray(components, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty activation sample")
    if v.size > max_components:
        v = np.random.default_rng(seed).choice(v, max_components, replace=False)
    v = np.sort(v)
    return ActivationCdf(v, np.arange(1, v.size + 1) / v.size, tag)


@torch.no_grad()
def gap_activations(model: SwitchableClassifier, images, r: int, batch_size: int = 256):
    model.eval()
    if r in model.profile.resolutions:
        kw = dict(s=model.profile.index(r))
    else:
        kw = dict(bank=interpolate_bn_bank(model, r))
    return torch.cat([model.features(images[i:i + batch_size], train=False, **kw)
                      for i in range(0, len(images), batch_size)])


def train_preprocessed(dataset, r: int, augmentation: AugmentationConfig, seed: int = 0):
    """Each image through one random-resized-crop at side ``r``."""
    out = []
    for i in range(len(dataset)):
        img, _ = dataset[i]
        crop = sample_crop(img.shape[-2:], augmentation, sample_rng(seed, 0, i))
        out.append(normalize(render_multi_resolution(img, crop, [r])[0], augmentation))
    return torch.stack(out)


def gap_activation_cdf(model: SwitchableClassifier, images, r: int, tag: str = "test-preprocessing",
                       max_components: int = 10 ** 6, seed: int = 0) -> ActivationCdf:
    if len(images) == 0:
        raise ValueError("empty image sample")
    feats = gap_activations(model, images, r)
    return empirical_cdf(feats.numpy(), tag, max_components, seed)


def write_cdf_csv(cdf: ActivationCdf, path, points: int = 0):
    """``value,cumulative_fraction`` rows; ``points > 0`` thins to that many quantiles."""
    v, f = cdf.values, cdf.fractions
    if points and len(v) > points:
        idx = np.unique(np.linspace(0, len(v) - 1, points).round().astype(int))
        v, f = v[idx], f[idx]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "cumulative_fraction", "tag"])
        for a, b in zip(v, f):
            w.writerow([f"{a:.6g}", f"{b:.6f}", cdf.tag])


# ---------------------------------------------------------------------------
# BN summaries and ensemble weights


def bn_summary(model: SwitchableClassifier) -> List[dict]:
    """Channel-wise means of gamma, beta, mu and sigma per layer and bank."""
    rows = []
    labels = model.bank_labels()
    for layer, m in model.bn_layers.items():
        for b, slot in enumerate(m.banks):
            stats = dict(gamma=slot.weight, beta=slot.bias, mu=slot.running_mean,
                         sigma=slot.running_var.clamp_min(0).sqrt())
            for param, t in stats.items():
                rows.append(dict(layer=layer, resolution=labels[b], param=param,
                                 mean=float(t.detach().double().mean())))
    return rows


def report_alpha(model: SwitchableClassifier) -> List[dict]:
    """Ensemble weight per branch, largest resolution first."""
    alpha = model.alpha.detach().double().tolist()
    return [dict(branch=k + 1, resolution=r, alpha=a) for k, (r, a) in enumerate(zip(model.branches, alpha))]


def write_rows(rows: List[dict], path, float_fmt: str = "{:.6f}"):
    if not rows:
        raise ValueError("nothing to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for row in rows:
            w.writerow([float_fmt.format(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
