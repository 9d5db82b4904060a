"""Centered kernel alignment over layer activations.

Linear kernel only: Gram matrices are X X^T over per-sample flattened
activations.  HSIC is the Frobenius inner product of the doubly-centered
Grams scaled by (m-1)^-2, and CKA normalizes it to [0, 1].  Taps that sit
after a sign node contribute ±1 floats, which are valid inputs.
"""

from __future__ import annotations

import csv

import numpy as np


def gram(x: np.ndarray) -> np.ndarray:
    """K = X X^T for an m x p activation matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("gram expects a 2-D activation matrix")
    if x.shape[0] < 2:
        raise ValueError("gram needs at least 2 samples")
    return x @ x.T


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """vec(HKH) . vec(HLH) / (m-1)^2 with H the centering matrix."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("hsic expects two square matrices of equal size")
    m = k.shape[0]
    if m < 2:
        raise ValueError("hsic needs m >= 2")
    h = np.eye(m) - np.ones((m, m)) / m
    kc = h @ k @ h
    lc = h @ l @ h
    return float((kc * lc).sum() / (m - 1) ** 2)


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """HSIC(K,L) / sqrt(HSIC(K,K) HSIC(L,L)); errors on constant inputs
    rather than returning NaN."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("cka expects equal sample counts")
    k, l = gram(x), gram(y)
    kk = hsic(k, k)
    ll = hsic(l, l)
    if kk <= 0.0 or ll <= 0.0:
        raise ValueError("cka undefined for constant activations (zero self-HSIC)")
    return hsic(k, l) / np.sqrt(kk * ll)


def collect_activations(model, images: np.ndarray, tap_ids: list[str],
                        batch_size: int = 16) -> dict[str, np.ndarray]:
    """Eval-mode activations per tap, flattened to [m, neurons]."""
    known = model.tap_names()
    for tid in tap_ids:
        if tid not in known:
            raise ValueError(f"unknown tap id {tid!r}")
    rows: dict[str, list[np.ndarray]] = {tid: [] for tid in tap_ids}
    m = images.shape[0]
    for start in range(0, m, batch_size):
        out = model.forward(images[start : start + batch_size], mode="eval")
        for tid in tap_ids:
            act = out.taps[tid].values
            rows[tid].append(act.reshape(act.shape[0], -1))
    return {tid: np.concatenate(chunks, axis=0) for tid, chunks in rows.items()}


def cka_heatmap(model, images: np.ndarray, tap_ids: list[str] | None = None,
                sample_count: int = 128) -> tuple[list[str], np.ndarray]:
    """Pairwise CKA between tap activations over ``sample_count`` images.
    Constant taps yield NaN entries (marked missing) without aborting."""
    tap_ids = list(tap_ids) if tap_ids else model.tap_names()
    if sample_count > images.shape[0]:
        raise ValueError(
            f"sample_count {sample_count} exceeds dataset size {images.shape[0]}"
        )
    acts = collect_activations(model, images[:sample_count], tap_ids)
    n = len(tap_ids)
    scores = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            try:
                val = cka(acts[tap_ids[i]], acts[tap_ids[j]])
            except ValueError:
                continue
            scores[i, j] = scores[j, i] = val
    return tap_ids, scores


def write_cka_csv(path, names: list[str], scores: np.ndarray):
    """Header row/column are tap names; missing entries stay empty."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([""] + names)
        for name, row in zip(names, scores):
            writer.writerow([name] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])
