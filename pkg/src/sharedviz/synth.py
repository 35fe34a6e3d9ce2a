"""Synthetic category-selective neurons and the tools to check them.

A synthetic neuron is the readout direction maximising
``w' (A_in' A_in - A_out' A_out) w`` over unit vectors, i.e. the eigenvector
of the algebraically largest eigenvalue of that difference matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneModel, extract_features
from .readout import ManifestEntry


@dataclass
class ActivationMatrix:
    values: np.ndarray  # N x c
    ids: list[str]

    def __post_init__(self):
        self.values = T.as_tensor(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ValueError(f"{self.values.shape[0]} rows but {len(self.ids)} ids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("activation matrix has non-finite entries")


def activation_matrix(backbone: BackboneModel, images: Sequence[tuple[str, np.ndarray]], location=None) -> ActivationMatrix:
    if not images:
        raise ValueError("activation_matrix needs at least one image")
    rows, ids = [], []
    for sid, img in images:
        try:
            feats, _ = extract_features(backbone, img, location)
        except Exception as exc:
            raise ValueError(f"feature extraction failed for {sid!r}: {exc}") from exc
        rows.append(feats)
        ids.append(sid)
    return ActivationMatrix(np.stack(rows), ids)


class EigenResult(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns


def symmetric_eigendecomp(matrix, max_sweeps: int = 100) -> EigenResult:
    """All eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back in descending algebraic order; each eigenvector has
    its first nonzero component positive.
    """
    m = T.as_tensor(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > 1e-10 * scale:
        raise ValueError(f"matrix is not symmetric (max |M - M'| = {asym:.3g})")
    a = (m + m.T) / 2
    n = a.shape[0]
    v = np.eye(n)
    total = np.linalg.norm(a)
    for sweep in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))  # direct sum; sum(a^2) - sum(diag^2) cancels
        if off <= 1e-15 * total:
            break
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                app, aqq = a[p, p], a[q, q]
                if sweep > 3 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    # below rounding relative to both diagonal entries
                    a[p, q] = a[q, p] = 0.0
                    continue
                h = aqq - app
                if abs(h) + g == abs(h):
                    t = apq / h  # tiny angle; avoids overflow in tau
                else:
                    tau = h / (2 * apq)
                    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1 + tau * tau))
                c = 1 / math.sqrt(1 + t * t)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
                rotated = True
        if not rotated:
            break
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    evals, v = evals[order], v[:, order]
    for k in range(n):
        nz = np.flatnonzero(np.abs(v[:, k]) > 1e-12)
        if nz.size and v[nz[0], k] < 0:
            v[:, k] = -v[:, k]
    return EigenResult(evals, v)


class SyntheticNeuron(NamedTuple):
    w: np.ndarray
    eigenvalue: float
    degenerate: bool


def build_synthetic_neuron(a_in, a_out) -> SyntheticNeuron:
    """Unit readout maximising in-category minus out-of-category response energy.

    The eigenvector sign is chosen so the mean in-category response is not
    below the mean out-of-category response. ``degenerate`` is set when the
    top eigenvalue is not simple, in which case the maximiser is not unique.
    """
    a_in = a_in.values if isinstance(a_in, ActivationMatrix) else T.as_tensor(a_in)
    a_out = a_out.values if isinstance(a_out, ActivationMatrix) else T.as_tensor(a_out)
    if a_in.shape[1] != a_out.shape[1]:
        raise ValueError(f"feature dims differ: {a_in.shape[1]} vs {a_out.shape[1]}")
    diff = a_in.T @ a_in - a_out.T @ a_out
    eig = symmetric_eigendecomp(diff)
    w = eig.vectors[:, 0].copy()
    if np.mean(a_in @ w) < np.mean(a_out @ w):
        w = -w
    tol = 1e-12 * max(1.0, float(np.linalg.norm(diff)))
    degenerate = len(eig.values) > 1 and eig.values[0] - eig.values[1] <= tol
    return SyntheticNeuron(w, float(eig.values[0]), bool(degenerate))


def generate_synthetic_responses(
    w, features_by_id: Sequence[tuple[str, np.ndarray]], noise_std: float, seed: int, paths=None, splits=None
) -> list[ManifestEntry]:
    """``response = <a, w> + N(0, noise_std^2)`` per stimulus, drawn from a seeded generator."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    w = T.as_tensor(w)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, size=len(features_by_id)) if noise_std > 0 else np.zeros(len(features_by_id))
    rows = []
    for n, (sid, feats) in enumerate(features_by_id):
        path = Path(paths[sid]) if paths else Path(f"{sid}.ppm")
        split = splits[sid] if splits else "train"
        rows.append(ManifestEntry(sid, path, float(T.as_tensor(feats) @ w) + float(noise[n]), split))
    return rows


class MannWhitneyResult(NamedTuple):
    u: float
    p: float
    z: float
    reliable: bool


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b) -> MannWhitneyResult:
    """U for ``sample_a`` and its two-sided p from the tie-corrected normal approximation.

    A continuity correction of 0.5 is applied. ``reliable`` is False when
    either sample has fewer than 8 values.
    """
    a, b = T.as_tensor(sample_a).ravel(), T.as_tensor(sample_b).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("mann_whitney_u needs two non-empty samples")
    ranks = _average_ranks(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    n = n1 + n2
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12 * ((n + 1) - (tie_term / (n * (n - 1)) if n > 1 else 0.0))
    mean = n1 * n2 / 2
    if var <= 0:
        return MannWhitneyResult(u, 1.0, 0.0, False)
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2)))
    return MannWhitneyResult(u, p, z, min(n1, n2) >= 8)


# -- procedural textures ----------------------------------------------------------

TEXTURES = ("stripes", "blobs", "checker", "noise")


def texture_image(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Random ``3 x size x size`` texture of the given family, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "stripes":
        freq = rng.uniform(3, 7)
        angle = rng.uniform(-0.3, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (yy * np.cos(angle) + xx * np.sin(angle)) + phase)
    elif kind == "blobs":
        base = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            r = rng.uniform(0.06, 0.18)
            base += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        base = 1 - np.exp(-2 * base)
    elif kind == "checker":
        period = rng.uniform(0.1, 0.3)
        oy, ox = rng.uniform(0, period, size=2)
        base = ((np.floor((yy + oy) / period) + np.floor((xx + ox) / period)) % 2).astype(float)
    elif kind == "noise":
        base = rng.uniform(0, 1, size=(size, size))
        k = np.ones(5) / 5
        base = np.apply_along_axis(np.convolve, 0, base, k, "same")
        base = np.apply_along_axis(np.convolve, 1, base, k, "same")
        base = (base - base.min()) / max(np.ptp(base), 1e-12)
    else:
        raise ValueError(f"unknown texture {kind!r}; choose from {TEXTURES}")
    tint = rng.uniform(0.4, 1.0, size=3)
    # keep clear of 0 and 1: clipped plateaus create exact max-pool ties
    img = 0.05 + 0.85 * tint[:, None, None] * base[None] + rng.normal(0, 0.015, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)
