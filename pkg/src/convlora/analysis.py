"""Inspection instruments: attention locality, feature spectra, expert usage."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

EPS = 1e-12


@dataclass
class AttnDistanceReport:
    distances: np.ndarray  # layers x heads, patch-grid units

    @property
    def per_layer(self) -> np.ndarray:
        return self.distances.mean(axis=1)

    def rows(self) -> list[tuple]:
        return [(layer, head, float(v)) for layer, row in enumerate(self.distances)
                for head, v in enumerate(row)]


@dataclass
class SpectrumReport:
    radius: np.ndarray  # normalised frequency radius, first entry 0 (DC)
    rel_log_amp: np.ndarray  # layers x bins (or bins for a single map stack)

    def rows(self) -> list[tuple]:
        vals = np.atleast_2d(self.rel_log_amp)
        return [(layer, float(r), float(v)) for layer, row in enumerate(vals)
                for r, v in zip(self.radius, row)]


@dataclass
class UtilizationHistogram:
    counts: np.ndarray  # n experts, aggregated
    per_layer: dict = field(default_factory=dict)  # key -> counts

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)

    @property
    def cv(self) -> float:
        m = self.counts.mean()
        return float(self.counts.std() / m) if m else 0.0


def grid_distances(grid: tuple[int, int]) -> np.ndarray:
    """Euclidean distance between every pair of patch centres, L x L."""
    ys, xs = np.meshgrid(np.arange(grid[0]), np.arange(grid[1]), indexing="ij")
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    return np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))


def mean_attention_distance(attn, grid: tuple[int, int]) -> AttnDistanceReport:
    """Attention-weighted query-to-key distance, averaged over queries and images.

    ``attn`` is one B x h x L x L array or a sequence of them (one per layer).
    """
    layers = [attn] if isinstance(attn, np.ndarray) and attn.ndim == 4 else list(attn)
    dist = grid_distances(grid)
    out = []
    for a in layers:
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-1] != dist.shape[0] or a.shape[-2] != dist.shape[0]:
            raise DataError(f"attention over {a.shape[-1]} tokens does not fit grid {grid}")
        if np.abs(a.sum(-1) - 1.0).max() > 1e-6:
            raise DataError("attention rows are not normalised")
        per_query = (a * dist).sum(-1)  # B x h x L
        out.append(per_query.mean(axis=(0, 2)))
    return AttnDistanceReport(np.array(out))


def _radius_map(H: int, W: int) -> np.ndarray:
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    return r / r.max()


def fourier_log_amplitude(features, n_bins: int | None = None) -> SpectrumReport:
    """Relative log amplitude of the 2-D DFT, binned by normalised radius.

    Each channel's spectrum is taken relative to its own DC amplitude; bins are
    ``ceil(min(H, W) / 2)`` equal-width rings on (0, 1].  ``features`` is one
    B x C x H x W array or a sequence of them (one per layer).
    """
    maps = [features] if isinstance(features, np.ndarray) and features.ndim == 4 else list(features)
    H, W = np.asarray(maps[0]).shape[-2:]
    if H < 2 or W < 2:
        raise DataError(f"spectrum needs H, W >= 2, got {H} x {W}")
    n_bins = n_bins or int(np.ceil(min(H, W) / 2))
    r = _radius_map(H, W)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.searchsorted(edges, r, side="left") - 1, 0, n_bins - 1)
    which[0, 0] = -1
    centers = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    for f in maps:
        amp = np.abs(np.fft.fft2(np.asarray(f, dtype=np.float64), axes=(-2, -1)))
        rel = np.log(amp + EPS) - np.log(amp[..., :1, :1] + EPS)
        rel = rel.reshape(-1, H, W).mean(axis=0)
        vals = [0.0]
        for b in range(n_bins):
            sel = which == b
            vals.append(float(rel[sel].mean()) if sel.any() else float("nan"))
        rows.append(vals)
    values = np.array(rows)
    return SpectrumReport(np.concatenate([[0.0], centers]), values[0] if len(maps) == 1 else values)


def expert_utilization(decisions: Iterable, n_experts: int | None = None) -> UtilizationHistogram:
    """Selection counts per expert from a gate log.

    Items are ``GateDecision`` objects or ``(layer, proj, GateDecision)``
    tuples as recorded by the encoder.
    """
    per_layer: dict = {}
    total = None
    for item in decisions:
        key, dec = ("all", item) if not isinstance(item, tuple) else (item[:-1], item[-1])
        counts = dec.selected.sum(axis=0)
        if n_experts is not None and counts.size != n_experts:
            raise DataError(f"decision scores {counts.size} experts, expected {n_experts}")
        per_layer[key] = per_layer.get(key, 0) + counts
        total = counts.copy() if total is None else total + counts
    if total is None:
        total = np.zeros(n_experts or 0, dtype=int)
    return UtilizationHistogram(total, per_layer)


def write_report_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale, min-max scaled."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise DataError(f"{path} is not a binary PGM file")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
