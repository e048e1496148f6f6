"""Singular-value diagnostics for trained adapters.

* :func:`effective_rank` -- share of the singular-value mass held by the top ``k`` values.
* :func:`tier_spectrum_trace` -- per-tier, per-epoch mean top-k spectra (heatmap data).
* :func:`spectral_kl` / :func:`layer_divergence_matrix` -- KL divergence between
  normalised spectra of different layers' updates, as a redundancy measure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import Matrix, svd_values
from .pyramid import GROUPS, TIERS, PyramidAdapterSet

DEFAULT_EPSILON = 1e-10
MODES = ("msplora-layer-tier", "plain-lora")


@dataclass
class SpectrumReport:
    source: str
    singular_values: np.ndarray
    m_eff: dict[int, float]
    degenerate: bool = False  # all singular values zero; every M_eff-k reported as 1

    @property
    def M(self) -> int:
        return len(self.singular_values)


def effective_rank(m: Matrix | np.ndarray, ks: Sequence[int], source: str = "") -> SpectrumReport:
    sv = svd_values(m)
    M = len(sv)
    for k in ks:
        if not 1 <= k <= M:
            raise ValueError(f"k={k} outside [1, {M}]")
    total = float(sv.sum())
    if total == 0.0:
        return SpectrumReport(source, sv, {k: 1.0 for k in ks}, degenerate=True)
    csum = np.cumsum(sv)
    m_eff = {k: float(csum[k - 1] / total) for k in ks}
    if M in m_eff:
        m_eff[M] = 1.0  # exact, independent of summation order
    return SpectrumReport(source, sv, m_eff)


def tier_deltas(adapters: PyramidAdapterSet) -> dict[str, list[tuple[str, Matrix]]]:
    """Each distinct tier contribution ``A @ B`` once, labelled ``tier/owner/kind``."""
    out: dict[str, list[tuple[str, Matrix]]] = {t: [] for t in TIERS}
    for kind in adapters.kinds:
        out["global"].append((f"global/{kind}", adapters.tier_delta(0, kind, "global")))
    for group in GROUPS:
        first = adapters.partition.layers_in(group)[0]
        for kind in adapters.kinds:
            out["mid"].append((f"mid/{group}/{kind}", adapters.tier_delta(first, kind, "mid")))
    for layer in range(adapters.n_layers):
        for kind in adapters.kinds:
            out["layer"].append((f"layer/{layer:03d}/{kind}", adapters.tier_delta(layer, kind, "layer")))
    return out


def _top_k(sv: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(k)
    n = min(k, len(sv))
    out[:n] = sv[:n]
    return out


def tier_spectrum(adapters: PyramidAdapterSet, top_k: int = 8) -> dict[str, np.ndarray]:
    """Position-wise mean of the members' descending top-k singular values, per tier."""
    return {
        tier: np.mean([_top_k(svd_values(m), top_k) for _, m in members], axis=0)
        for tier, members in tier_deltas(adapters).items()
    }


def tier_spectrum_trace(snapshots: Sequence[PyramidAdapterSet], top_k: int = 8) -> dict[str, np.ndarray]:
    """``{tier: (len(snapshots), top_k) array}``; row ``e`` comes from ``snapshots[e]``."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    rows = [tier_spectrum(s, top_k) for s in snapshots]
    return {tier: np.vstack([r[tier] for r in rows]) for tier in TIERS}


def tier_effective_rank(adapters: PyramidAdapterSet, k: int) -> dict[str, float]:
    """Mean M_eff-k over the members of each tier."""
    return {
        tier: float(np.mean([effective_rank(m, [k]).m_eff[k] for _, m in members]))
        for tier, members in tier_deltas(adapters).items()
    }


def spectral_kl(sv_i: Sequence[float], sv_j: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> float:
    """KL divergence between two spectra after adding ``epsilon`` and normalising to sum 1."""
    a = np.asarray(sv_i, dtype=np.float64)
    b = np.asarray(sv_j, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"spectra must be 1-D and equal length, got {a.shape} and {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("singular values must be non-negative")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    a = a + epsilon
    b = b + epsilon
    if a.sum() == 0 or b.sum() == 0:
        raise ValueError("all-zero spectrum cannot be normalised; use epsilon > 0")
    p = a / a.sum()
    q = b / b.sum()
    nz = p > 0
    if (q[nz] == 0).any():
        return float("inf")
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


@dataclass
class DivergenceMatrix:
    d_kl: np.ndarray
    epsilon: float
    mode: str
    spectra: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    truncate: int | None = None

    @property
    def n(self) -> int:
        return self.d_kl.shape[0]

    def mean_off_diagonal(self) -> float:
        n = self.n
        if n < 2:
            return 0.0
        return float((self.d_kl.sum() - np.trace(self.d_kl)) / (n * (n - 1)))


def layer_spectra(adapters, mode: str) -> tuple[np.ndarray, int]:
    """Per-layer spectrum (mean over projection kinds) and the adapter rank behind it."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "msplora-layer-tier":
        if getattr(adapters, "method", None) != "msplora":
            raise ValueError("msplora-layer-tier mode needs a pyramid adapter set")
        rank = adapters.schedule.r_low
        delta = lambda l, k: adapters.tier_delta(l, k, "layer")  # noqa: E731
    else:
        if getattr(adapters, "method", None) != "lora":
            raise ValueError("plain-lora mode needs a plain LoRA adapter set")
        rank = adapters.rank
        delta = adapters.delta_for_layer
    rows = [np.mean([svd_values(delta(l, k)) for k in adapters.kinds], axis=0)
            for l in range(adapters.n_layers)]
    return np.vstack(rows), rank


def layer_divergence_matrix(adapters, mode: str, epsilon: float = DEFAULT_EPSILON,
                            truncate: bool = True) -> DivergenceMatrix:
    """All-pairs ``D_KL(layer i || layer j)`` of per-layer update spectra.

    With ``truncate`` (default) spectra keep only their leading ``rank`` entries,
    the positions a rank-``r`` update can fill; ``epsilon`` smoothing applies either way.
    """
    spectra, rank = layer_spectra(adapters, mode)
    keep = rank if truncate else None
    s = spectra[:, :keep] if keep else spectra
    n = s.shape[0]
    grid = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                grid[i, j] = spectral_kl(s[i], s[j], epsilon)
    return DivergenceMatrix(grid, epsilon, mode, spectra, keep)


def divergence_difference(msplora: DivergenceMatrix | np.ndarray, lora: DivergenceMatrix | np.ndarray) -> np.ndarray:
    a = msplora.d_kl if isinstance(msplora, DivergenceMatrix) else np.asarray(msplora)
    b = lora.d_kl if isinstance(lora, DivergenceMatrix) else np.asarray(lora)
    if a.shape != b.shape:
        raise ValueError(f"divergence grids differ in size: {a.shape} vs {b.shape}")
    return a - b


# ---------------------------------------------------------------------------
# emission


def write_grid_csv(grid: np.ndarray, path: str | Path) -> None:
    """Dense square grid with layer indices as header row and first column.

    Values use ``repr`` so re-reading yields bit-identical floats.
    """
    n = grid.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [str(j) for j in range(n)])
        for i in range(n):
            w.writerow([str(i)] + [repr(float(x)) for x in grid[i]])


def read_grid_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in row[1:]] for row in rows[1:]], dtype=np.float64).reshape(
        len(rows) - 1, len(rows[0]) - 1)


def write_trace_csv(trace: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tier", "epoch", "k", "value"])
        for tier in [t for t in TIERS if t in trace]:
            for epoch, row in enumerate(trace[tier]):
                for k, v in enumerate(row, start=1):
                    w.writerow([tier, epoch, k, repr(float(v))])


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault(row["tier"], {})[int(row["epoch"]), int(row["k"])] = float(row["value"])
    out = {}
    for tier, vals in cells.items():
        epochs = 1 + max(e for e, _ in vals)
        ks = max(k for _, k in vals)
        arr = np.zeros((epochs, ks))
        for (e, k), v in vals.items():
            arr[e, k - 1] = v
        out[tier] = arr
    return out


def write_sidecar(meta: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
