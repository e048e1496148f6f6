"""Three-tier pyramid of low-rank adapters: global, depth-group and per-layer pairs.

For layer ``l`` and projection ``kind`` the weight update is

    delta = A_g @ B_g + A_m @ B_m + A_l @ B_l

where the global pair is shared by every layer, the mid pair by every layer in
the same depth third, and the layer pair belongs to ``l`` alone. Ranks decay
geometrically (r, r/2, r/4) by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg as la
from .linalg import Matrix, ShapeError, Tape

GROUPS = ("lower", "middle", "upper")
TIERS = ("global", "mid", "layer")
DEFAULT_KINDS = ("query", "value")
DEFAULT_SIGMA = 0.02


class ConfigError(ValueError):
    """Invalid adapter configuration (ranks, depth, projection kinds)."""


@dataclass
class LoraPair:
    """One ``A @ B`` factor pair. ``A`` is ``d_in x r`` and ``B`` is ``r x d_out``."""

    A: Matrix
    B: Matrix
    sigma: float = DEFAULT_SIGMA

    @property
    def rank(self) -> int:
        return self.A.cols

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, sigma: float, rng: np.random.Generator) -> LoraPair:
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigError(f"rank {rank} must lie in [1, min({d_in}, {d_out})]")
        return cls(Matrix.normal(d_in, rank, sigma, rng), Matrix.zeros(rank, d_out), sigma)

    def delta(self) -> Matrix:
        return la.matmul(self.A, self.B)

    @property
    def n_params(self) -> int:
        return self.A.data.size + self.B.data.size


@dataclass(frozen=True)
class RankSchedule:
    r_high: int
    r_mid: int
    r_low: int

    def __post_init__(self):
        if not self.r_high >= self.r_mid >= self.r_low >= 1:
            raise ConfigError(
                f"rank schedule must satisfy r_high >= r_mid >= r_low >= 1, got "
                f"({self.r_high}, {self.r_mid}, {self.r_low})"
            )

    @classmethod
    def geometric(cls, r_high: int) -> RankSchedule:
        """Halve the rank at each tier: (r, r/2, r/4)."""
        if r_high < 4 or r_high % 4:
            lo = 4 * (r_high // 4)
            hint = "4" if lo < 4 else f"{lo} or {lo + 4}"
            raise ConfigError(
                f"r_high={r_high} is not a positive multiple of 4; geometric decay "
                f"r_mid = r_high/2, r_low = r_mid/2 needs integer ranks (try {hint})"
            )
        return cls(r_high, r_high // 2, r_high // 4)

    def rank_of(self, tier: str) -> int:
        return {"global": self.r_high, "mid": self.r_mid, "layer": self.r_low}[tier]

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.r_high, self.r_mid, self.r_low)


@dataclass(frozen=True)
class LayerPartition:
    n_layers: int
    bounds: tuple[tuple[int, int], ...]  # half-open [start, stop) per group

    def group_of(self, layer: int) -> str:
        for name, (lo, hi) in zip(GROUPS, self.bounds):
            if lo <= layer < hi:
                return name
        raise IndexError(f"layer {layer} outside [0, {self.n_layers})")

    def layers_in(self, group: str) -> range:
        lo, hi = self.bounds[GROUPS.index(group)]
        return range(lo, hi)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in self.bounds)


def partition_layers(n_layers: int) -> LayerPartition:
    """Split ``n_layers`` into contiguous lower/middle/upper thirds.

    Extra layers go to the lower group first, then the middle one.
    """
    if n_layers < 3:
        raise ConfigError(f"need at least 3 layers to form three depth groups, got {n_layers}")
    lower = math.ceil(n_layers / 3)
    middle = math.ceil((n_layers - lower) / 2)
    return LayerPartition(n_layers, ((0, lower), (lower, lower + middle), (lower + middle, n_layers)))


@dataclass(frozen=True)
class ParamBudget:
    n_layers: int
    d_model: int
    r0: int
    lora_total: int
    msplora_total: int

    @property
    def ratio(self) -> float:
        return self.msplora_total / self.lora_total


def count_params(n_layers: int, d_model: int, r0: int) -> ParamBudget:
    """Closed-form trainable counts for q/v adapters: plain LoRA vs. the pyramid."""
    if min(n_layers, d_model, r0) < 1:
        raise ConfigError("n_layers, d_model and r0 must all be >= 1")
    return ParamBudget(
        n_layers, d_model, r0,
        lora_total=4 * n_layers * r0 * d_model,
        msplora_total=(10 + n_layers) * r0 * d_model,
    )


@dataclass
class PyramidAdapterSet:
    schedule: RankSchedule
    partition: LayerPartition
    d_model: int
    kinds: tuple[str, ...] = DEFAULT_KINDS
    sigma: float = DEFAULT_SIGMA
    seed: int = 0
    tier_scales: tuple[float, float, float] = (1.0, 1.0, 1.0)
    global_pairs: dict[str, LoraPair] = field(default_factory=dict)
    mid_pairs: dict[tuple[str, str], LoraPair] = field(default_factory=dict)
    layer_pairs: dict[tuple[int, str], LoraPair] = field(default_factory=dict)

    method = "msplora"

    @property
    def n_layers(self) -> int:
        return self.partition.n_layers

    def _check(self, layer: int, kind: str) -> None:
        if kind not in self.kinds:
            raise KeyError(f"unknown projection kind {kind!r}; registered: {list(self.kinds)}")
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.n_layers})")

    def pairs_for(self, layer: int, kind: str) -> dict[str, tuple[str, LoraPair]]:
        """Tier -> (parameter-name prefix, pair) feeding ``(layer, kind)``."""
        self._check(layer, kind)
        group = self.partition.group_of(layer)
        return {
            "global": (f"global/{kind}", self.global_pairs[kind]),
            "mid": (f"mid/{group}/{kind}", self.mid_pairs[group, kind]),
            "layer": (f"layer/{layer:03d}/{kind}", self.layer_pairs[layer, kind]),
        }

    def tier_delta(self, layer: int, kind: str, tier: str, tape: Tape | None = None) -> Matrix:
        prefix, pair = self.pairs_for(layer, kind)[tier]
        a, b = pair.A, pair.B
        if tape is not None:
            a = tape.param(f"{prefix}/A", a)
            b = tape.param(f"{prefix}/B", b)
        out = la.matmul(a, b)
        s = self.tier_scales[TIERS.index(tier)]
        return out if s == 1.0 else la.scale(out, s)

    def delta_for_layer(self, layer: int, kind: str, tape: Tape | None = None) -> Matrix:
        """Summed three-tier update; with ``tape`` every factor becomes a tracked parameter."""
        return la.add_all([self.tier_delta(layer, kind, t, tape) for t in TIERS])

    def trainable_parameters(self) -> list[tuple[str, Matrix]]:
        out = []
        for kind in self.kinds:
            p = self.global_pairs[kind]
            out += [(f"global/{kind}/A", p.A), (f"global/{kind}/B", p.B)]
        for group in GROUPS:
            for kind in self.kinds:
                p = self.mid_pairs[group, kind]
                out += [(f"mid/{group}/{kind}/A", p.A), (f"mid/{group}/{kind}/B", p.B)]
        for layer in range(self.n_layers):
            for kind in self.kinds:
                p = self.layer_pairs[layer, kind]
                out += [(f"layer/{layer:03d}/{kind}/A", p.A), (f"layer/{layer:03d}/{kind}/B", p.B)]
        return out

    def n_params(self) -> int:
        return sum(m.data.size for _, m in self.trainable_parameters())

    @staticmethod
    def tier_of(name: str) -> str:
        return name.split("/", 1)[0]

    def header(self) -> dict:
        return {
            "method": self.method,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "ranks": list(self.schedule.as_tuple()),
            "partition": [list(b) for b in self.partition.bounds],
            "kinds": list(self.kinds),
            "seed": self.seed,
            "sigma": self.sigma,
            "tier_scales": list(self.tier_scales),
        }


def build_pyramid(
    n_layers: int,
    d_model: int,
    r_high: int,
    seed: int = 0,
    sigma: float = DEFAULT_SIGMA,
    kinds: tuple[str, ...] = DEFAULT_KINDS,
    schedule: RankSchedule | None = None,
    tier_scales: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> PyramidAdapterSet:
    """Allocate all tiers with Gaussian ``A`` and zero ``B``.

    ``schedule`` overrides the geometric (r, r/2, r/4) decay, e.g. equal ranks
    for spectrum studies; its ``r_high`` must equal ``r_high``.
    """
    if schedule is None:
        schedule = RankSchedule.geometric(r_high)
    elif schedule.r_high != r_high:
        raise ConfigError(f"schedule r_high={schedule.r_high} disagrees with r_high={r_high}")
    if r_high > d_model:
        raise ConfigError(f"r_high={r_high} exceeds d_model={d_model}")
    if not kinds or len(set(kinds)) != len(kinds):
        raise ConfigError(f"projection kinds must be unique and non-empty, got {kinds}")
    partition = partition_layers(n_layers)
    rng = la.make_rng(seed)
    s = PyramidAdapterSet(schedule, partition, d_model, tuple(kinds), sigma, seed, tuple(tier_scales))
    for kind in kinds:
        s.global_pairs[kind] = LoraPair.init(d_model, d_model, schedule.r_high, sigma, rng)
    for group in GROUPS:
        for kind in kinds:
            s.mid_pairs[group, kind] = LoraPair.init(d_model, d_model, schedule.r_mid, sigma, rng)
    for layer in range(n_layers):
        for kind in kinds:
            s.layer_pairs[layer, kind] = LoraPair.init(d_model, d_model, schedule.r_low, sigma, rng)
    return s


def merge_into_base(adapters, layer: int, kind: str, W: Matrix) -> Matrix:
    """``W + delta``; a fresh copy every call, so merging twice adds the delta twice."""
    delta = adapters.delta_for_layer(layer, kind)
    if delta.shape != W.shape:
        raise ShapeError(f"base weight {W.rows}x{W.cols} does not match delta {delta.rows}x{delta.cols}")
    return Matrix(W.data + delta.data)
