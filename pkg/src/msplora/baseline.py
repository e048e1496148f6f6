"""Plain per-layer LoRA on the same projections, used as the comparison method."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import linalg as la
from .linalg import Matrix, Tape
from .pyramid import DEFAULT_KINDS, DEFAULT_SIGMA, ConfigError, LoraPair


@dataclass
class LoraAdapterSet:
    n_layers: int
    d_model: int
    rank: int
    kinds: tuple[str, ...] = DEFAULT_KINDS
    sigma: float = DEFAULT_SIGMA
    seed: int = 0
    pairs: dict[tuple[int, str], LoraPair] = field(default_factory=dict)

    method = "lora"

    def _check(self, layer: int, kind: str) -> None:
        if kind not in self.kinds:
            raise KeyError(f"unknown projection kind {kind!r}; registered: {list(self.kinds)}")
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.n_layers})")

    def delta_for_layer(self, layer: int, kind: str, tape: Tape | None = None) -> Matrix:
        self._check(layer, kind)
        pair = self.pairs[layer, kind]
        a, b = pair.A, pair.B
        if tape is not None:
            a = tape.param(f"layer/{layer:03d}/{kind}/A", a)
            b = tape.param(f"layer/{layer:03d}/{kind}/B", b)
        return la.matmul(a, b)

    def trainable_parameters(self) -> list[tuple[str, Matrix]]:
        out = []
        for layer in range(self.n_layers):
            for kind in self.kinds:
                p = self.pairs[layer, kind]
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
            "rank": self.rank,
            "kinds": list(self.kinds),
            "seed": self.seed,
            "sigma": self.sigma,
        }


def build_lora(
    n_layers: int,
    d_model: int,
    rank: int,
    seed: int = 0,
    sigma: float = DEFAULT_SIGMA,
    kinds: tuple[str, ...] = DEFAULT_KINDS,
) -> LoraAdapterSet:
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    rng = la.make_rng(seed)
    s = LoraAdapterSet(n_layers, d_model, rank, tuple(kinds), sigma, seed)
    for layer in range(n_layers):
        for kind in kinds:
            s.pairs[layer, kind] = LoraPair.init(d_model, d_model, rank, sigma, rng)
    return s
