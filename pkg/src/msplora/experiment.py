"""Experiment configs, single runs, and method/seed sweeps with on-disk artifacts."""

from __future__ import annotations

import csv
import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis
from .baseline import build_lora
from .model import FrozenBackbone, TinyTransformerConfig
from .pyramid import ConfigError, RankSchedule, build_pyramid
from .serialize import dump, save_adapters
from .trainer import (LOG_FIELDS, SyntheticTask, TrainConfig, TrainLog, evaluate, pretrain_backbone,
                      train)

METHODS = ("msplora", "lora")

# offsets keep the backbone, task, adapter and optimizer streams independent under one seed
TASK_SEED_OFFSET = 1
ADAPTER_SEED_OFFSET = 2
TRAIN_SEED_OFFSET = 3
PRETRAIN_SEED_OFFSET = 1000


class RunExistsError(FileExistsError):
    pass


def _known(cls, data: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    return data


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 6
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    vocab: int = 32
    seq_len: int = 16


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    n_train: int = 4096
    n_eval: int = 256
    teacher_scale: float = 4.0


@dataclass(frozen=True)
class TrainSpec:
    lr_init: float = 1e-2
    epochs: int = 3
    batch_size: int = 16
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "linear"
    clip_norm: float | None = None


@dataclass(frozen=True)
class PretrainSpec:
    task: str = "reverse"
    epochs: int = 3
    lr: float = 1e-2
    n_train: int = 4096


@dataclass(frozen=True)
class ExperimentConfig:
    """One training run. ``rank`` is r_high for the pyramid and r0 for plain LoRA."""

    name: str = "run"
    method: str = "msplora"
    rank: int = 8
    schedule: tuple[int, int, int] | None = None
    sigma: float = 0.5
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    pretrain: PretrainSpec | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "msplora":
            if self.schedule is None:
                RankSchedule.geometric(self.rank)
            else:
                RankSchedule(*self.schedule)
        elif self.schedule is not None:
            raise ConfigError("schedule applies to the msplora method only")
        if self.rank < 1 or self.rank > self.model.d_model:
            raise ConfigError(f"rank {self.rank} must lie in [1, d_model={self.model.d_model}]")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        try:
            self.model_config()
            self.task_spec()
            if self.pretrain is not None:
                SyntheticTask(self.pretrain.task)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = dict(_known(cls, data, "experiment config"))
        if "model" in data:
            data["model"] = ModelSpec(**_known(ModelSpec, data["model"], "model"))
        if "task" in data:
            data["task"] = TaskSpec(**_known(TaskSpec, data["task"], "task"))
        if "train" in data:
            t = dict(_known(TrainSpec, data["train"], "train"))
            if "betas" in t:
                t["betas"] = tuple(t["betas"])
            data["train"] = TrainSpec(**t)
        if data.get("pretrain") is not None:
            data["pretrain"] = PretrainSpec(**_known(PretrainSpec, data["pretrain"], "pretrain"))
        if data.get("schedule") is not None:
            data["schedule"] = tuple(data["schedule"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        if self.schedule is not None:
            d["schedule"] = list(self.schedule)
        return d

    def model_config(self) -> TinyTransformerConfig:
        return TinyTransformerConfig(**asdict(self.model), seed=self.seed)

    def task_spec(self) -> SyntheticTask:
        return SyntheticTask(self.task.kind, self.seed + TASK_SEED_OFFSET, self.task.n_train,
                             self.task.n_eval, self.task.teacher_scale)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.lr_init, max(t.epochs, 1), t.batch_size, t.weight_decay, tuple(t.betas),
                           t.eps, t.schedule, t.clip_norm, self.seed + TRAIN_SEED_OFFSET)

    def build_adapters(self):
        m = self.model
        seed = self.seed + ADAPTER_SEED_OFFSET
        if self.method == "lora":
            return build_lora(m.n_layers, m.d_model, self.rank, seed, self.sigma)
        schedule = RankSchedule(*self.schedule) if self.schedule is not None else None
        return build_pyramid(m.n_layers, m.d_model, self.rank, seed, self.sigma, schedule=schedule)


_BACKBONE_CACHE: dict[str, FrozenBackbone] = {}


def prepare_backbone(cfg: ExperimentConfig) -> FrozenBackbone:
    """Random backbone for ``cfg.seed``, optionally pretrained. Cached per process."""
    key = json.dumps([asdict(cfg.model), cfg.seed, None if cfg.pretrain is None else asdict(cfg.pretrain)])
    hit = _BACKBONE_CACHE.get(key)
    if hit is None:
        hit = FrozenBackbone.init(cfg.model_config())
        if cfg.pretrain is not None:
            p = cfg.pretrain
            task = SyntheticTask(p.task, cfg.seed + PRETRAIN_SEED_OFFSET, p.n_train)
            pretrain_backbone(hit, task, TrainConfig(lr_init=p.lr, epochs=p.epochs, seed=cfg.seed))
        _BACKBONE_CACHE[key] = hit
    return hit.copy()


@dataclass
class RunResult:
    config: ExperimentConfig
    adapters: object
    log: TrainLog
    snapshots: list
    initial: dict
    final: dict
    backbone_checksum: str

    def summary(self) -> dict:
        return {
            "name": self.config.name,
            "method": self.config.method,
            "seed": self.config.seed,
            "task": self.config.task.kind,
            "n_params": self.adapters.n_params(),
            "initial_eval": self.initial,
            "final_eval": self.final,
            "loss_ratio": self.final["loss"] / self.initial["loss"],
            "train_steps": len(self.log.rows),
            "backbone_checksum": self.backbone_checksum,
            "kl_mean_offdiag": layer_kl(self.adapters).mean_off_diagonal(),
        }


def layer_kl(adapters) -> analysis.DivergenceMatrix:
    mode = "msplora-layer-tier" if adapters.method == "msplora" else "plain-lora"
    return analysis.layer_divergence_matrix(adapters, mode)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    backbone = prepare_backbone(cfg)
    checksum = backbone.checksum()
    adapters = cfg.build_adapters()
    task = cfg.task_spec()
    eval_data = task.generate(backbone, "eval")
    initial = evaluate(backbone, adapters, task, eval_data)
    snapshots = []

    def snap(epoch, ad):
        snapshots.append(_clone(ad))

    if cfg.train.epochs > 0:
        log = train(backbone, adapters, task, cfg.train_config(), snapshot=snap)
    else:
        log = TrainLog()
        snap(0, adapters)
    final = evaluate(backbone, adapters, task, eval_data)
    if backbone.checksum() != checksum:
        raise RuntimeError("backbone weights changed during adapter training")
    return RunResult(cfg, adapters, log, snapshots, initial, final, checksum)


def _clone(adapters):
    from .serialize import adapters_from_dict, adapters_to_dict
    return adapters_from_dict(adapters_to_dict(adapters))


# ---------------------------------------------------------------------------
# artifacts


def fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_log_csv(log: TrainLog, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f for f in LOG_FIELDS if f != "epoch"])
        for r in log.rows:
            w.writerow([fmt(r[f]) for f in LOG_FIELDS if f != "epoch"])


def prepare_dir(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise RunExistsError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)


def write_run(result: RunResult, run_dir: Path, force: bool = False) -> Path:
    run_dir = Path(run_dir)
    prepare_dir(run_dir, force)
    dump(result.config.to_dict(), run_dir / "effective-config.json")
    write_log_csv(result.log, run_dir / "train_log.csv")
    save_adapters(result.adapters, run_dir / "adapters.json")
    snap_dir = run_dir / "snapshots"
    snap_dir.mkdir()
    for epoch, s in enumerate(result.snapshots):
        save_adapters(s, snap_dir / f"epoch_{epoch:03d}.json")
    dump(result.summary(), run_dir / "summary.json")
    return run_dir


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepConfig:
    base: dict
    methods: list[dict]
    seeds: list[int]
    name: str = "sweep"

    @classmethod
    def from_dict(cls, data: dict) -> SweepConfig:
        _known(cls, data, "sweep config")
        return cls(base=data.get("base", {}), methods=list(data.get("methods", [])),
                   seeds=[int(s) for s in data.get("seeds", [])], name=data.get("name", "sweep"))

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for m in self.methods:
            for seed in self.seeds:
                d = {**self.base, **m, "seed": seed}
                d["name"] = f"{d.get('method', 'msplora')}-r{d.get('rank', 8)}-s{seed}"
                out.append(ExperimentConfig.from_dict(d))
        return out


COMPARE_FIELDS = ("method", "rank", "seed", "n_params", "initial_loss", "final_loss", "loss_ratio",
                  "eval_accuracy", "kl_mean_offdiag")


def _row(result: RunResult) -> dict:
    s = result.summary()
    return {
        "method": s["method"], "rank": result.config.rank, "seed": s["seed"], "n_params": s["n_params"],
        "initial_loss": s["initial_eval"]["loss"], "final_loss": s["final_eval"]["loss"],
        "loss_ratio": s["loss_ratio"], "eval_accuracy": s["final_eval"]["accuracy"],
        "kl_mean_offdiag": s["kl_mean_offdiag"],
    }


def _run_cell(cfg: ExperimentConfig) -> RunResult:
    return run_experiment(cfg)


def run_sweep(sweep: SweepConfig, out_dir: Path, force: bool = False, workers: int = 1) -> dict:
    """Run every (method, seed) cell; write per-cell run dirs plus compare.csv/compare.json."""
    out_dir = Path(out_dir)
    prepare_dir(out_dir, force)
    cells = sweep.cells()
    if workers > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    for r in results:
        write_run(r, out_dir / r.config.name)
        rows.append(_row(r))
    methods = sorted({r["method"] for r in rows}, key=METHODS.index)
    groups = []
    for method in methods:
        sub = [r for r in rows if r["method"] == method]
        entry = {"method": method, "n_params": sub[0]["n_params"], "runs": len(sub)}
        for key in ("final_loss", "loss_ratio", "eval_accuracy", "kl_mean_offdiag"):
            vals = np.array([r[key] for r in sub])
            entry[key + "_mean"] = float(vals.mean())
            entry[key + "_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        groups.append(entry)
    report = {"name": sweep.name, "rows": rows, "summary": groups}
    if set(methods) == set(METHODS):
        p = {g["method"]: g["n_params"] for g in groups}
        report["param_ratio"] = p["msplora"] / p["lora"]
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_FIELDS)
        for r in rows:
            w.writerow([fmt(r[f]) for f in COMPARE_FIELDS])
    dump(report, out_dir / "compare.json")
    (out_dir / "compare.txt").write_text(format_compare_table(report) + "\n")
    return report


def format_compare_table(report: dict) -> str:
    groups = report["summary"]
    if not groups:
        return "(empty sweep: no runs)"
    lines = [f"{'method':<8} {'params':>8} {'final loss':>18} {'eval acc':>16} {'layer KL':>18}"]
    for g in groups:
        lines.append(
            f"{g['method']:<8} {g['n_params']:>8d} "
            f"{g['final_loss_mean']:>9.4f}±{g['final_loss_sd']:<8.4f}"
            f"{g['eval_accuracy_mean']:>8.4f}±{g['eval_accuracy_sd']:<7.4f}"
            f"{g['kl_mean_offdiag_mean']:>9.5f}±{g['kl_mean_offdiag_sd']:<8.5f}"
        )
    if "param_ratio" in report:
        lines.append(f"param ratio msplora/lora = {report['param_ratio']:.6f}")
    for r in report["rows"]:
        lines.append(f"  {r['method']:<8} seed={r['seed']:<3} loss={r['final_loss']:.4f} "
                     f"acc={r['eval_accuracy']:.4f} loss/initial={r['loss_ratio']:.4f}")
    return "\n".join(lines)


def finite_or_raise(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise FloatingPointError(f"{what} is not finite")
    return x
