"""Collapse diagnostics, linear probing, and the normalization ablation grid."""
from __future__ import annotations

import csv
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_overrides, preset
from .data import Dataset, normalize
from .model import NetworkAssembly, build
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class CollapseReport:
    feature_std: float
    relative_std: float
    effective_rank: float
    pairwise_cosine: float
    collapsed: bool

    @property
    def verdict(self) -> str:
        return "collapsed" if self.collapsed else "healthy"


def effective_rank(features: np.ndarray) -> float:
    """exp of the entropy of the normalized covariance spectrum (0 for a
    constant representation)."""
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / len(features)
    eig = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = eig.sum()
    if total <= 0:
        return 0.0
    p = eig[eig > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def mean_pairwise_cosine(features: np.ndarray) -> float:
    """Mean cosine over distinct pairs. All-zero rows are treated as one
    shared direction, so a constant zero representation scores 1."""
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    unit = np.where(norms > 0, features / np.where(norms > 0, norms, 1.0), 0.0)
    zero = (norms[:, 0] == 0)
    if zero.any():
        pad = np.zeros((len(features), 1))
        pad[zero, 0] = 1.0
        unit = np.concatenate([unit, pad], axis=1)
    g = unit @ unit.T
    n = len(features)
    return float((g.sum() - np.trace(g)) / (n * (n - 1)))


def collapse_metrics(features: np.ndarray, std_threshold: float = 1e-3, cos_threshold: float = 0.99) -> CollapseReport:
    """Collapse diagnostics for an (N, D) batch of representations.

    ``relative_std`` is sqrt(total variance / mean squared norm): rotation
    invariant and scale free. The verdict is ``collapsed`` when it falls below
    ``std_threshold`` and the mean pairwise cosine exceeds ``cos_threshold``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("collapse_metrics needs an (N, D) batch with N >= 2")
    d = f.shape[1]
    total_var = float(f.var(axis=0).sum())
    feature_std = math.sqrt(total_var / d)
    mean_sq = float((f * f).sum(axis=1).mean())
    relative = math.sqrt(total_var / mean_sq) if mean_sq > 0 else 0.0
    cos = mean_pairwise_cosine(f)
    return CollapseReport(
        feature_std=feature_std,
        relative_std=relative,
        effective_rank=effective_rank(f),
        pairwise_cosine=cos,
        collapsed=relative < std_threshold and cos > cos_threshold,
    )


# -- linear probe -------------------------------------------------------------
@dataclass
class ProbeResult:
    train_acc: float
    test_acc: float
    chance: float
    n_test: int

    @property
    def stderr(self) -> float:
        """Binomial standard error of an accuracy at chance level."""
        return math.sqrt(self.chance * (1 - self.chance) / self.n_test)

    def within_chance(self, k: float = 3.0) -> bool:
        return abs(self.test_acc - self.chance) <= k * self.stderr


def encode(assembly: NetworkAssembly, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Encoder outputs in eval mode (BN uses running statistics), no graph."""
    was_training = assembly.training
    assembly.eval()
    try:
        with no_grad():
            parts = [assembly.represent(Tensor(normalize(images[i : i + batch]))).data for i in range(0, len(images), batch)]
    finally:
        assembly.train(was_training)
    return np.concatenate(parts) if parts else np.zeros((0, assembly.encoder.out_dim))


def probe_features(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray, c: float = 1.0) -> ProbeResult:
    """Multinomial logistic regression on fixed features.

    Features are divided by one global scalar, their uncentered RMS. A
    representation that is a constant plus tiny variations therefore stays
    tiny after scaling and cannot be read out.
    """
    from sklearn.linear_model import LogisticRegression

    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise ValueError("feature and label counts differ")
    scale = math.sqrt(float((train_x * train_x).mean()))
    scale = scale if scale > 0 else 1.0
    clf = LogisticRegression(C=c, max_iter=2000)
    xs, ts = train_x / scale, test_x / scale
    if len(np.unique(train_y)) < 2:
        pred_train = np.full(len(train_y), train_y[0])
        pred_test = np.full(len(test_y), train_y[0])
    else:
        clf.fit(xs, train_y)
        pred_train, pred_test = clf.predict(xs), clf.predict(ts)
    counts = np.bincount(test_y)
    return ProbeResult(
        train_acc=float((pred_train == train_y).mean()),
        test_acc=float((pred_test == test_y).mean()),
        chance=float(counts.max() / counts.sum()),
        n_test=len(test_y),
    )


def linear_probe(assembly: NetworkAssembly, train: Dataset, test: Dataset, c: float = 1.0) -> ProbeResult:
    """Linear readout accuracy of the frozen encoder."""
    return probe_features(encode(assembly, train.images), train.labels, encode(assembly, test.images), test.labels, c)


def batch_independent(assembly: NetworkAssembly, x: np.ndarray, replacement: np.ndarray) -> bool:
    """Dynamic check: in training mode, does sample 0's output (prediction when
    a predictor exists, else projection) survive replacing sample 1 unchanged
    (exact equality)?"""
    def out(batch):
        z = assembly.project(Tensor(batch))
        return (assembly.predict(z) if assembly.has_predictor else z).data[0].copy()

    assembly.train()
    with no_grad():
        a = out(x)
        x2 = x.copy()
        x2[1] = replacement
        b = out(x2)
    return bool(np.array_equal(a, b))


def uses_batch_statistics(assembly: NetworkAssembly) -> bool:
    return assembly.uses_batch_statistics()


# -- ablation grid ----------------------------------------------------------------
@dataclass
class Cell:
    cell_id: str
    config: ExperimentConfig


@dataclass
class AblationGrid:
    cells: list[Cell] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.cell_id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise ValueError("grid cell ids must be unique")
        keys = [(c.config.hash(), c.config.seed) for c in self.cells]
        if len(set(keys)) != len(keys):
            raise ValueError("grid cells must be unique configurations")

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)


def _norm_label(kind: str) -> str:
    return "-" if kind == "none" else kind.upper()


# Columns of the per-component ablation: (encoder, projector, predictor).
TABLE1_BYOL = [
    ("bn", "bn", "bn"), ("bn", "bn", "none"), ("bn", "none", "bn"), ("bn", "none", "none"),
    ("ln", "ln", "ln"), ("ln", "ln", "none"), ("ln", "none", "ln"), ("ln", "none", "none"),
    ("none", "bn", "bn"), ("none", "bn", "none"), ("none", "ln", "ln"), ("none", "ln", "none"),
    ("none", "none", "bn"), ("none", "none", "ln"), ("none", "none", "none"),
]
TABLE1_SIMCLR = [
    ("bn", "bn"), ("bn", "none"), ("ln", "ln"), ("ln", "none"),
    ("none", "bn"), ("none", "ln"), ("none", "none"),
]
TABLE2 = ("vanilla-bn", "no-bn", "modified-init", "gn-ws")


def table1_grid(seeds=(0,), **overrides) -> AblationGrid:
    cells = []
    for seed in seeds:
        for enc, proj, pred in TABLE1_BYOL:
            cfg = apply_overrides(preset("vanilla-bn"), {
                **overrides, "encoder_norm": enc, "projector_norm": proj, "predictor_norm": pred, "seed": seed,
                "name": f"byol-{enc}-{proj}-{pred}",
            })
            cells.append(Cell(f"byol/{_norm_label(enc)}/{_norm_label(proj)}/{_norm_label(pred)}/s{seed}", cfg))
        for enc, proj in TABLE1_SIMCLR:
            cfg = apply_overrides(preset("simclr-bn"), {
                **overrides, "encoder_norm": enc, "projector_norm": proj, "seed": seed,
                "name": f"simclr-{enc}-{proj}",
            })
            cells.append(Cell(f"simclr/{_norm_label(enc)}/{_norm_label(proj)}/s{seed}", cfg))
    return AblationGrid(cells)


def table2_grid(seeds=(0,), **overrides) -> AblationGrid:
    cells = [
        Cell(f"{name}/s{seed}", preset(name, **{**overrides, "seed": seed}))
        for seed in seeds
        for name in TABLE2
    ]
    return AblationGrid(cells)


RESULT_COLUMNS = [
    "cell", "config_hash", "seed", "objective", "encoder_norm", "projector_norm", "predictor_norm",
    "ws", "init", "status", "probe_acc", "chance", "verdict", "feature_std", "relative_std",
    "effective_rank", "pairwise_cosine", "uses_batch_stats", "batch_independent", "final_loss",
]


def run_cell(cell: Cell) -> dict:
    """Train one cell and evaluate it. Failures become the row's status."""
    from .training import DivergenceError, Trainer

    cfg = cell.config
    row = {
        "cell": cell.cell_id, "config_hash": cfg.hash(), "seed": cfg.seed, "objective": cfg.objective,
        "encoder_norm": cfg.encoder_norm, "projector_norm": cfg.projector_norm,
        "predictor_norm": cfg.predictor_norm if cfg.objective == "byol" else "none",
        "ws": cfg.ws, "init": cfg.init,
    }
    try:
        trainer = Trainer(cfg)
        row["uses_batch_stats"] = uses_batch_statistics(trainer.state.online)
        imgs = normalize(trainer.train_data.images[:4])
        row["batch_independent"] = batch_independent(trainer.state.online.clone(), imgs, imgs[2])
        history = trainer.fit()
        feats = trainer.eval_features(trainer.test_data.images[: cfg.eval_size])
        rep = collapse_metrics(feats, cfg.collapse_std, cfg.collapse_cos)
        probe = trainer.probe()
        row.update(
            status="ok", probe_acc=probe.test_acc, chance=probe.chance, verdict=rep.verdict,
            feature_std=rep.feature_std, relative_std=rep.relative_std, effective_rank=rep.effective_rank,
            pairwise_cosine=rep.pairwise_cosine, final_loss=history[-1].loss,
        )
    except DivergenceError as exc:
        row.update(status=f"diverged at epoch {exc.epoch}", verdict="diverged")
    except Exception as exc:  # a failing cell must not stop the grid
        log.error("cell %s failed: %s", cell.cell_id, traceback.format_exc())
        row.update(status=f"error: {exc}")
    return row


def run_grid(grid: AblationGrid, out_dir: str | Path | None = None, workers: int = 1) -> list[dict]:
    """Run every cell (in ``workers`` processes when > 1) and, given
    ``out_dir``, write ``results.csv`` and the long-format ``results_long.csv``."""
    if not grid.cells:
        raise ValueError("empty grid")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, grid.cells))
    else:
        rows = [run_cell(c) for c in grid.cells]
    if out_dir is not None:
        write_results(rows, Path(out_dir))
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in RESULT_COLUMNS])
    metrics = ("probe_acc", "feature_std", "relative_std", "effective_rank", "pairwise_cosine", "final_loss")
    with open(out_dir / "results_long.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "config_hash", "seed", "metric", "value"])
        for r in rows:
            for k in metrics:
                if r.get(k) is not None:
                    w.writerow([r["cell"], r["config_hash"], r["seed"], k, _cell(r[k])])
