"""BYOL and SimCLR training: schedule, optimizers, target EMA and the loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentationPolicy, augment_batch
from .config import ExperimentConfig
from .data import Dataset, load_datasets, normalize
from .model import NetworkAssembly, build
from .nn import Parameter
from .objectives import byol_loss, infonce_loss
from .tensor import NonFiniteError, Tensor, add, mul, no_grad

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, epoch: int, step: int):
        super().__init__(msg)
        self.epoch = epoch
        self.step = step


# -- learning-rate schedule ------------------------------------------------
@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: float
    total_epochs: int
    steps_per_epoch: int

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return min(int(round(self.warmup_epochs * self.steps_per_epoch)), self.total_steps)


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at the last step."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizers ----------------------------------------------------------------
def _check_grad(g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient")


def sgd_step(theta, grad, lr, momentum=0.0, weight_decay=0.0, buf=None, decay=True):
    """Decoupled weight decay, then heavy-ball momentum. Returns (theta, buf)."""
    _check_grad(np.asarray(grad))
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if decay and weight_decay:
        theta = theta - lr * weight_decay * theta
    buf = grad.copy() if buf is None else momentum * buf + grad
    return theta - lr * buf, buf


def trust_ratio(theta: np.ndarray, grad: np.ndarray, weight_decay: float, trust_coeff: float) -> float:
    """``coeff * |theta| / (|grad| + wd * |theta|)``; 1 when a norm vanishes."""
    pn = float(np.linalg.norm(theta))
    gn = float(np.linalg.norm(grad))
    denom = gn + weight_decay * pn
    if pn == 0.0 or denom == 0.0:
        return 1.0
    return trust_coeff * pn / denom


def lars_step(theta, grad, lr, momentum=0.0, weight_decay=0.0, trust_coeff=1.0, buf=None, exempt=False):
    """Layer-wise trust-ratio scaled momentum step. ``exempt`` tensors (norm
    affines, biases) get neither weight decay nor trust scaling. Returns
    (theta, buf)."""
    _check_grad(np.asarray(grad))
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if exempt:
        d = grad
    else:
        d = grad + weight_decay * theta if weight_decay else grad
        d = trust_ratio(theta, grad, weight_decay, trust_coeff) * d
    buf = d.copy() if buf is None else momentum * buf + d
    return theta - lr * buf, buf


class Optimizer:
    """Applies ``sgd_step`` or ``lars_step`` to each parameter in place."""

    def __init__(self, params: Sequence[Parameter], kind: str = "lars", momentum: float = 0.9,
                 weight_decay: float = 0.0, trust_coeff: float = 1.0):
        if kind not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trust_coeff = trust_coeff
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self.kind == "sgd":
                new, buf = sgd_step(p.data, p.grad, lr, self.momentum, self.weight_decay,
                                    self.buffers[i], decay=not p.decay_exempt)
            else:
                new, buf = lars_step(p.data, p.grad, lr, self.momentum, self.weight_decay,
                                     self.trust_coeff, self.buffers[i], exempt=p.decay_exempt)
            p.data = new
            self.buffers[i] = buf


# -- target network ---------------------------------------------------------
def ema_formula(xi: np.ndarray, theta: np.ndarray, eta: float) -> np.ndarray:
    return (1.0 - eta) * xi + eta * theta


def ema_update(xi: Sequence[Parameter], theta: Sequence[Parameter], eta: float) -> None:
    """In place ``xi <- (1 - eta) * xi + eta * theta`` over matching parameter lists."""
    if len(xi) != len(theta):
        raise ValueError(f"target has {len(xi)} tensors, online has {len(theta)}")
    for x, t in zip(xi, theta):
        if x.shape != t.shape:
            raise ValueError(f"target/online shape mismatch {x.shape} vs {t.shape}")
    for x, t in zip(xi, theta):
        x.data = ema_formula(x.data, t.data, eta)


def ema_weight(cfg: ExperimentConfig) -> float:
    """Weight on the online parameters per update. By default ``target_decay``
    is the weight kept on the target; ``ema_literal`` applies it to the
    online parameters instead."""
    return cfg.target_decay if cfg.ema_literal else 1.0 - cfg.target_decay


# -- trainer ---------------------------------------------------------------------
EPOCH_SEED = 1
CAPTURE_SEED = 2
INIT_SEED = 0


@dataclass
class TrainerState:
    online: NetworkAssembly
    target: NetworkAssembly | None
    optimizer: Optimizer
    eta: float
    seed: int
    step: int = 0
    epoch: int = 0
    captured: object = None


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    loss: float
    lr: float
    positive: float | None = None
    negative: float | None = None
    feature_std: float | None = None
    pairwise_cosine: float | None = None
    probe_acc: float | None = None
    extra: dict = field(default_factory=dict)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, EPOCH_SEED, epoch])


def _tensor_batch(images: np.ndarray) -> Tensor:
    return Tensor(normalize(images))


class Trainer:
    """One training run. BYOL or SimCLR is selected by ``cfg.objective``."""

    def __init__(self, cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None,
                 skip_init: bool = False):
        self.cfg = cfg
        if train is None:
            train, test = load_datasets(cfg)
        self.train_data = train
        self.test_data = test if test is not None else train
        self.policy = AugmentationPolicy()
        self.steps_per_epoch = len(train) // cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"dataset of {len(train)} images is smaller than one batch of {cfg.batch_size}")
        self.schedule = Schedule(
            cfg.lr, cfg.warmup_epochs * cfg.epochs / cfg.reference_epochs, cfg.epochs, self.steps_per_epoch
        )
        online = build(cfg, np.random.default_rng([cfg.seed, INIT_SEED]))
        captured = None
        if cfg.init == "bn-capture-reinit" and not skip_init:
            from .init_protocol import capture_stats, reinit_affine

            captured = capture_stats(online, self.capture_batch(), cfg.stat_floor)
            reinit_affine(online, captured)
        target = online.target_copy() if cfg.objective == "byol" else None
        opt = Optimizer(online.parameters(), cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.trust_coeff)
        self.state = TrainerState(online, target, opt, ema_weight(cfg), cfg.seed, captured=captured)
        self.history: list[EpochMetrics] = []
        self.on_step: Callable[[TrainerState], None] | None = None

    def capture_batch(self) -> Tensor:
        rng = np.random.default_rng([self.cfg.seed, CAPTURE_SEED])
        idx = rng.permutation(len(self.train_data))[: self.cfg.batch_size]
        return _tensor_batch(augment_batch(self.train_data.images[idx], rng, self.policy))

    def views(self, images: np.ndarray, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        if not self.cfg.augment:
            t = _tensor_batch(images)
            return t, Tensor(t.data.copy())
        return _tensor_batch(augment_batch(images, rng, self.policy)), _tensor_batch(augment_batch(images, rng, self.policy))

    # -- one update ------------------------------------------------------------
    def loss_on(self, v: Tensor, v2: Tensor):
        st = self.state
        if self.cfg.objective == "byol":
            p1 = st.online.predict(st.online.project(v))
            p2 = st.online.predict(st.online.project(v2))
            with no_grad():
                t1 = st.target.project(v)
                t2 = st.target.project(v2)
            l1 = byol_loss(p1, t2)
            l2 = byol_loss(p2, t1)
            return mul(add(l1.loss, l2.loss), 0.5), None, None
        z1 = st.online.project(v)
        z2 = st.online.project(v2)
        lv = infonce_loss(z1, z2, self.cfg.tau)
        return lv.loss, lv.positive, lv.negative

    def train_step(self, images: np.ndarray, rng: np.random.Generator) -> tuple[float, float, float | None, float | None]:
        st = self.state
        lr = lr_at(self.schedule, st.step)
        v, v2 = self.views(images, rng)
        st.optimizer.zero_grad()
        try:
            loss, pos, negt = self.loss_on(v, v2)
            loss.backward()
            st.optimizer.step(lr)
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged at step {st.step}: {exc}", st.epoch, st.step) from exc
        if st.target is not None:
            ema_update(st.target.backbone_parameters(), st.online.backbone_parameters(), st.eta)
        st.step += 1
        if self.on_step is not None:
            self.on_step(st)
        return loss.item(), lr, pos, negt

    # -- epochs ------------------------------------------------------------------
    def run_epoch(self) -> EpochMetrics:
        st = self.state
        rng = epoch_rng(self.cfg.seed, st.epoch)
        order = rng.permutation(len(self.train_data))
        bs = self.cfg.batch_size
        losses, poss, negs = [], [], []
        lr = 0.0
        for k in range(self.steps_per_epoch):
            idx = order[k * bs : (k + 1) * bs]
            loss, lr, pos, negt = self.train_step(self.train_data.images[idx], rng)
            losses.append(loss)
            if pos is not None:
                poss.append(pos)
                negs.append(negt)
        st.epoch += 1
        m = EpochMetrics(
            epoch=st.epoch,
            step=st.step,
            loss=float(np.mean(losses)),
            lr=lr,
            positive=float(np.mean(poss)) if poss else None,
            negative=float(np.mean(negs)) if negs else None,
        )
        self._collapse_metrics(m)
        self.history.append(m)
        return m

    def eval_features(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Frozen encoder representations (eval mode, no graph)."""
        from .evaluation import encode

        return encode(self.state.online, images, batch)

    def _collapse_metrics(self, m: EpochMetrics) -> None:
        from .evaluation import collapse_metrics

        imgs = self.test_data.images[: self.cfg.eval_size]
        rep = collapse_metrics(self.eval_features(imgs), self.cfg.collapse_std, self.cfg.collapse_cos)
        m.feature_std = rep.feature_std
        m.pairwise_cosine = rep.pairwise_cosine
        m.extra["relative_std"] = rep.relative_std

    def probe(self):
        from .evaluation import linear_probe

        return linear_probe(self.state.online, self.train_data, self.test_data, c=self.cfg.probe_c)

    def fit(self, until_epoch: int | None = None, on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
        last = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        while self.state.epoch < last:
            m = self.run_epoch()
            if self.state.epoch == self.cfg.epochs:
                m.probe_acc = self.probe().test_acc
            if on_epoch is not None:
                on_epoch(m)
        return self.history


def train_byol(cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None):
    if cfg.objective != "byol":
        raise ValueError("train_byol needs objective=byol")
    t = Trainer(cfg, train, test)
    return t.state, t.fit()


def train_simclr(cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None):
    if cfg.objective != "simclr":
        raise ValueError("train_simclr needs objective=simclr")
    t = Trainer(cfg, train, test)
    return t.state, t.fit()
