"""Property suite behind ``normssl verify``: gradient checks, normalization
equivalences, weight-standardization invariants, init-protocol equivalence,
InfoNCE oracle agreement and EMA edge cases."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import check_many
from .norms import batch_norm, group_norm, instance_norm, layer_norm, weight_standardize


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{mark}  {self.name:<38} measured={self.measured:.3e} tol={self.tol:.0e}{extra}"


# -- gradient cases ------------------------------------------------------------
def _probe_weights(rng, shape):
    return rng.standard_normal(shape)


def gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, Callable[[], np.ndarray]]]:
    """name -> (scalar function of one tensor, sampler of inputs). Every
    function contracts its output with fixed random weights so all output
    entries contribute to the gradient."""
    x4 = rng.standard_normal((3, 4, 4, 4))
    gamma = rng.standard_normal(4)
    beta = rng.standard_normal(4)
    w_conv = rng.standard_normal((3, 3, 4, 3))
    w_lin = rng.standard_normal((5, 4))
    r_conv = _probe_weights(rng, (3, 4, 4, 3))
    r_conv_s2 = _probe_weights(rng, (3, 2, 2, 3))
    r4 = _probe_weights(rng, (3, 4, 4, 4))
    r2 = _probe_weights(rng, (3, 4))
    r_b = _probe_weights(rng, (3,))
    x2 = rng.standard_normal((3, 5))
    target = rng.standard_normal((3, 4))

    def bn(x):
        return T.tsum(T.mul(batch_norm(x, gamma, beta, training=True), r4))

    def ln(x):
        return T.tsum(T.mul(layer_norm(x, gamma, beta), r4))

    def gn(x):
        return T.tsum(T.mul(group_norm(x, 2, gamma, beta), r4))

    def inorm(x):
        return T.tsum(T.mul(instance_norm(x, gamma, beta), r4))

    def conv_input(x):
        return T.tsum(T.mul(T.conv2d(x, w_conv, 1, 1), r_conv))

    def conv_weight(w):
        return T.tsum(T.mul(T.conv2d(x4, w, 1, 1), r_conv))

    def conv_weight_s2(w):
        return T.tsum(T.mul(T.conv2d(x4, w, 2, 1), r_conv_s2))

    def ws_conv(w):
        return T.tsum(T.mul(T.conv2d(x4, weight_standardize(w, 1e-4), 1, 1), r_conv))

    def linear_weight(w):
        return T.tsum(T.mul(T.matmul(x2, w), r2))

    def linear_input(x):
        return T.tsum(T.mul(T.matmul(x, w_lin), r2))

    def ws_linear(w):
        return T.tsum(T.mul(T.matmul(x2, weight_standardize(w, 1e-4)), r2))

    def cosine(a):
        from .objectives import cosine_similarity

        return T.tsum(T.mul(cosine_similarity(a, target), r_b))

    def byol(a):
        from .objectives import byol_loss

        return byol_loss(a, target).loss

    def infonce(a):
        from .objectives import infonce_loss

        return infonce_loss(a, target, 0.5).loss

    return {
        "conv2d (input)": (conv_input, lambda: rng.standard_normal((3, 4, 4, 4))),
        "conv2d (weight)": (conv_weight, lambda: rng.standard_normal((3, 3, 4, 3))),
        "conv2d stride 2 (weight)": (conv_weight_s2, lambda: rng.standard_normal((3, 3, 4, 3))),
        "linear (input)": (linear_input, lambda: rng.standard_normal((3, 5))),
        "linear (weight)": (linear_weight, lambda: rng.standard_normal((5, 4))),
        "batch_norm": (bn, lambda: rng.standard_normal((3, 4, 4, 4)) * 2 + 1),
        "layer_norm": (ln, lambda: rng.standard_normal((3, 4, 4, 4)) * 2 + 1),
        "group_norm": (gn, lambda: rng.standard_normal((3, 4, 4, 4)) * 2 + 1),
        "instance_norm": (inorm, lambda: rng.standard_normal((3, 4, 4, 4)) * 2 + 1),
        "ws conv2d (raw weight)": (ws_conv, lambda: rng.standard_normal((3, 3, 4, 3))),
        "ws linear (raw weight)": (ws_linear, lambda: rng.standard_normal((5, 4))),
        "cosine_similarity": (cosine, lambda: rng.standard_normal((3, 4))),
        "byol_loss": (byol, lambda: rng.standard_normal((3, 4))),
        "infonce_loss": (infonce, lambda: rng.standard_normal((3, 4))),
    }


def gradient_suite(cases: int = 3, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (f, sample) in gradient_cases(rng).items():
        rep = check_many(f, [sample() for _ in range(cases)], step=1e-5, tol=tol)
        out.append(CheckResult(f"grad {name}", rep.passed, rep.max_rel_error, tol, f"{cases} cases"))
    return out


# -- normalization properties ------------------------------------------------------------
def equivalence_suite(trials: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_ln = worst_in = 0.0
    for _ in range(trials):
        c = int(rng.choice([2, 4, 6, 8]))
        x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), c)) * 3
        worst_ln = max(worst_ln, float(np.abs(group_norm(x, 1).data - layer_norm(x).data).max()))
        worst_in = max(worst_in, float(np.abs(group_norm(x, c).data - instance_norm(x).data).max()))
    return [
        CheckResult("GN(G=1) == LN", worst_ln <= 1e-10, worst_ln, 1e-10, f"{trials} tensors"),
        CheckResult("GN(G=C) == IN", worst_in <= 1e-10, worst_in, 1e-10, f"{trials} tensors"),
    ]


def swap_changes_sample0(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, replacement: np.ndarray) -> float:
    x2 = x.copy()
    x2[1] = replacement
    return float(np.abs(fn(x)[0] - fn(x2)[0]).max())


def batch_independence_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3, 3, 8))
    rep = rng.standard_normal((3, 3, 8)) * 5 + 2
    w = rng.standard_normal((3, 3, 8, 4))
    fns = {
        "LN": lambda a: layer_norm(a).data,
        "GN": lambda a: group_norm(a, 4).data,
        "IN": lambda a: instance_norm(a).data,
        "WS conv": lambda a: T.conv2d(a, weight_standardize(w), 1, 1).data,
    }
    out = [
        CheckResult(f"batch independence {k}", (d := swap_changes_sample0(f, x, rep)) == 0.0, d, 0.0)
        for k, f in fns.items()
    ]
    d = swap_changes_sample0(lambda a: batch_norm(a, training=True).data, x, rep)
    out.append(CheckResult("BN train mode couples samples", d > 0.0, d, 0.0, "counterexample expected"))
    return out


def ws_suite(trials: int = 50, seed: int = 0, eps: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_mean = worst_std = 0.0
    for _ in range(trials):
        fan_in = int(rng.integers(2, 40))
        w = rng.standard_normal((fan_in, int(rng.integers(1, 8)))) * rng.uniform(0.1, 5)
        wh = weight_standardize(w, eps).data
        worst_mean = max(worst_mean, float(np.abs(wh.mean(axis=0)).max()))
        var_raw = w.var(axis=0)
        # a standardized row has std sqrt(v / (v + eps)): at most 1, and short
        # of 1 by no more than eps / (v + eps)
        std = wh.std(axis=0)
        dev = np.maximum(std - 1.0, (1.0 - std) - eps / (var_raw + eps))
        worst_std = max(worst_std, float(dev.max()))
    return [
        CheckResult("WS row |mean|", worst_mean < 1e-10, worst_mean, 1e-10),
        CheckResult("WS row std within eps floor", worst_std <= 1e-12, max(worst_std, 0.0), 1e-12),
    ]


# -- higher-level checks --------------------------------------------------------------
def init_protocol_suite(seed: int = 0, cfg=None, batch: int = 16) -> list[CheckResult]:
    """BN network (train mode, gamma0 affines) against its re-initialized
    norm-free copy on one batch; ``cfg`` defaults to a small two-stage network."""
    from .config import preset
    from .init_protocol import capture_stats, reinit_affine, set_bn_affine_to_gamma0, site_outputs
    from .model import build

    if cfg is None:
        cfg = preset("vanilla-bn", widths="8,16", blocks_per_stage=1, hidden_dim=32, proj_dim=16, image_size=8, seed=seed)
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((batch, cfg.image_size, cfg.image_size, 3)))
    bn_net = build(cfg)
    set_bn_affine_to_gamma0(bn_net)
    ref = bn_net.clone()
    stats = capture_stats(bn_net, x)
    reinit_affine(bn_net, stats)
    ref.train()
    out_bn, sites_bn = site_outputs(ref, x)
    out_re, sites_re = site_outputs(bn_net, x)
    first = next(iter(sites_bn))
    d_first = float(np.abs(sites_bn[first] - sites_re[first]).max())
    d_sites = max(float(np.abs(sites_bn[k] - sites_re[k]).max()) for k in sites_bn)
    d_end = float(np.abs(out_bn.data - out_re.data).max())
    return [
        CheckResult("init protocol first site", d_first <= 1e-10, d_first, 1e-10),
        CheckResult("init protocol every site", d_sites <= 1e-6, d_sites, 1e-6),
        CheckResult("init protocol end to end", d_end <= 1e-4, d_end, 1e-4),
    ]


def infonce_bruteforce(z: np.ndarray, zp: np.ndarray, tau: float) -> float:
    """Loop-by-loop InfoNCE with the negative set spelled out per anchor."""
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    b = len(z)
    total = 0.0
    for anchors, partners in ((z, zp), (zp, z)):
        for i in range(b):
            candidates = [partners[j] for j in range(b)] + [anchors[j] for j in range(b) if j != i]
            total += -cos(anchors[i], partners[i]) / tau + math.log(sum(math.exp(cos(anchors[i], c) / tau) for c in candidates))
    return total / (2 * b)


def infonce_suite(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    from .objectives import infonce_loss

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        b = int(rng.integers(1, 5))
        z, zp = rng.standard_normal((b, 3)), rng.standard_normal((b, 3))
        tau = float(rng.uniform(0.05, 2.0))
        worst = max(worst, abs(infonce_loss(z, zp, tau).item() - infonce_bruteforce(z, zp, tau)))
    return [CheckResult("InfoNCE vs brute force (B<=4)", worst <= 1e-8, worst, 1e-8)]


def ema_suite() -> list[CheckResult]:
    from .training import ema_formula

    xi, th = np.array([0.3, -1.2, 5.0]), np.array([2.0, 0.7, -4.0])
    d1 = float(np.abs(ema_formula(xi, th, 1.0) - th).max())
    d0 = float(np.abs(ema_formula(xi, th, 0.0) - xi).max())
    return [
        CheckResult("EMA eta=1 copies online", d1 == 0.0, d1, 0.0),
        CheckResult("EMA eta=0 freezes target", d0 == 0.0, d0, 0.0),
    ]


def run_verification(cases: int = 3, seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    ctx = T.inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        results = gradient_suite(cases, seed)
    results += equivalence_suite(seed=seed)
    results += batch_independence_suite(seed)
    results += ws_suite(seed=seed)
    results += init_protocol_suite(seed)
    results += infonce_suite(seed=seed)
    results += ema_suite()
    return results


__all__ = [
    "CheckResult", "gradient_cases", "gradient_suite", "equivalence_suite", "batch_independence_suite",
    "ws_suite", "init_protocol_suite", "infonce_bruteforce", "infonce_suite", "ema_suite", "run_verification",
]
