"""Replace batch normalization by data-dependent affine initialization.

One training-mode forward pass of the BN network records the batch mean and
standard deviation at every BN site. Each site then becomes a plain affine
with ``gamma = gamma0 / sigma`` and ``beta = -mu * gamma``, where ``gamma0``
is 0 for the last norm of a residual block and 1 elsewhere. On the captured
batch the norm-free network reproduces the BN network site by site.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NetworkAssembly
from .norms import NormLayer, NormScheme
from .tensor import Tensor, no_grad


class InitProtocolError(ValueError):
    pass


@dataclass
class SiteStats:
    mean: np.ndarray
    std: np.ndarray
    final_in_block: bool


@dataclass
class CapturedStats:
    sites: dict[str, SiteStats] = field(default_factory=dict)
    floor: float = 1e-3

    def __len__(self) -> int:
        return len(self.sites)


def gamma0(site: NormLayer) -> float:
    return 0.0 if site.final_in_block else 1.0


def bn_sites(assembly: NetworkAssembly) -> list[tuple[str, NormLayer]]:
    return [(name, m) for name, m in assembly.norm_sites() if m.kind == "bn"]


def full_forward(assembly: NetworkAssembly, x: Tensor) -> Tensor:
    z = assembly.project(x)
    return assembly.predict(z) if assembly.has_predictor else z


def set_bn_affine_to_gamma0(assembly: NetworkAssembly) -> None:
    """Fresh BN affines with the residual-branch scale zeroed: gamma = gamma0, beta = 0."""
    for _, site in bn_sites(assembly):
        site.gamma.data = np.full(site.channels, gamma0(site))
        site.beta.data = np.zeros(site.channels)


def site_outputs(assembly: NetworkAssembly, x: Tensor, names=None) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Forward ``x`` in the current mode and return every norm site's output."""
    sites = [(n, m) for n, m in assembly.norm_sites() if names is None or n in names]
    for _, m in sites:
        m.capture = True
    try:
        with no_grad():
            out = full_forward(assembly, x)
    finally:
        for _, m in sites:
            m.capture = False
    return out, {n: m.last_output for n, m in sites}


def capture_stats(assembly: NetworkAssembly, batch: Tensor, floor: float = 1e-3) -> CapturedStats:
    """Per-site BN batch statistics from one training-mode forward pass.

    BN affines are first reset to their ``gamma0`` values, so each site sees
    the activations the re-initialized network will produce upstream of it.
    """
    sites = bn_sites(assembly)
    if not sites:
        raise InitProtocolError("assembly has no batch-norm sites to capture")
    if batch.shape[0] < 2:
        raise InitProtocolError("capture needs a batch of at least 2")
    set_bn_affine_to_gamma0(assembly)
    assembly.train()
    for _, m in sites:
        m.capture = True
    try:
        with no_grad():
            full_forward(assembly, batch)
    finally:
        for _, m in sites:
            m.capture = False
    stats = CapturedStats(floor=floor)
    for name, m in sites:
        mu, var = m.last_stats
        sigma = np.maximum(np.sqrt(var + m.scheme.eps), floor)
        stats.sites[name] = SiteStats(mu.copy(), sigma, m.final_in_block)
    return stats


def affine_init(mu: np.ndarray, sigma: np.ndarray, g0: float) -> tuple[np.ndarray, np.ndarray]:
    gamma = g0 / sigma
    return gamma, -mu * gamma


def strip_bn(assembly: NetworkAssembly) -> None:
    """Turn every BN site into an affine-only site, keeping its parameters."""
    for _, site in bn_sites(assembly):
        site.scheme = NormScheme("none", groups=site.scheme.groups, eps=site.scheme.eps, affine=True)
        for attr in ("running_mean", "running_var", "num_batches_tracked"):
            if hasattr(site, attr):
                delattr(site, attr)


def reinit_affine(assembly: NetworkAssembly, stats: CapturedStats) -> NetworkAssembly:
    """Remove BN sites in place and initialize their affines from ``stats``."""
    sites = bn_sites(assembly)
    missing = [n for n, _ in sites if n not in stats.sites]
    if missing:
        raise InitProtocolError(f"no captured statistics for sites {missing}")
    for name, site in sites:
        s = stats.sites[name]
        gamma, beta = affine_init(s.mean, s.std, gamma0(site))
        site.gamma.data = gamma
        site.beta.data = beta
    strip_bn(assembly)
    return assembly
