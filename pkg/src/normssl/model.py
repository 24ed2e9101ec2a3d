"""Residual encoder, MLP heads, and the per-component network assembly."""
from __future__ import annotations

import copy

import numpy as np

from .config import ExperimentConfig
from .nn import Conv2d, Linear, Module
from .norms import NormLayer, NormScheme
from .tensor import Tensor, concat, getitem, mean, relu, add


class ResidualBlock(Module):
    """conv -> norm -> relu -> conv -> norm(final), plus a parameter-free
    shortcut: strided subsampling and zero channel padding when the shape
    changes. The sum goes through a relu."""

    def __init__(self, cin: int, cout: int, stride: int, scheme: NormScheme, rng, ws: bool, ws_eps: float):
        super().__init__()
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, ws=ws, ws_eps=ws_eps)
        self.norm1 = NormLayer(cout, scheme)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1, ws=ws, ws_eps=ws_eps)
        self.norm2 = NormLayer(cout, scheme, final_in_block=True)

    def shortcut(self, x: Tensor) -> Tensor:
        if self.stride > 1:
            x = getitem(x, (slice(None), slice(None, None, self.stride), slice(None, None, self.stride), slice(None)))
        if self.cout > self.cin:
            n, h, w, _ = x.shape
            x = concat([x, Tensor(np.zeros((n, h, w, self.cout - self.cin)))], axis=3)
        return x

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return relu(add(h, self.shortcut(x)))


class ResidualEncoder(Module):
    def __init__(self, widths: list[int], blocks_per_stage: int, scheme: NormScheme, rng, ws: bool, ws_eps: float):
        super().__init__()
        self.stem = Conv2d(3, widths[0], 3, rng, padding=1, ws=ws, ws_eps=ws_eps)
        self.stem_norm = NormLayer(widths[0], scheme)
        blocks = []
        cin = widths[0]
        for s, width in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if s > 0 and b == 0 else 1
                blocks.append(ResidualBlock(cin, width, stride, scheme, rng, ws, ws_eps))
                cin = width
        self.blocks = blocks
        self.out_dim = cin

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return mean(h, axis=(1, 2))


class MLPHead(Module):
    """linear -> norm -> relu -> linear."""

    def __init__(self, din: int, hidden: int, dout: int, scheme: NormScheme, rng, ws: bool, ws_eps: float):
        super().__init__()
        self.fc1 = Linear(din, hidden, rng, bias=not scheme.affine, ws=ws, ws_eps=ws_eps)
        self.norm = NormLayer(hidden, scheme)
        self.fc2 = Linear(hidden, dout, rng, bias=True, ws=ws, ws_eps=ws_eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.norm(self.fc1(x))))


class NetworkAssembly(Module):
    """Encoder f, projector g and (BYOL only) predictor q."""

    def __init__(self, encoder: ResidualEncoder, projector: MLPHead, predictor: MLPHead | None, identity_predictor: bool = False):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.identity_predictor = identity_predictor

    @property
    def has_predictor(self) -> bool:
        return self.predictor is not None or self.identity_predictor

    def represent(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def project(self, x: Tensor) -> Tensor:
        return self.projector(self.encoder(x))

    def predict(self, z: Tensor) -> Tensor:
        if self.predictor is None:
            if self.identity_predictor:
                return z
            raise ValueError("assembly has no predictor")
        return self.predictor(z)

    def backbone_parameters(self):
        """Encoder and projector parameters: the part mirrored by a target."""
        return self.encoder.parameters() + self.projector.parameters()

    def norm_sites(self) -> list[tuple[str, NormLayer]]:
        """Normalization layers in forward order."""
        return [(name, m) for name, m in self.modules() if isinstance(m, NormLayer)]

    def uses_batch_statistics(self) -> bool:
        """Static check: does any site normalize with batch statistics?"""
        return any(m.kind == "bn" for _, m in self.norm_sites())

    def target_copy(self) -> "NetworkAssembly":
        """Encoder and projector copy with frozen parameters (no predictor)."""
        enc = copy.deepcopy(self.encoder)
        proj = copy.deepcopy(self.projector)
        target = NetworkAssembly(enc, proj, None)
        for p in target.parameters():
            p.requires_grad = False
        target.train(self.training)
        return target


def build(cfg: ExperimentConfig, rng: np.random.Generator | None = None) -> NetworkAssembly:
    """Assemble the online network for ``cfg``; parameters are drawn from
    ``rng`` or from a generator seeded by ``cfg.seed``."""
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0])
    enc_kind, proj_kind, pred_kind = cfg.norm_kinds()
    widths = cfg.width_list()
    encoder = ResidualEncoder(widths, cfg.blocks_per_stage, cfg.norm_scheme(enc_kind), rng, cfg.ws, cfg.ws_eps)
    projector = MLPHead(encoder.out_dim, cfg.hidden_dim, cfg.proj_dim, cfg.norm_scheme(proj_kind), rng, cfg.ws, cfg.ws_eps)
    predictor = None
    identity = False
    if cfg.objective == "byol":
        if cfg.predictor == "identity":
            identity = True
        else:
            predictor = MLPHead(cfg.proj_dim, cfg.hidden_dim, cfg.proj_dim, cfg.norm_scheme(pred_kind), rng, cfg.ws, cfg.ws_eps)
    return NetworkAssembly(encoder, projector, predictor, identity)


def forward_views(assembly: NetworkAssembly, v: Tensor, v_prime: Tensor):
    """Projections of both views and, when a predictor exists, their predictions
    (``None`` otherwise)."""
    if v.shape != v_prime.shape:
        raise ValueError(f"views differ in shape: {v.shape} vs {v_prime.shape}")
    z = assembly.project(v)
    z_prime = assembly.project(v_prime)
    if assembly.has_predictor:
        return z, z_prime, assembly.predict(z), assembly.predict(z_prime)
    return z, z_prime, None, None
