import numpy as np
import pytest

from normssl.config import ExperimentConfig, preset
from normssl.evaluation import batch_independent
from normssl.model import build, forward_views
from normssl.nn import Parameter
from normssl.tensor import Tensor

from conftest import tiny


def expected_params(widths, blocks, hidden, proj, predictor=True):
    """Hand count: 3x3 convs without bias, 2 affine params per norm channel,
    first head linear without bias (its norm has an offset), second with."""
    n = 9 * 3 * widths[0] + 2 * widths[0]
    cin = widths[0]
    for w in widths:
        for _ in range(blocks):
            n += 9 * cin * w + 9 * w * w + 4 * w
            cin = w
    head = lambda i, o: i * hidden + 2 * hidden + hidden * o + o  # noqa: E731
    n += head(cin, proj)
    if predictor:
        n += head(proj, proj)
    return n


def test_default_parameter_count():
    net = build(ExperimentConfig())
    assert net.num_parameters() == expected_params([16, 32, 64], 2, 128, 64) == 205264
    assert len(net.norm_sites()) == 1 + 2 * 6 + 2


def test_simclr_has_no_predictor():
    net = build(preset("simclr-ln"))
    assert not net.has_predictor
    assert net.num_parameters() == expected_params([16, 32, 64], 2, 128, 64, predictor=False)


def test_equal_seeds_equal_parameters():
    a, b = build(tiny(seed=3)), build(tiny(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build(tiny(seed=4))
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_final_in_block_tags():
    net = build(tiny())
    finals = [n for n, m in net.norm_sites() if m.final_in_block]
    assert finals == ["encoder.blocks.0.norm2", "encoder.blocks.1.norm2"]


def test_forward_views_shapes_and_determinism(rng):
    cfg = tiny()
    net = build(cfg)
    v = Tensor(rng.standard_normal((4, 8, 8, 3)))
    z, zp, q, qp = forward_views(net, v, Tensor(v.data.copy()))
    for t in (z, zp, q, qp):
        assert t.shape == (4, cfg.proj_dim)
    assert np.array_equal(z.data, zp.data)


def test_forward_views_shape_mismatch(rng):
    net = build(tiny())
    with pytest.raises(ValueError):
        forward_views(net, Tensor(np.zeros((2, 8, 8, 3))), Tensor(np.zeros((3, 8, 8, 3))))


@pytest.mark.parametrize("norms,uses", [
    (("bn", "bn", "bn"), True),
    (("none", "none", "none"), False),
    (("gn", "gn", "gn"), False),
    (("ln", "none", "bn"), True),
])
def test_static_batch_stat_flag(norms, uses):
    cfg = tiny(encoder_norm=norms[0], projector_norm=norms[1], predictor_norm=norms[2])
    assert build(cfg).uses_batch_statistics() is uses


def test_gn_ws_sample_zero_unaffected_by_swap(rng):
    net = build(tiny("gn-ws"))
    x = rng.standard_normal((4, 8, 8, 3))
    assert batch_independent(net, x, rng.standard_normal((8, 8, 3)) * 3)


def test_ws_never_reads_raw_weight(rng):
    """Every conv/linear weight's only consumer in the graph is the standardization."""
    net = build(tiny("gn-ws"))
    weights = {id(p) for n, p in net.named_parameters() if n.endswith("weight")}
    out = net.predict(net.project(Tensor(rng.standard_normal((2, 8, 8, 3)))))
    seen, stack, consumers = set(), [out], {}
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        for p in node._parents:
            if id(p) in weights:
                consumers.setdefault(id(p), set()).add(node._op)
            stack.append(p)
    assert set(consumers) == weights
    assert all(ops == {"standardize"} for ops in consumers.values())


def test_target_copy_is_frozen_and_equal():
    net = build(tiny())
    tgt = net.target_copy()
    assert tgt.predictor is None
    assert all(not p.requires_grad for p in tgt.parameters())
    for p, q in zip(tgt.parameters(), net.backbone_parameters()):
        assert np.array_equal(p.data, q.data) and p is not q


def test_decay_exempt_marks():
    net = build(tiny())
    for name, p in net.named_parameters():
        assert isinstance(p, Parameter)
        assert p.decay_exempt == (not name.endswith("weight"))
