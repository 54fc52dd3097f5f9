import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_check
from protovae.episodes import build_episode, make_plan
from protovae.proto import (
    ProtoNet,
    class_probs,
    compute_prototypes,
    consistency_loss,
    isometry_loss,
    pairwise_distance,
    proto_loss,
    uniqueness_loss,
)
from protovae.vae import Decoder, ModelDims

TINY = ModelDims(data_shape=(8, 8, 1), latent_dim=3, metric_dim=2, conv_channels=(2, 3), hidden_dim=6)
D64 = torch.float64


def tiny_protonet(seed=0):
    torch.manual_seed(seed)
    return ProtoNet(TINY).double()


def pairs(n=3, seed=0):
    return torch.rand(n, 8, 8, 2, generator=torch.Generator().manual_seed(seed), dtype=D64)


def t(x):
    return torch.tensor(x, dtype=D64)


def test_embed_shapes_and_identity():
    net = tiny_protonet()
    p = pairs(4)
    p[2] = p[1]
    emb, iso = net(p)
    assert emb.shape == (4, 2) and iso.shape == (4, 3)
    assert torch.equal(emb[1], emb[2])
    assert torch.equal(net.embed_pair(p), emb) and torch.equal(net.isometry_predict(p), iso)


def test_embed_rejects_shape():
    with pytest.raises(ValueError):
        tiny_protonet().embed_pair(torch.zeros(2, 8, 8, 1, dtype=D64))


def test_embed_pixel_gradient():
    net = tiny_protonet()
    p = pairs(2).requires_grad_(True)
    assert gradient_check(lambda: net.embed_pair(p).sum(), [p], h=1e-5) < 1e-4


def test_prototype_examples():
    emb = t([[[1.0, 3.0], [3.0, 5.0]]])
    assert torch.equal(compute_prototypes(emb), t([[2.0, 4.0]]))
    single = t([[[0.3, -0.7]]])
    assert torch.equal(compute_prototypes(single), single[:, 0])
    with pytest.raises(ValueError):
        compute_prototypes(torch.zeros(2, 0, 3, dtype=D64))


def test_prototype_permutation_invariant():
    emb = torch.randn(3, 6, 2, dtype=D64)
    perm = torch.randperm(6)
    torch.testing.assert_close(compute_prototypes(emb), compute_prototypes(emb[:, perm]))


def test_class_probs_equidistant():
    protos = t([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    p = class_probs(t([[0.0, 0.0]]), protos)
    assert torch.all((p - 0.25).abs() <= 1e-9)


def test_class_probs_two_class():
    # squared distances (0, 1)
    p = class_probs(t([[0.0, 0.0]]), t([[0.0, 0.0], [1.0, 0.0]]))[0]
    assert float(p[0]) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert float(p[0]) == pytest.approx(0.7311, abs=1e-4)
    assert float(p[1]) == pytest.approx(0.2689, abs=1e-4)


def test_class_probs_far_limit():
    p = class_probs(t([[0.0, 0.0]]), t([[0.0, 0.0], [1e3, 0.0], [0.0, -1e3]]))
    assert float(p[0, 0]) == 1.0


def test_euclidean_option():
    d = pairwise_distance(t([[0.0, 0.0]]), t([[3.0, 4.0]]), "euclidean")
    assert float(d) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        pairwise_distance(t([[0.0]]), t([[1.0]]), "manhattan")


def test_uniqueness_hand_computed():
    loss = uniqueness_loss(t([[0.0, 0.0]]), t([[0.0, 0.0], [1.0, 0.0]]), torch.tensor([0]), t([0.5, 9.0]))
    assert abs(float(loss) - 0.5 * math.log(1 + math.exp(-1))) <= 1e-9
    assert float(loss) == pytest.approx(0.1566, abs=1e-4)


def test_uniqueness_zero_weights():
    q = torch.randn(5, 2, dtype=D64)
    c = torch.randn(3, 2, dtype=D64)
    labels = torch.tensor([0, 1, 2, 1, 0])
    assert float(uniqueness_loss(q, c, labels, torch.zeros(3, dtype=D64))) == 0.0


def test_uniqueness_limit():
    loss = uniqueness_loss(t([[0.0, 0.0]]), t([[0.0, 0.0], [50.0, 0.0]]), torch.tensor([0]), t([1.0, 1.0]))
    assert float(loss) < 1e-12


def test_consistency_cases():
    b, d = 4, 3
    labels = torch.tensor([0, 2, 1, 2])
    w = t([0.2, 0.7, 1.3])
    same = torch.randn(1, b, 2, dtype=D64).expand(d, b, 2)
    got = consistency_loss(torch.randn(b, 2, dtype=D64), same, labels, w)
    assert float(got) == pytest.approx(float(w[labels].mean()) * math.log(d), abs=1e-12)
    assert float(consistency_loss(torch.randn(b, 2, dtype=D64), torch.randn(d, b, 2, dtype=D64),
                                  labels, torch.zeros(3, dtype=D64))) == 0.0
    # query at its own same-dimension support, others far away
    support = torch.full((d, b, 2), 100.0, dtype=D64)
    support[labels, torch.arange(b)] = 0.0
    got = consistency_loss(torch.zeros(b, 2, dtype=D64), support, labels, torch.ones(3, dtype=D64))
    assert float(got) < 1e-12


def test_consistency_uses_own_example_only():
    b, d = 3, 2
    support = torch.randn(d, b, 2, dtype=D64)
    q = torch.randn(b, 2, dtype=D64)
    labels = torch.tensor([1, 0, 1])
    base = consistency_loss(q, support, labels, torch.ones(d, dtype=D64))
    changed = support.clone()
    changed[:, 1] += 10.0
    per_example = consistency_loss(q[[0, 2]], changed[:, [0, 2]], labels[[0, 2]], torch.ones(d, dtype=D64))
    reference = consistency_loss(q[[0, 2]], support[:, [0, 2]], labels[[0, 2]], torch.ones(d, dtype=D64))
    assert float(per_example) == float(reference)
    assert float(base) != float(consistency_loss(q, changed, labels, torch.ones(d, dtype=D64)))


def test_consistency_rejects_misalignment():
    support = torch.randn(2, 3, 2, dtype=D64)
    with pytest.raises(ValueError):
        consistency_loss(torch.randn(4, 2, dtype=D64), support, torch.zeros(4, dtype=torch.long), torch.ones(2, dtype=D64))
    with pytest.raises(ValueError, match="aligned"):
        consistency_loss(torch.randn(3, 2, dtype=D64), support, torch.zeros(3, dtype=torch.long),
                         torch.ones(2, dtype=D64), query_index=[0, 1, 2], support_index=[1, 0, 2])


def test_proto_loss_sum():
    assert float(proto_loss(t(0.0), t(0.0))) == 0.0
    assert float(proto_loss(t(0.1566), t(0.6931))) == pytest.approx(0.8497, abs=1e-12)


def test_isometry_loss_cases():
    target = t([[0.0, 1.5, 0.0]])
    assert float(isometry_loss(target, target)) == 0.0
    assert float(isometry_loss(target + t([[1.0, 0.0, 0.0]]), target)) == 1.0


def test_isometry_gradient_through_episode():
    torch.manual_seed(0)
    net = tiny_protonet()
    dec = Decoder(TINY).double()
    z = torch.randn(3, 3, dtype=D64, generator=torch.Generator().manual_seed(5)).requires_grad_(True)
    plan = make_plan(3, 3, torch.Generator().manual_seed(1))

    def loss():
        ep = build_episode(z, plan, dec)
        return isometry_loss(net.isometry_predict(ep.query_pairs()), ep.isometry_targets)

    assert gradient_check(loss, [z], h=1e-6) < 1e-4
    assert gradient_check(loss, list(net.iso_head.parameters()), h=1e-6) < 1e-4


def test_trunk_sharing():
    net = tiny_protonet()
    p = pairs(2)
    emb0, iso0 = net(p)
    with torch.no_grad():
        next(net.trunk_parameters()).add_(0.1)
    emb1, iso1 = net(p)
    assert not torch.equal(emb0, emb1) and not torch.equal(iso0, iso1)
    with torch.no_grad():
        net.embed_head.weight.add_(0.1)
    emb2, iso2 = net(p)
    assert torch.equal(iso1, iso2) and not torch.equal(emb1, emb2)
    with torch.no_grad():
        net.iso_head.weight.add_(0.1)
    emb3, iso3 = net(p)
    assert torch.equal(emb2, emb3) and not torch.equal(iso2, iso3)
    trunk_ids = {id(p) for p in net.trunk.parameters()}
    assert len(trunk_ids) == len(list(net.trunk.parameters()))


vec = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(vec, vec), min_size=2, max_size=6), st.tuples(vec, vec), st.floats(-20, 20))
def test_class_probs_simplex_and_shift_invariance(protos, query, shift):
    c, q = t(protos), t([query])
    p = class_probs(q, c)
    assert abs(float(p.sum()) - 1) <= 1e-6
    dist = pairwise_distance(q, c)
    shifted = torch.softmax(-(dist + shift), dim=-1)
    assert torch.allclose(p, shifted, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6), st.randoms(use_true_random=False))
def test_uniqueness_permutation_invariance(d, n, rnd):
    g = torch.Generator().manual_seed(rnd.randint(0, 2**31))
    q = torch.randn(n, 2, generator=g, dtype=D64)
    c = torch.randn(d, 2, generator=g, dtype=D64)
    labels = torch.randint(0, d, (n,), generator=g)
    w = torch.rand(d, generator=g, dtype=D64)
    perm = torch.randperm(d, generator=g)
    inv = torch.argsort(perm)
    a = uniqueness_loss(q, c, labels, w)
    b = uniqueness_loss(q, c[perm], inv[labels], w[perm])
    assert abs(float(a) - float(b)) < 1e-12
    assert float(a) >= 0


def test_clustered_embeddings_limit():
    d, n = 3, 30
    centres = torch.eye(d, dtype=D64)[:, :2] * 1e3
    centres[2] = t([-1e3, -1e3])
    labels = torch.arange(n) % d
    q = centres[labels] + 0.01 * torch.randn(n, 2, dtype=D64)
    support = centres[:, None, :] + 0.01 * torch.randn(d, 5, 2, dtype=D64)
    protos = compute_prototypes(support)
    assert float(uniqueness_loss(q, protos, labels, torch.ones(d, dtype=D64))) < 1e-9
    assert torch.equal(class_probs(q, protos).argmax(1), labels)
