import math

import numpy as np
import pytest

import oracles
from tract import nnkit as nk
from tract.datamap import CLUSTERS, PrototypeSet, compute_prototypes
from tract.errors import ContractError
from tract.pcl import ContrastiveBatch, combined_loss, l_ins, l_proto


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_batch(rng, r=None, d=6, tau=0.1):
    r = r or int(rng.integers(2, 17))
    labels = list(rng.choice(CLUSTERS, size=r))
    pool = _unit(rng, 40, d)
    protos = compute_prototypes(list(rng.choice(CLUSTERS, size=40)), pool)
    labels = [c if c in protos.clusters else protos.clusters[0] for c in labels]
    return ContrastiveBatch(nk.Value(_unit(rng, r, d)), labels, protos, tau)


def _single(clusters, vectors, density):
    return PrototypeSet(tuple(clusters), np.asarray(vectors, dtype=float), np.asarray(density, dtype=float), np.ones(len(clusters), dtype=np.int64))


def test_no_positives_gives_zero():
    rng = np.random.default_rng(0)
    v = _unit(rng, 4, 3)
    protos = compute_prototypes(list(CLUSTERS), v)
    assert l_ins(ContrastiveBatch(nk.Value(v), list(CLUSTERS), protos, 0.1)).data == 0.0


def test_two_identical_same_cluster():
    v = np.array([[1.0, 0.0], [1.0, 0.0]])
    batch = ContrastiveBatch(nk.Value(v), ["easy", "easy"], _single(["easy"], [[1.0, 0.0]], [1.0]), 1.0)
    assert l_ins(batch).data == pytest.approx(2 * math.log(2), abs=1e-15)


def test_brute_force_oracles_100_batches():
    rng = np.random.default_rng(1)
    for _ in range(100):
        b = _random_batch(rng)
        vec = b.embeddings.data.tolist()
        for excl in (False, True):
            assert abs(l_ins(b, excl).data - oracles.l_ins(vec, b.labels, b.tau, excl)) <= 1e-10
        ref = oracles.l_proto(vec, b.labels, list(b.prototypes.clusters), b.prototypes.vectors.tolist(), b.prototypes.density.tolist())
        assert abs(l_proto(b).data - ref) <= 1e-10


def test_single_cluster_proto_zero_and_equidistant_log2():
    rng = np.random.default_rng(2)
    v = _unit(rng, 5, 3)
    one = ContrastiveBatch(nk.Value(v), ["hard"] * 5, _single(["hard"], [[0.0, 0.0, 1.0]], [0.3]), 0.1)
    assert l_proto(one).data == 0.0

    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    x = (a + b) / np.linalg.norm(a + b)
    two = ContrastiveBatch(nk.Value(x[None]), ["easy"], _single(["easy", "hard"], [a, b], [0.4, 0.4]), 0.1)
    assert l_proto(two).data == pytest.approx(math.log(2), abs=1e-14)


def test_losses_non_negative_and_permutation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(30):
        b = _random_batch(rng)
        perm = rng.permutation(len(b.labels))
        pb = ContrastiveBatch(nk.Value(b.embeddings.data[perm]), [b.labels[i] for i in perm], b.prototypes, b.tau)
        assert l_ins(b).data >= 0 and l_proto(b).data >= 0
        assert abs(l_ins(b).data - l_ins(pb).data) <= 1e-12
        assert abs(l_proto(b).data - l_proto(pb).data) <= 1e-12


def test_temperature_sharpening():
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = _unit(rng, 6, 4)
        labels = ["easy", "easy", "easy", "hard", "hard", "hard"]
        sim = v @ v.T

        def gap(tau):
            logp = sim / tau - np.log(np.exp(sim / tau).sum(axis=1, keepdims=True))
            same = np.array([[labels[i] == labels[j] and i != j for j in range(6)] for i in range(6)])
            diff = np.array([[labels[i] != labels[j] for j in range(6)] for i in range(6)])
            return (logp[same].mean() - logp[diff].mean()), (sim[same].mean() - sim[diff].mean())

        g1, raw = gap(0.2)
        g2, _ = gap(0.1)
        if raw > 0:
            assert g2 > g1
        else:
            assert g2 < g1


def test_gradients_pass_grad_check():
    rng = np.random.default_rng(5)
    for _ in range(10):
        b = _random_batch(rng, r=4)
        raw = rng.normal(size=(4, 6))

        def build(p):
            cb = ContrastiveBatch(nk.normalize(p["v"], axis=1), b.labels, b.prototypes, 0.5)
            return l_ins(cb) + l_proto(cb)

        assert nk.grad_check(build, {"v": raw}).passed


def test_combined_loss_components():
    rng = np.random.default_rng(6)
    b = _random_batch(rng, r=8)
    l_reg = nk.Value(1.5)
    total, parts = combined_loss(l_reg, b, 0.0)
    assert total.data == 1.5
    total, parts = combined_loss(l_reg, b, 0.01)
    assert total.data == pytest.approx(1.5 + 0.01 * (parts["L_ins"] + parts["L_proto"]), rel=1e-15)
    eth = ContrastiveBatch(b.embeddings, b.labels, b.prototypes, 0.5)
    total, parts = combined_loss(l_reg, eth, 10.0, reduction="mean")
    assert total.data == pytest.approx(1.5 + 10.0 * (parts["L_ins"] + parts["L_proto"]) / 8, rel=1e-14)
    with pytest.raises(ContractError):
        combined_loss(l_reg, b, -1.0)


def test_contract_errors():
    rng = np.random.default_rng(7)
    protos = _single(["easy"], [[1.0, 0.0]], [0.1])
    with pytest.raises(ContractError):
        l_ins(ContrastiveBatch(nk.Value(np.array([[1.0, 0.0]])), ["easy"], protos, 0.1))
    with pytest.raises(ContractError, match="hard"):
        l_proto(ContrastiveBatch(nk.Value(np.array([[1.0, 0.0]])), ["hard"], protos, 0.1))
    with pytest.raises(ContractError):
        ContrastiveBatch(nk.Value(rng.normal(size=(2, 2)) * 3), ["easy", "easy"], protos, 0.1)
    with pytest.raises(ContractError):
        ContrastiveBatch(nk.Value(np.eye(2)), ["easy", "easy"], protos, 0.0)
