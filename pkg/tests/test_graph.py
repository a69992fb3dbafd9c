import numpy as np
import pytest

import oracles
from fedmoe.errors import UsageError
from fedmoe.numerics import graph

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def check_gradients(build_loss, arrays, tol=GRAD_TOL):
    """Compare recorded-graph gradients against central finite differences.

    ``build_loss`` maps a list of ndarrays to a scalar loss Value; the same
    callable drives both routes so only the differentiation differs.
    """
    leaves = [graph.leaf(a) for a in arrays]
    analytic = graph.gradient(build_loss(leaves), leaves)

    def f(raw):
        return float(build_loss([graph.leaf(a) for a in raw]).data)

    numeric = oracles.finite_difference(f, [a.copy() for a in arrays], step=FD_STEP)
    err = oracles.max_relative_error(analytic, numeric)
    assert err < tol, f"max relative error {err:.3e}"


class TestScalarRules:
    def test_square_at_three(self):
        w = graph.leaf(np.array([3.0]))
        loss = graph.sum_all(graph.mul(w, w))
        (grad,) = graph.gradient(loss, [w])
        assert grad.tolist() == [6.0]

    def test_off_path_parameter_is_rejected(self):
        w = graph.leaf(np.array([3.0]))
        other = graph.leaf(np.array([1.0]))
        loss = graph.sum_all(graph.mul(w, w))
        with pytest.raises(UsageError):
            graph.gradient(loss, [other])

    def test_non_scalar_loss_is_rejected(self):
        w = graph.leaf(np.array([3.0]))
        with pytest.raises(UsageError):
            graph.gradient(graph.mul(w, w), [w])


class TestLayerGradients:
    def test_dense_cross_entropy_path(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(2, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        labels = [0, 2]

        def build(leaves):
            xv, wv, bv = leaves
            return graph.cross_entropy(graph.dense(xv, wv, bv), labels)

        check_gradients(build, [x, w, b])

    def test_conv_relu_pool_dense_path(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(2, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        kb = rng.normal(size=3)
        w = rng.normal(size=(3 * 2 * 2, 4))
        b = rng.normal(size=4)
        labels = [1, 3]

        def build(leaves):
            xv, kv, kbv, wv, bv = leaves
            h = graph.max_pool2x2(graph.relu(graph.conv2d(xv, kv, kbv)))
            return graph.cross_entropy(graph.dense(graph.flatten(h), wv, bv), labels)

        check_gradients(build, [x, k, kb, w, b])

    def test_sigmoid_path(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(3, 4))

        def build(leaves):
            return graph.sum_all(graph.mul(graph.sigmoid(leaves[0]), graph.sigmoid(leaves[0])))

        check_gradients(build, [x])

    @pytest.mark.parametrize("seed", range(4))
    def test_every_layer_kind_small_random_shapes(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(2, 1, 4, 4))
        k = rng.normal(size=(2, 1, 3, 3))
        kb = rng.normal(size=2)
        w = rng.normal(size=(2 * 1 * 1, 3))
        b = rng.normal(size=3)
        labels = rng.integers(0, 3, size=2).tolist()

        def build(leaves):
            xv, kv, kbv, wv, bv = leaves
            h = graph.relu(graph.conv2d(xv, kv, kbv))
            h = graph.max_pool2x2(h)
            h = graph.dense(graph.flatten(h), wv, bv)
            return graph.cross_entropy(h, labels)

        check_gradients(build, [x, k, kb, w, b])


class TestGateAndMixingGradients:
    def test_gate_weights_through_mixing(self):
        # Loss path: linear gate -> sigmoid -> convex mix of frozen experts -> cross entropy.
        rng = np.random.default_rng(31)
        v = rng.normal(size=(4, 6))
        w = rng.normal(scale=0.3, size=(6, 1))
        b = rng.normal(scale=0.1, size=1)
        global_logits = rng.normal(size=(4, 3))
        local_logits = rng.normal(size=(4, 3))
        labels = [0, 1, 2, 1]

        def build(leaves):
            wv, bv = leaves
            score = graph.reshape(graph.dense(graph.leaf(v), wv, bv), (4,))
            g = graph.sigmoid(score)
            mixed = graph.mix(g, graph.leaf(global_logits), graph.leaf(local_logits))
            return graph.cross_entropy(mixed, labels)

        check_gradients(build, [w, b])

    def test_mix_gradient_flows_to_both_experts(self):
        rng = np.random.default_rng(32)
        g = rng.uniform(0.2, 0.8, size=3)
        glob = rng.normal(size=(3, 4))
        loc = rng.normal(size=(3, 4))
        labels = [0, 3, 2]

        def build(leaves):
            gv, globv, locv = leaves
            return graph.cross_entropy(graph.mix(gv, globv, locv), labels)

        check_gradients(build, [g, glob, loc])

    def test_identical_experts_zero_gate_gradient(self):
        rng = np.random.default_rng(33)
        v = rng.normal(size=(4, 5))
        expert = rng.normal(size=(4, 3))
        w = graph.leaf(np.zeros((5, 1)))
        b = graph.leaf(np.zeros(1))
        score = graph.reshape(graph.dense(graph.leaf(v), w, b), (4,))
        mixed = graph.mix(graph.sigmoid(score), graph.leaf(expert), graph.leaf(expert))
        loss = graph.cross_entropy(mixed, [0, 1, 2, 0])
        gw, gb = graph.gradient(loss, [w, b])
        assert np.abs(gw).max() == 0.0
        assert np.abs(gb).max() == 0.0
