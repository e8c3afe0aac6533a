import numpy as np
import pytest

from dpseq.autodiff import GraphError, ShapeMismatch, Tape, Tensor, backward, per_example_grads


def central_diff(f, x0, h=1e-5):
    """Finite-difference gradient of scalar f at flat vector x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for j in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            Tensor(np.array([np.inf]))

    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6


class TestRecord:
    def test_add_elementwise(self):
        t = Tape()
        out = t.add(t.leaf([1.0, 2.0]), t.leaf([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_matmul_ones(self):
        t = Tape()
        out = t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 2))))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_matmul_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeMismatch) as exc:
            t.matmul(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((4, 2))))
        assert "matmul" in str(exc.value)
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_appends_nodes_in_topological_order(self):
        t = Tape()
        a = t.leaf([1.0])
        b = t.scale(a, 2.0)
        c = t.add(a, b)
        for nid, node in enumerate(t.nodes):
            assert all(p < nid for p in node.parents)
        assert c.node_id == len(t.nodes) - 1


class TestBackward:
    def test_sum_of_squares(self):
        t = Tape()
        x = t.leaf(np.array([3.0]), param=True)
        loss = t.sum(t.mul(x, x))
        grads = backward(t, loss)
        np.testing.assert_allclose(grads[x.node_id].data, [6.0])

    def test_sum_gives_ones(self):
        t = Tape()
        x = t.leaf(np.arange(12, dtype=np.float64).reshape(3, 4), param=True)
        grads = backward(t, t.sum(x))
        np.testing.assert_array_equal(grads[x.node_id].data, np.ones((3, 4)))

    def test_loss_not_scalar(self):
        t = Tape()
        x = t.leaf([1.0, 2.0], param=True)
        with pytest.raises(GraphError):
            backward(t, x)

    def test_loss_not_on_tape(self):
        t = Tape()
        t.leaf([1.0], param=True)
        with pytest.raises(GraphError):
            backward(t, Tensor([1.0]))

    def test_unused_param_gets_zero_grad(self):
        t = Tape()
        x = t.leaf([2.0], param=True)
        unused = t.leaf(np.ones((2, 2)), param=True)
        grads = backward(t, t.sum(x))
        np.testing.assert_array_equal(grads[unused.node_id].data, np.zeros((2, 2)))

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(3, 4))
        b1 = rng.normal(size=(4,))
        w2 = rng.normal(size=(4, 2))
        x = rng.normal(size=(5, 3))

        def run(w1v, b1v, w2v):
            t = Tape()
            p1 = t.leaf(w1v, param=True)
            p2 = t.leaf(b1v, param=True)
            p3 = t.leaf(w2v, param=True)
            h = t.relu(t.add(t.matmul(t.leaf(x), p1), p2))
            out = t.matmul(h, p3)
            loss = t.sum(t.mul(out, out))
            return t, loss, (p1, p2, p3)

        t, loss, params = run(w1, b1, w2)
        grads = backward(t, loss)
        flats = [w1, b1, w2]
        for i, p in enumerate(params):
            def f(flat, i=i):
                args = [a.copy() for a in flats]
                args[i] = flat.reshape(flats[i].shape)
                _, l, _ = run(*args)
                return l.item()

            fd = central_diff(f, flats[i].ravel()).reshape(flats[i].shape)
            assert rel_err(grads[p.node_id].data, fd) < 1e-4


# One gradient-check entry per op kind; each builds a scalar loss whose path
# exercises the op, differentiating w.r.t. the first leaf.
def _simple(op):
    def build(t, x):
        if op == "add":
            return t.sum(t.mul(t.add(x, t.leaf(np.ones(x.shape))), x))
        if op == "mul":
            return t.sum(t.mul(x, t.leaf(np.arange(1.0, 1.0 + x.size).reshape(x.shape))))
        if op == "relu":
            return t.sum(t.mul(t.relu(x), t.relu(x)))
        if op == "scale":
            return t.sum(t.mul(t.scale(x, 1.7), x))
        if op == "softmax":
            s = t.softmax(x)
            return t.sum(t.mul(s, t.leaf(np.arange(1.0, 1.0 + x.size).reshape(x.shape))))
        if op == "reshape":
            r = t.reshape(x, (x.size,))
            return t.sum(t.mul(r, r))
        if op == "transpose":
            tr = t.transpose(x, (1, 0))
            return t.sum(t.mul(tr, tr))
        if op == "slice":
            s = t.slice(x, (slice(0, 2), slice(1, 3)))
            return t.sum(t.mul(s, s))
        if op == "sum":
            s = t.sum(x, axis=1)
            return t.sum(t.mul(s, s))
        raise AssertionError(op)

    return build


SIMPLE_OPS = ["add", "mul", "relu", "scale", "softmax", "reshape", "transpose", "slice", "sum"]


@pytest.mark.parametrize("op", SIMPLE_OPS)
def test_gradient_check_simple_ops(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x0 = rng.normal(size=(4, 5)) + 0.1  # keep relu away from the kink

    def f(flat):
        t = Tape()
        x = t.leaf(flat.reshape(4, 5), param=True)
        return _simple(op)(t, x).item()

    t = Tape()
    x = t.leaf(x0, param=True)
    grads = backward(t, _simple(op)(t, x))
    fd = central_diff(f, x0.ravel()).reshape(4, 5)
    assert rel_err(grads[x.node_id].data, fd) < 1e-4


def test_gradient_check_matmul():
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))

    def run(av, bv):
        t = Tape()
        a = t.leaf(av, param=True)
        b = t.leaf(bv, param=True)
        out = t.matmul(a, b)
        return t, t.sum(t.mul(out, out)), a, b

    t, loss, a, b = run(a0, b0)
    grads = backward(t, loss)
    fd_a = central_diff(lambda f: run(f.reshape(3, 4), b0)[1].item(), a0.ravel())
    fd_b = central_diff(lambda f: run(a0, f.reshape(4, 2))[1].item(), b0.ravel())
    assert rel_err(grads[a.node_id].data, fd_a.reshape(3, 4)) < 1e-4
    assert rel_err(grads[b.node_id].data, fd_b.reshape(4, 2)) < 1e-4


def test_gradient_check_batched_matmul():
    rng = np.random.default_rng(8)
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(4, 5))

    def run(av, bv):
        t = Tape()
        a = t.leaf(av, param=True)
        b = t.leaf(bv, param=True)
        out = t.matmul(a, b)
        return t, t.sum(t.mul(out, out)), a, b

    t, loss, a, b = run(a0, b0)
    grads = backward(t, loss)
    fd_b = central_diff(lambda f: run(a0, f.reshape(4, 5))[1].item(), b0.ravel())
    assert rel_err(grads[b.node_id].data, fd_b.reshape(4, 5)) < 1e-4
    fd_a = central_diff(lambda f: run(f.reshape(2, 3, 4), b0)[1].item(), a0.ravel())
    assert rel_err(grads[a.node_id].data, fd_a.reshape(2, 3, 4)) < 1e-4


def test_gradient_check_layer_norm():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(3, 6))
    s0 = rng.normal(size=(6,)) + 1.0
    o0 = rng.normal(size=(6,))

    def run(xv, sv, ov):
        t = Tape()
        x = t.leaf(xv, param=True)
        s = t.leaf(sv, param=True)
        o = t.leaf(ov, param=True)
        y = t.layer_norm(x, s, o)
        return t, t.sum(t.mul(y, y)), (x, s, o)

    t, loss, (x, s, o) = run(x0, s0, o0)
    grads = backward(t, loss)
    fd_x = central_diff(lambda f: run(f.reshape(3, 6), s0, o0)[1].item(), x0.ravel())
    fd_s = central_diff(lambda f: run(x0, f, o0)[1].item(), s0)
    fd_o = central_diff(lambda f: run(x0, s0, f)[1].item(), o0)
    assert rel_err(grads[x.node_id].data, fd_x.reshape(3, 6)) < 1e-4
    assert rel_err(grads[s.node_id].data, fd_s) < 1e-4
    assert rel_err(grads[o.node_id].data, fd_o) < 1e-4


def test_gradient_check_embedding():
    rng = np.random.default_rng(10)
    table0 = rng.normal(size=(7, 3))
    ids = np.array([[0, 2, 2], [6, 1, 0]])

    def run(tv):
        t = Tape()
        table = t.leaf(tv, param=True)
        e = t.embedding(table, ids, batched=True)
        return t, t.sum(t.mul(e, e)), table

    t, loss, table = run(table0)
    grads = backward(t, loss)
    fd = central_diff(lambda f: run(f.reshape(7, 3))[1].item(), table0.ravel())
    assert rel_err(grads[table.node_id].data, fd.reshape(7, 3)) < 1e-4


def test_gradient_check_cross_entropy():
    rng = np.random.default_rng(11)
    logits0 = rng.normal(size=(2, 4, 5))
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])

    def run(lv):
        t = Tape()
        logits = t.leaf(lv, param=True, batched=True)
        losses = t.cross_entropy(logits, targets, mask)
        return t, t.sum(losses), logits

    t, loss, logits = run(logits0)
    grads = backward(t, loss)
    fd = central_diff(lambda f: run(f.reshape(2, 4, 5))[1].item(), logits0.ravel())
    assert rel_err(grads[logits.node_id].data, fd.reshape(2, 4, 5)) < 1e-4


def test_embedding_out_of_range():
    t = Tape()
    table = t.leaf(np.zeros((4, 2)), param=True)
    with pytest.raises(GraphError):
        t.embedding(table, np.array([[0, 4]]))


def test_cross_entropy_empty_example_rejected():
    t = Tape()
    logits = t.leaf(np.zeros((2, 3, 4)), batched=True)
    mask = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(GraphError):
        t.cross_entropy(logits, np.zeros((2, 3), dtype=int), mask)


class TestPerExampleGrads:
    def _linear_tape(self, x, w_val):
        t = Tape()
        w = t.leaf(w_val, param=True)
        xx = t.leaf(x, batched=True)
        pred = t.matmul(xx, w)  # [B, 1]
        sq = t.mul(pred, pred)
        losses = t.reshape(sq, (x.shape[0],))
        return t, losses, w

    def test_single_example_matches_backward(self):
        rng = np.random.default_rng(1)
        t, losses, w = self._linear_tape(rng.normal(size=(1, 3)), rng.normal(size=(3, 1)))
        per = per_example_grads(t, losses)
        scalar = t.slice(losses, 0)
        full = backward(t, scalar)
        assert len(per) == 1
        np.testing.assert_array_equal(per[0][w.node_id].data, full[w.node_id].data)

    def test_matches_loop_of_backward(self):
        rng = np.random.default_rng(2)
        t, losses, w = self._linear_tape(rng.normal(size=(3, 4)), rng.normal(size=(4, 1)))
        per = per_example_grads(t, losses)
        for i in range(3):
            oracle = backward(t, t.slice(losses, i))
            diff = np.abs(per[i][w.node_id].data - oracle[w.node_id].data).max()
            assert diff <= 1e-12

    def test_duplicated_examples_get_identical_grads(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        x[2] = x[0]
        t, losses, w = self._linear_tape(x, rng.normal(size=(4, 1)))
        per = per_example_grads(t, losses)
        np.testing.assert_array_equal(per[0][w.node_id].data, per[2][w.node_id].data)

    def test_mixing_reduction_rejected(self):
        t = Tape()
        x = t.leaf(np.ones((4, 2)), batched=True)
        total = t.sum(x, axis=0)  # batch-norm-style reduction across examples
        back = t.add(x, total)
        losses = t.sum(t.mul(back, back), axis=1)
        with pytest.raises(GraphError):
            per_example_grads(t, losses)

    def test_non_batched_loss_rejected(self):
        t = Tape()
        x = t.leaf(np.ones(3), param=True)
        with pytest.raises(GraphError):
            per_example_grads(t, t.mul(x, x))

    def test_loop_equivalence_random_graphs(self):
        # 100 random trials on batches B <= 8, deep enough to cross several ops
        rng = np.random.default_rng(4)
        for _ in range(100):
            batch = int(rng.integers(1, 9))
            din = int(rng.integers(2, 6))
            dh = int(rng.integers(2, 6))
            t = Tape()
            w1 = t.leaf(rng.normal(size=(din, dh)), param=True)
            b1 = t.leaf(rng.normal(size=(dh,)), param=True)
            w2 = t.leaf(rng.normal(size=(dh, 1)), param=True)
            x = t.leaf(rng.normal(size=(batch, din)), batched=True)
            h = t.relu(t.add(t.matmul(x, w1), b1))
            pred = t.matmul(h, w2)
            losses = t.reshape(t.mul(pred, pred), (batch,))
            per = per_example_grads(t, losses)
            assert len(per) == batch
            for i in range(batch):
                oracle = backward(t, t.slice(losses, i))
                for pid in t.parameter_set:
                    diff = np.abs(per[i][pid].data - oracle[pid].data).max()
                    assert diff <= 1e-12


def test_deterministic_gradients():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 2))

    def run():
        t = Tape()
        w = t.leaf(w0, param=True)
        x = t.leaf(x0, batched=True)
        y = t.softmax(t.matmul(x, w))
        loss = t.sum(t.mul(y, y))
        return backward(t, loss)[w.node_id].data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()
