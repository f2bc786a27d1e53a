"""Tape gradients against central finite differences, plus error contracts."""

import numpy as np
import pytest

from smoothbits import autodiff as ad
from smoothbits.autodiff import Tape, Tensor, ShapeError, DomainError, NumericsError

RNG = np.random.default_rng(20240811)
H = 1e-5
TOL = 1e-5


def scalarize(op):
    """Wrap an op producing any shape into a scalar objective for checking."""
    def f(x):
        y = op(x)
        return y if y.data.shape == () else ad.tsum(y)
    return f


UNARY_CASES = [
    ("neg", ad.neg, lambda n: RNG.normal(size=n)),
    ("exp", ad.exp, lambda n: RNG.normal(size=n)),
    ("log", ad.log, lambda n: RNG.uniform(0.1, 3.0, size=n)),
    ("log1p", ad.log1p, lambda n: RNG.uniform(-0.5, 3.0, size=n)),
    ("sqrt", ad.sqrt, lambda n: RNG.uniform(0.1, 3.0, size=n)),
    ("sigmoid", ad.sigmoid, lambda n: RNG.normal(size=n)),
    ("tanh", ad.tanh, lambda n: RNG.normal(size=n)),
    ("logit", ad.logit, lambda n: RNG.uniform(0.05, 0.95, size=n)),
    ("softplus", ad.softplus, lambda n: RNG.normal(size=n)),
    ("power2.5", lambda x: ad.power(x, 2.5), lambda n: RNG.uniform(0.2, 2.0, size=n)),
    ("max_const", lambda x: ad.maximum_const(x, 0.3), lambda n: RNG.normal(size=n)),
    ("clamp", lambda x: ad.clamp(x, -0.5, 0.5), lambda n: RNG.normal(size=n)),
]


@pytest.mark.parametrize("name,op,sampler", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_primitives_match_finite_differences(name, op, sampler):
    x0 = sampler(5)
    report = ad.grad_check(scalarize(op), x0, h=H, tol=TOL)
    assert report.passed, f"{name}: max rel err {report.max_rel_err:.2e}"


BINARY_CASES = [
    ("add", ad.add), ("sub", ad.sub), ("mul", ad.mul),
    ("div", ad.div), ("logaddexp", ad.logaddexp),
]


@pytest.mark.parametrize("name,op", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
def test_binary_primitives_match_finite_differences(name, op):
    other = RNG.uniform(0.5, 2.0, size=5)
    x0 = RNG.uniform(0.5, 2.0, size=5)
    for fixed_side in ("left", "right"):
        if fixed_side == "left":
            f = scalarize(lambda x: op(Tensor(other), x))
        else:
            f = scalarize(lambda x: op(x, Tensor(other)))
        report = ad.grad_check(f, x0, h=H, tol=TOL)
        assert report.passed, f"{name}/{fixed_side}: {report.max_rel_err:.2e}"


def test_binary_both_sides_on_tape():
    def f(x):
        a = ad.mul(x, x)
        b = ad.add(x, 2.0)
        return ad.tsum(ad.div(a, b))
    report = ad.grad_check(f, RNG.uniform(0.5, 2.0, size=4), h=H, tol=TOL)
    assert report.passed


def test_matmul_and_affine_gradients():
    mask = RNG.normal(size=(3, 2))
    tape = Tape()
    x = tape.leaf(RNG.normal(size=(3, 4)))
    w = tape.leaf(RNG.normal(size=(4, 2)))
    bias = tape.leaf(RNG.normal(size=2))
    y = ad.tsum(ad.mul(ad.affine(x, w, bias), mask))
    tape.backward(y)
    for leaf, name in ((x, "x"), (w, "w"), (bias, "b")):
        analytic = tape.grad_of(leaf)
        numeric = np.zeros_like(leaf.data)
        it = np.nditer(leaf.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            for sign in (1.0, -1.0):
                shifted = {n: l.data.copy() for l, n in ((x, "x"), (w, "w"), (bias, "b"))}
                shifted[name][idx] += sign * H
                out = ad.affine(Tensor(shifted["x"]), Tensor(shifted["w"]),
                                Tensor(shifted["b"]))
                numeric[idx] += sign * float(np.sum(out.data * mask))
            numeric[idx] /= 2 * H
            it.iternext()
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert np.max(rel) < TOL, f"affine leaf {name}: {np.max(rel):.2e}"


def _basis_mask(n, lo, hi):
    m = np.zeros(n)
    m[lo:hi] = 1.0
    return m


def test_sum_mean_concat_where_gradients():
    def f(v):
        a = ad.tmean(v, axis=None)
        b = ad.tsum(ad.concat([v, ad.mul(v, 2.0)], axis=0))
        c = ad.tsum(ad.where(np.array([True, False, True, False]), v, ad.mul(v, -1.0)))
        return ad.add(ad.add(a, b), c)
    report = ad.grad_check(f, RNG.normal(size=4), h=H, tol=TOL)
    assert report.passed


def test_row_vector_broadcast_gradient():
    m = RNG.normal(size=(3, 4))

    def f(v):
        return ad.tsum(ad.mul(ad.add(Tensor(m), v), Tensor(m)))

    report = ad.grad_check(f, RNG.normal(size=4), h=H, tol=TOL)
    assert report.passed


def test_sigmoid_at_zero():
    assert ad.sigmoid(0.0).item() == 0.5


def test_logit_sigmoid_inverse_pair():
    x = ad.logit(ad.sigmoid(Tensor(1.7)))
    assert abs(x.item() - 1.7) < 1e-12


def test_stop_gradient_freezes_one_factor():
    tape = Tape()
    x = tape.leaf(3.0)
    y = ad.mul(ad.stop_gradient(x), x)
    tape.backward(y)
    assert tape.grad_of(x) == pytest.approx(3.0)  # not 6


def test_backward_of_sum_is_all_ones():
    tape = Tape()
    x = tape.leaf(RNG.normal(size=(3, 2)))
    tape.backward(ad.tsum(x))
    assert np.array_equal(tape.grad_of(x), np.ones((3, 2)))


def test_product_rule():
    tape = Tape()
    x = tape.leaf(2.0)
    y = tape.leaf(5.0)
    tape.backward(ad.mul(x, y))
    assert tape.grad_of(x) == pytest.approx(5.0)
    assert tape.grad_of(y) == pytest.approx(2.0)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(2.0)
    unused = tape.leaf(np.ones(3))
    tape.backward(ad.mul(x, x))
    assert np.array_equal(tape.grad_of(unused), np.zeros(3))


def test_gradient_accumulation_is_linear():
    x0 = RNG.normal(size=4)

    def run(fs):
        tape = Tape()
        x = tape.leaf(x0)
        total = fs[0](x)
        for f in fs[1:]:
            total = ad.add(total, f(x))
        tape.backward(total)
        return tape.grad_of(x)

    f1 = lambda x: ad.tsum(ad.exp(x))
    f2 = lambda x: ad.tsum(ad.mul(x, x))
    combined = run([f1, f2])
    assert np.allclose(combined, run([f1]) + run([f2]), rtol=0, atol=1e-15)


def test_non_scalar_root_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(ad.mul(x, 2.0))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    msg = str(exc.value)
    assert "add" in msg and "(3,)" in msg and "(4,)" in msg


def test_matmul_inner_extent_checked():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_domain_errors_on_constants():
    with pytest.raises(DomainError):
        ad.log(Tensor(-1.0))
    with pytest.raises(DomainError):
        ad.logit(Tensor(1.5))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor(np.array([-0.1, 2.0])))


def test_nan_trap_flags_offending_op():
    tape = Tape(nan_trap=True)
    x = tape.leaf(np.array([1.0, -1.0]))
    with pytest.raises(NumericsError) as exc, np.errstate(invalid="ignore"):
        ad.log(ad.mul(x, 1.0))
    assert "log" in str(exc.value)


def test_grad_check_constant_function_passes():
    report = ad.grad_check(lambda x: ad.mul(ad.tsum(ad.mul(x, 0.0)), 1.0),
                           RNG.normal(size=3), h=H, tol=TOL)
    assert report.passed
    assert report.max_rel_err == 0.0


def test_grad_check_sigmoid_tight():
    report = ad.grad_check(lambda x: ad.sigmoid(x), np.asarray(0.3), h=1e-5, tol=1e-7)
    assert report.passed


def test_grad_check_reports_nan_probe():
    def f(x):
        diff = ad.sub(x, x)
        with np.errstate(invalid="ignore", divide="ignore"):
            return ad.tsum(ad.div(diff, diff))  # 0/0 at every probe

    with pytest.raises(NumericsError) as exc, \
            np.errstate(invalid="ignore", divide="ignore"):
        ad.grad_check(f, np.array([1.0, 2.0]), h=1e-5)
    assert "coordinate 0" in str(exc.value)


def test_deterministic_replay_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4, 3)))
        w = tape.leaf(rng.normal(size=(3, 2)))
        y = ad.tsum(ad.sigmoid(ad.matmul(x, w)))
        tape.backward(y)
        return y.item(), tape.grad_of(w).tobytes()

    assert run() == run()


def test_tensors_detached_from_tape_have_no_node():
    t = ad.stop_gradient(Tensor(np.ones(3)))
    assert t.tape is None and t.node is None
