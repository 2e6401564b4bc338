import numpy as np
import pytest

from uwmmse import autodiff as ad
from uwmmse.channel import NetworkConfig, sample_network
from uwmmse.model import ModelParams, forward
from uwmmse.train import loss
from conftest import crandn, random_hpd


def abs2_program(_, p):
    z = p["z"]
    return ad.real(ad.mul(z, ad.conj(z)))


def test_abs2_value_and_tape():
    tape, out = ad.record_forward(abs2_program, None, {"z": np.array(3 + 4j)})
    assert float(ad.value(out)) == 25.0
    # conj, mul, real: conj is a primitive of its own (see ledger)
    assert len(tape) == 3
    assert [n.kind for n in tape.nodes] == ["conj", "mul", "real"]


def test_abs2_gradient():
    tape, out = ad.record_forward(abs2_program, None, {"z": np.array(3 + 4j)})
    assert ad.backward(tape, out)["z"] == pytest.approx(6 + 8j, abs=1e-15)


def test_constant_program_has_zero_gradient():
    tape, out = ad.record_forward(lambda _, p: np.float64(2.0), None, {"z": np.array(1j)})
    assert len(tape) == 0
    assert ad.backward(tape, out)["z"] == 0


def test_independent_parameter_gets_zero():
    def program(_, p):
        return ad.real(ad.mul(p["a"], ad.conj(p["a"])))

    tape, out = ad.record_forward(program, None, {"a": np.array(1 + 1j), "b": np.ones((2, 2), complex)})
    g = ad.backward(tape, out)
    assert np.all(g["b"] == 0)
    assert g["b"].shape == (2, 2)


def test_topological_order():
    tape, _ = ad.record_forward(abs2_program, None, {"z": np.array(1 + 2j)})
    for pos, node in enumerate(tape.nodes):
        for a in node.args:
            if isinstance(a, int):
                producer = tape._node_of[a]
                assert producer is None or producer < pos


def test_complex_loss_rejected():
    tape, out = ad.record_forward(lambda _, p: ad.mul(p["z"], p["z"]), None, {"z": np.array(1 + 1j)})
    with pytest.raises(ad.ContractError):
        ad.backward(tape, out)


def test_unsupported_primitive():
    with pytest.raises(ad.UnsupportedPrimitiveError):
        ad.apply("cosh", np.ones(2))


def test_logdet_diag_matches_finite_differences():
    def program(_, p):
        x = p["p"]
        d = ad.real(ad.mul(x, ad.conj(x)))
        A = ad.add(np.eye(3), ad.mul(np.eye(3), d))  # I + diag(|p|^2)
        return ad.logdet_cap(A)

    params = {"p": np.array([0.3 + 0.7j, -1.1 + 0.2j, 0.5 - 0.4j])}
    rep = ad.check_gradients(program, None, params, h=1e-6)
    assert len(rep) == 6
    assert rep.max_rel_error <= 1e-6
    # closed form: 2 p / ((1 + |p|^2) ln 2)
    tape, out = ad.record_forward(program, None, params)
    g = ad.backward(tape, out)["p"]
    p = params["p"]
    assert np.allclose(g, 2 * p / ((1 + np.abs(p) ** 2) * np.log(2)), rtol=1e-13)


def test_quadratic_gradcheck_exact():
    rng = np.random.default_rng(0)
    A = random_hpd(rng, 4)

    def program(_, p):
        x = p["x"]
        return ad.real(ad.sum(ad.mul(ad.conj(x), ad.matmul(A, x))))

    rep = ad.check_gradients(program, None, {"x": crandn(rng, 4, 1)}, h=1e-5)
    assert rep.max_rel_error < 1e-8


def test_zero_parameter_report_is_empty():
    rep = ad.check_gradients(lambda _, p: np.float64(1.0), None, {}, h=1e-6)
    assert len(rep) == 0
    assert rep.max_rel_error == 0.0


@pytest.mark.parametrize("h", [1e-9, 1e-3])
def test_step_size_bounds(h):
    with pytest.raises(ValueError):
        ad.check_gradients(abs2_program, None, {"z": np.array(1j)}, h=h)


def test_linearity():
    rng = np.random.default_rng(3)
    A = random_hpd(rng, 3)
    params = {"x": crandn(rng, 3, 2)}

    def l1(_, p):
        return ad.logdet_cap(ad.add(A, ad.matmul(p["x"], ad.adjoint(p["x"]))))

    def l2(_, p):
        return ad.frob_norm(ad.matmul(A, p["x"]))

    def combo(_, p):
        return ad.add(ad.scale(l1(_, p), 2.5), ad.scale(l2(_, p), -0.75))

    def grad(prog):
        tape, out = ad.record_forward(prog, None, params)
        return ad.backward(tape, out)["x"]

    expected = 2.5 * grad(l1) - 0.75 * grad(l2)
    assert np.max(np.abs(grad(combo) - expected)) <= 1e-12 * max(1.0, np.max(np.abs(expected)))


def _saturation_program(pmax):
    def program(_, p):
        V = ad.saturate(p["V"], pmax)
        return ad.real(ad.sum(ad.mul(ad.conj(V), ad.matmul(np.diag([1.0, 2.0, 3.0]), V))))

    return program


def test_saturation_gradient_both_branches():
    rng = np.random.default_rng(7)
    V = crandn(rng, 2, 3, 1)
    V[0] *= 0.1 / np.linalg.norm(V[0])  # unsaturated, power 0.01
    V[1] *= 2.0 / np.linalg.norm(V[1])  # saturated, power 4
    rep = ad.check_gradients(_saturation_program(1.0), None, {"V": V}, h=1e-6)
    assert rep.max_rel_error <= 1e-6


def test_saturation_identity_in_unsaturated_branch():
    V = np.array([[0.1 + 0.2j], [0.3j]])

    def program(_, p):
        W = ad.saturate(p["V"], 1.0)
        return ad.real(ad.sum(ad.mul(np.conj(V), W)))

    tape, out = ad.record_forward(program, None, {"V": V})
    assert np.allclose(ad.backward(tape, out)["V"], V, atol=0)


def test_crelu_backward_masks():
    x = np.array([1 + 1j, -1 + 2j, 3 - 1j, -2 - 2j])
    g = np.array([0.5 + 0.25j, 1 + 1j, 2 + 3j, 4 + 5j])

    def program(_, p):
        return ad.real(ad.sum(ad.mul(np.conj(g), ad.crelu(p["x"]))))

    tape, out = ad.record_forward(program, None, {"x": x})
    got = ad.backward(tape, out)["x"]
    want = np.where(x.real > 0, g.real, 0) + 1j * np.where(x.imag > 0, g.imag, 0)
    assert np.array_equal(got, want)


def test_hermitian_solve_gradient():
    rng = np.random.default_rng(11)
    B = crandn(rng, 3, 2)

    def program(_, p):
        A = ad.add(ad.matmul(p["Y"], ad.adjoint(p["Y"])), np.eye(3))
        return ad.frob_norm(ad.hermitian_solve(A, B))

    rep = ad.check_gradients(program, None, {"Y": crandn(rng, 3, 3)}, h=1e-6)
    assert rep.max_rel_error <= 1e-6


def test_row_normalize_and_node_sum_gradients():
    rng = np.random.default_rng(12)
    C = crandn(rng, 4, 4)

    def program(_, p):
        N = ad.row_normalize(p["S"])
        return ad.real(ad.sum(ad.mul(np.conj(C), ad.node_sum(ad.matmul(N, N), -1))))

    rep = ad.check_gradients(program, None, {"S": crandn(rng, 4, 4)}, h=1e-6)
    assert rep.max_rel_error <= 1e-6


def test_ordered_sum_is_permutation_invariant():
    rng = np.random.default_rng(5)
    x = crandn(rng, 6, 40) * 10.0 ** rng.integers(-8, 8, size=(6, 40))
    base = ad.ordered_sum(x, -1)
    for _ in range(5):
        perm = rng.permutation(40)
        assert np.array_equal(ad.ordered_sum(x[:, perm], -1), base)
    assert np.allclose(base, x.sum(-1), rtol=1e-12, atol=1e-12 * np.abs(x).max())


def _small_model(M=3):
    net = NetworkConfig(M=M)
    H = sample_network(net, rng_seed=4)
    params = ModelParams.init(rng=2)
    return net, H, params


def test_replay_equals_direct_forward():
    net, H, params = _small_model()

    def program(H, p):
        V, _ = forward(H, p, 1, sigma=net.sigma)
        return V

    tape, V_tape = ad.record_forward(program, H, params)
    direct, _ = forward(H, params, 1, sigma=net.sigma)
    replayed = tape.replay()[-1]
    assert np.max(np.abs(ad.value(V_tape) - direct)) <= 1e-15
    assert np.max(np.abs(replayed - direct)) <= 1e-15


def test_uwmmse_loss_gradcheck():
    # float64 round-off in the loss at the default noise level swamps the
    # difference quotient, so the shifted losses are replayed in mpmath
    net = NetworkConfig(M=4)
    H = sample_network(net, rng_seed=9)[None]
    params = ModelParams.init(rng=1)

    def program(H, p):
        return loss(H, p, 1, sigma=net.sigma)

    rep = ad.check_gradients(program, H, params, h=1e-6, n_coords=20, rng=0, precision="mp")
    assert len(rep) == 20
    assert rep.fraction_below(1e-4) >= 0.95


def test_gradient_set_arithmetic():
    a = ad.GradientSet({"x": np.array([1 + 1j]), "y": np.array([2.0])})
    b = ad.GradientSet({"x": np.array([1j])})
    s = (a + b) * 0.5
    assert s["x"][0] == 0.5 + 1j and s["y"][0] == 1.0
    assert s.all_finite()
    assert not ad.GradientSet({"x": np.array([np.nan])}).all_finite()
