import numpy as np
import pytest

from hcrom import inverse as inv
from hcrom import reduce as rd
from hcrom.fem import EMISSION, EXCITATION, assemble_system
from hcrom.forward import apply_T, solve_emission_adjoint, solve_excitation
from hcrom.harness import make_phantom, run_online, simulate

DELTA = 1e-5


def test_add_noise():
    M = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(inv.add_noise(M, 0, 1).data, M)
    a = inv.add_noise(M, 1e-3, 7)
    assert np.linalg.norm(a.data - M) == pytest.approx(1e-3, rel=1e-12)
    assert np.array_equal(a.data, inv.add_noise(M, 1e-3, 7).data)
    assert not np.array_equal(a.data, inv.add_noise(M, 1e-3, 8).data)


def test_precompress_consistent(op0, model0, rng):
    c = rng.standard_normal(op0.m)
    M = apply_T(op0, c)
    MKK = inv.precompress(inv.Measurement(M, DELTA), model0)
    sel = model0.selection
    assert np.array_equal(MKK.data, M[np.ix_(sel.mKK, sel.xKK)])
    assert MKK.stage == "precompressed" and MKK.fingerprint == model0.fingerprint


def test_precompress_all_retained(op0, rng):
    model = rd.build_reduced_model(op0, 1e-14)
    assert model.selection.xK == model.selection.mK == op0.k
    M = rng.standard_normal((op0.k, op0.k))
    assert np.array_equal(inv.precompress(inv.Measurement(M, 0.0), model).data, M)


@pytest.mark.parametrize("physical", [False, True])
def test_streaming_equals_batch(op0, model0, rng, physical):
    M = rng.standard_normal((op0.k, op0.k))
    batch = inv.precompress(inv.Measurement(M, DELTA), model0, physical=physical)
    s = inv.StreamingPrecompressor(model0, DELTA, physical=physical)
    for d in range(op0.k):
        s.fold(M[d], d)
    assert np.array_equal(s.result().data, batch.data)


def test_physical_basis_path(mesh0, op0, model0, rng):
    Uphys = solve_excitation(assemble_system(mesh0, EXCITATION), np.eye(op0.k))
    Vphys = solve_emission_adjoint(assemble_system(mesh0, EMISSION), np.eye(op0.k))
    c = rng.standard_normal(op0.m)
    Mphys = Vphys.T @ ((op0.DD * c)[:, None] * Uphys)
    got = inv.precompress(inv.Measurement(Mphys, DELTA), model0, physical=True).data
    sel = model0.selection
    want = apply_T(op0, c)[np.ix_(sel.mKK, sel.xKK)]
    np.testing.assert_allclose(got, want, atol=1e-10 * np.abs(want).max())
    np.testing.assert_allclose(got, model0.QmK.T @ Mphys @ model0.QxK, atol=1e-12 * np.abs(want).max())


def test_stage_order_and_fingerprint(op0, model0):
    M = inv.Measurement(np.zeros((op0.k, op0.k)), DELTA)
    pre = inv.precompress(M, model0)
    with pytest.raises(inv.StageError):
        inv.precompress(pre, model0)
    with pytest.raises(inv.StageError):
        inv.compress(M, model0)
    other = inv.Measurement(pre.data, DELTA, "precompressed", "f" * 64)
    with pytest.raises(rd.FingerprintMismatchError):
        inv.compress(other, model0)


def test_compress_consistent(op0, model0, rng):
    c = rng.standard_normal(op0.m)
    pre = inv.precompress(inv.Measurement(apply_T(op0, c), DELTA), model0)
    MN = inv.compress(pre, model0).data
    ref = model0.AN @ c
    np.testing.assert_allclose(MN, ref, rtol=0, atol=1e-10 * np.linalg.norm(ref))
    assert np.linalg.norm(MN) <= np.linalg.norm(pre.data) * (1 + 1e-12)
    zero = inv.precompress(inv.Measurement(np.zeros((op0.k, op0.k)), DELTA), model0)
    assert np.all(inv.compress(zero, model0).data == 0)


def scalar_model(op0, model0):
    # rank-one model built from the leading reduced direction
    AN = model0.AN[:1]
    return rd.ReducedModel(model0.selection, model0.cross, model0.QxK, model0.QmK, model0.AK,
                           model0.PN[:1], AN, (AN / op0.DD).T, model0.lambdaN[:1], DELTA)


def test_scalar_tikhonov(op0, model0):
    m1 = scalar_model(op0, model0)
    lam = float((m1.AN @ m1.ANt)[0, 0])
    rec = inv.solve_reduced(np.array([2.0]), m1, 0.5)
    np.testing.assert_allclose(rec.c, m1.ANt[:, 0] * 2.0 / (lam + 0.5), rtol=1e-12)


def test_large_alpha_vanishes(model0):
    MN = np.ones(model0.N)
    assert np.linalg.norm(inv.solve_reduced(MN, model0, 1e12).c) < 1e-10


def test_tsvd_filter(model0):
    MN = np.linspace(1, 2, model0.N) * 1e-4
    alpha = model0.lambdaN[10]
    rec = inv.solve_reduced(MN, model0, alpha, "tsvd")
    z = np.where(model0.lambdaN >= alpha, MN / model0.lambdaN, 0.0)
    np.testing.assert_allclose(rec.c, model0.ANt @ z)
    with pytest.raises(ValueError):
        inv.solve_reduced(MN, model0, 0.0, "tikhonov")


def test_filter_sandwich(op0, model0, rng):
    # instances are forward-model data: AN c for random unit c, plus noise of size delta
    for _ in range(20):
        c = rng.standard_normal(op0.m)
        c /= inv.x_norm(c, op0.DD)
        e = rng.standard_normal(model0.N)
        MN = model0.AN @ c + DELTA * e / np.linalg.norm(e)
        alpha = 10.0 ** -rng.integers(2, 11)
        t = inv.solve_reduced(MN, model0, alpha, "tikhonov")
        s = inv.solve_reduced(MN, model0, alpha, "tsvd", check_diagonal=False)
        assert t.discrepancy <= s.discrepancy + 2 * np.sqrt(alpha) * np.linalg.norm(MN)


def test_alpha_trivial_and_exhaustion(model0, op0, phantom0):
    MN = model0.AN @ phantom0.c_dagger
    big = inv.choose_alpha_discrepancy(MN, model0, 10 * np.linalg.norm(MN))
    assert big.exponent == 0 and big.satisfied
    tiny = inv.choose_alpha_discrepancy(MN, model0, 1e-300, tau=1.0)
    assert not tiny.satisfied
    assert tiny.reconstruction.discrepancy == min(d for _, d in tiny.trace)


def test_coarse_consistency(op1, model1, mesh1):
    # exact data, delta = 1e-5, alpha = 1e-8
    ph = make_phantom(mesh1)
    meas = inv.Measurement(apply_T(op1, ph.c_dagger), DELTA)
    MN = inv.compress(inv.precompress(meas, model1), model1).data
    rec = inv.solve_reduced(MN, model1, 1e-8)
    err = inv.x_norm(rec.c - ph.c_dagger, op1.DD) / inv.x_norm(ph.c_dagger, op1.DD)
    assert rec.discrepancy <= 2 * DELTA
    assert err < 0.5, f"relative X-norm error {err:.3f}"


def test_baselines_zero_data(op0, model0):
    M = inv.Measurement(np.zeros((op0.k, op0.k)), DELTA)
    for rec in (inv.solve_full_baseline(op0, M, 1e-6),
                inv.solve_tensor_baseline(op0, model0.selection, M, 1e-6)):
        assert rec.iterations == 0 and np.all(rec.c == 0)


def test_full_baseline_agrees_with_reduced(op0, model0, phantom0):
    meas = simulate(op0, phantom0, DELTA, 0)
    alpha = 1e-6
    full = inv.solve_full_baseline(op0, meas, alpha)
    MN = inv.compress(inv.precompress(meas, model0), model0).data
    red = inv.solve_reduced(MN, model0, alpha)
    assert full.converged
    assert inv.x_norm(full.c - red.c, op0.DD) <= 10 * DELTA / np.sqrt(alpha)


def test_tensor_baseline_paths(op0, model0, phantom0):
    meas = simulate(op0, phantom0, DELTA, 0)
    alpha = 1e-6
    a = inv.solve_tensor_baseline(op0, model0.selection, meas, alpha)
    pre = inv.precompress(meas, model0)
    b = inv.solve_tensor_baseline(op0, model0.selection, pre, alpha)
    assert np.array_equal(a.c, b.c) and a.iterations == b.iterations
    full = inv.solve_full_baseline(op0, meas, alpha)
    assert inv.x_norm(a.c - full.c, op0.DD) <= 10 * DELTA / np.sqrt(alpha)


def test_semiconvergence(op1, model1, mesh1):
    ph = make_phantom(mesh1)
    meas = simulate(op1, ph, DELTA, 0)
    MN = inv.compress(inv.precompress(meas, model1), model1).data
    errs = []
    for n in range(0, 17):
        c = inv.solve_reduced(MN, model1, 10.0 ** -n).c
        errs.append(inv.x_norm(c - ph.c_dagger, op1.DD))
    best = int(np.argmin(errs))
    dp = inv.choose_alpha_discrepancy(MN, model1, DELTA).exponent
    assert abs(dp - best) <= 2
    # unique minimum region: decreasing up to the argmin, increasing after
    assert all(a >= b for a, b in zip(errs[:best], errs[1:best + 1]))
    assert all(a <= b for a, b in zip(errs[best:], errs[best + 1:]))


def test_noise_monotonicity(op1, mesh1):
    ph = make_phantom(mesh1)
    errs = []
    for delta in (1e-3, 1e-4, 1e-5):
        model = rd.build_reduced_model(op1, delta, fingerprint=mesh1.fingerprint())
        errs.append(run_online(model, op1, ph, delta, seed=3).rel_error)
    assert errs[0] >= errs[1] >= errs[2]


def test_filter_sandwich_provable(op0, model0, rng):
    # for lambda >= alpha the Tikhonov residual factor satisfies
    # alpha sqrt(lambda) / (lambda + alpha) <= sqrt(alpha) / 2, so the gap is
    # bounded by sqrt(alpha)/2 times the X-norm of the consistent part of c
    for _ in range(20):
        c = rng.standard_normal(op0.m)
        c /= inv.x_norm(c, op0.DD)
        MN = model0.AN @ c
        alpha = 10.0 ** -rng.integers(2, 11)
        t = inv.solve_reduced(MN, model0, alpha, "tikhonov")
        s = inv.solve_reduced(MN, model0, alpha, "tsvd", check_diagonal=False)
        assert t.discrepancy <= s.discrepancy + 0.5 * np.sqrt(alpha) * (1 + 1e-10)
