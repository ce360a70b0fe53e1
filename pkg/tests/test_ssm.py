import math

import numpy as np
import pytest

from app.engine.gradcheck import grad_check
from app.engine.rng import Rng
from app.engine.tensor import Tensor, no_grad
from app.errors import DomainError, ShapeError
from app.layers.ssm import (
    SERIES_THRESHOLD,
    MambaBlock,
    SelectiveSSM,
    discretize,
    expm1_ratio,
    expm1_ratio_series,
    lti_convolution_reference,
    selective_scan,
    selective_scan_core,
)
from app.models.schemas import MAMBA_ABLATION_CASES, AMode, DMode, MambaBlockConfig


def naive_scan(u, delta, A, B, C, D):
    """Token-by-token recurrence on (N, E) lanes, written independently of the library"""
    N, E = u.shape
    S = A.shape[-1]
    A_full = np.broadcast_to(A, (E, S))
    D_full = np.broadcast_to(D, (N, E))
    h = np.zeros((E, S))
    y = np.zeros((N, E))
    for t in range(N):
        for e in range(E):
            for s in range(S):
                a = delta[t, e] * A_full[e, s]
                a_bar = math.exp(a)
                b_bar = (math.exp(a) - 1.0) / A_full[e, s] * B[t, s]
                h[e, s] = a_bar * h[e, s] + b_bar * u[t, e]
            y[t, e] = float(np.dot(C[t], h[e])) + D_full[t, e] * u[t, e]
    return y


def naive_scan_batched(u, delta, A, B, C, D):
    lead = u.shape[:-2]
    out = np.zeros_like(u)
    for idx in np.ndindex(*lead):
        d = D if D.ndim == 1 else D[idx]
        out[idx] = naive_scan(u[idx], delta[idx], A, B[idx], C[idx], d)
    return out


def random_scan_inputs(gen, lead, N, E, S, feature_specific=False, token_d=False):
    u = gen.normal(size=lead + (N, E))
    delta = gen.uniform(1e-3, 0.5, lead + (N, E))
    A = -gen.uniform(0.5, 4.0, (E, S) if feature_specific else (S,))
    B = gen.normal(size=lead + (N, S))
    C = gen.normal(size=lead + (N, S))
    D = gen.normal(size=lead + (N, E)) if token_d else gen.normal(size=E)
    return u, delta, A, B, C, D


# discretization

def test_discretize_closed_form():
    A_bar, B_bar = discretize(np.array([-1.0]), np.array([1.0]), np.array([math.log(2.0)]))
    assert A_bar.shape == B_bar.shape == (1, 1)
    assert A_bar[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert B_bar[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_discretize_small_step_limit():
    dt = 1e-12
    A_bar, B_bar = discretize(np.array([-1.0]), np.array([2.0]), np.array([dt]))
    assert A_bar[0, 0] == pytest.approx(1.0, abs=1e-11)
    assert B_bar[0, 0] == pytest.approx(2.0 * dt, rel=1e-9)


def test_series_branch_agrees_at_switch_point():
    gen = np.random.default_rng(0)
    u = SERIES_THRESHOLD * np.concatenate([-gen.uniform(0.999, 1.001, (4, 16)), gen.uniform(0.999, 1.001, (4, 16))])
    exact = np.expm1(u) / u
    assert np.max(np.abs(expm1_ratio_series(u) - exact)) < 1e-12
    assert np.max(np.abs(expm1_ratio(u) - exact)) < 1e-12


def test_discretize_feature_specific_batch_shapes():
    gen = np.random.default_rng(1)
    A = -gen.uniform(0.5, 2.0, (4, 16))
    A_bar, B_bar = discretize(A, gen.normal(size=(3, 16)), gen.uniform(0.01, 0.1, (3, 4)))
    assert A_bar.shape == B_bar.shape == (3, 4, 16)
    assert np.all((A_bar > 0) & (A_bar < 1))


def test_discretize_rejects_non_positive_step():
    with pytest.raises(DomainError):
        discretize(np.array([-1.0]), np.array([1.0]), np.array([0.0]))


# selective scan primitive

def test_scan_hand_unrolled():
    ln2 = math.log(2.0)
    y = selective_scan_core(
        u=np.ones((2, 1)),
        delta=np.full((2, 1), ln2),
        A=np.array([-1.0]),
        B=np.ones((2, 1)),
        C=np.ones((2, 1)),
        D=np.zeros(1),
    )
    np.testing.assert_allclose(y.data[:, 0], [0.5, 0.75], atol=1e-15)


def test_scan_zero_input_gives_zero_output():
    gen = np.random.default_rng(2)
    u, delta, A, B, C, D = random_scan_inputs(gen, (2, 3), 8, 4, 16)
    y = selective_scan_core(np.zeros_like(u), delta, A, B, C, D)
    np.testing.assert_array_equal(y.data, 0.0)


def test_scan_matches_naive_recurrence_on_random_instances():
    gen = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        lead = (int(gen.integers(1, 3)), int(gen.integers(1, 4)))
        N, E = int(gen.integers(1, 9)), int(gen.integers(1, 5))
        inputs = random_scan_inputs(gen, lead, N, E, 16, feature_specific=bool(trial % 2), token_d=bool(trial % 3 == 0))
        y = selective_scan_core(*inputs).data
        worst = max(worst, float(np.max(np.abs(y - naive_scan_batched(*inputs)))))
    assert worst < 1e-10


def test_scan_with_projections_matches_naive_recurrence():
    rng = Rng(4)
    ssm = SelectiveSSM(d_inner=4, d_state=16, dt_rank=1, a_mode=AMode.FEATURE_INDEPENDENT,
                       d_mode=DMode.DATA_DEPENDENT, rng=rng)
    x = np.random.default_rng(4).normal(size=(2, 3, 8, 4))
    with no_grad():
        y = selective_scan(Tensor(x), ssm).data

    def softplus(v):
        return np.logaddexp(0.0, v)

    delta = softplus(x @ ssm.proj_dt_down.weight.data @ ssm.proj_dt_up.weight.data + ssm.proj_dt_up.bias.data)
    B = x @ ssm.proj_B.weight.data
    C = x @ ssm.proj_C.weight.data
    D = x @ ssm.proj_D.weight.data + ssm.proj_D.bias.data
    A = -np.exp(ssm.a_log.data)
    np.testing.assert_allclose(y, naive_scan_batched(x, delta, A, B, C, D), atol=1e-10, rtol=0)


@pytest.mark.parametrize("N", [1, 7, 16, 32])
def test_scan_matches_lti_convolution(N):
    gen = np.random.default_rng(N)
    E, S = 3, 16
    x = gen.normal(size=(N, E))
    dt = gen.uniform(0.01, 0.3, E)
    A = -gen.uniform(0.5, 3.0, S)
    B = gen.normal(size=S)
    C = gen.normal(size=S)
    D = gen.normal(size=E)
    y = selective_scan_core(x, np.tile(dt, (N, 1)), A, np.tile(B, (N, 1)), np.tile(C, (N, 1)), D).data
    A_bar, B_bar = discretize(A, B, dt)
    np.testing.assert_allclose(y, lti_convolution_reference(x, A_bar, B_bar, C, D), atol=1e-8, rtol=0)


def test_lti_single_step_and_memoryless_kernel():
    gen = np.random.default_rng(5)
    E, S = 2, 3
    B_bar = gen.normal(size=(E, S))
    C = gen.normal(size=S)
    D = gen.normal(size=E)
    x1 = gen.normal(size=(1, E))
    np.testing.assert_allclose(
        lti_convolution_reference(x1, gen.uniform(0, 1, (E, S)), B_bar, C, D)[0],
        (B_bar @ C) * x1[0] + D * x1[0],
    )
    x = gen.normal(size=(6, E))
    memoryless = lti_convolution_reference(x, np.zeros((E, S)), B_bar, C, D)
    np.testing.assert_allclose(memoryless, x * (B_bar @ C) + D * x)


def test_scan_state_stays_within_geometric_bound():
    gen = np.random.default_rng(6)
    N, E, S = 32, 2, 4
    x = gen.uniform(-1, 1, (N, E))
    dt = gen.uniform(0.05, 0.5, E)
    A = -gen.uniform(0.5, 2.0, S)
    B = gen.normal(size=S)
    A_bar, B_bar = discretize(A, B, dt)
    bound = np.abs(B_bar) * np.max(np.abs(x)) / (1.0 - A_bar)
    for s in range(S):
        # a one-hot C reads out state s of every feature
        C = np.zeros(S)
        C[s] = 1.0
        states = selective_scan_core(x, np.tile(dt, (N, 1)), A, np.tile(B, (N, 1)), np.tile(C, (N, 1)), np.zeros(E)).data
        assert np.all(np.abs(states) <= bound[:, s] + 1e-12)


def test_scan_gradients_match_finite_differences():
    gen = np.random.default_rng(7)
    arrays = random_scan_inputs(gen, (2,), 5, 3, 4, feature_specific=True, token_d=True)
    names = ["u", "delta", "A", "B", "C", "D"]
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in zip(names, arrays)}
    w = gen.normal(size=(2, 5, 3))
    report = grad_check(lambda: (selective_scan_core(*tensors.values()) * w).sum(), tensors)
    assert report.passed, report.failures()


def test_scan_step_size_domain_and_shapes():
    gen = np.random.default_rng(8)
    u, delta, A, B, C, D = random_scan_inputs(gen, (1,), 4, 2, 3)
    with pytest.raises(DomainError):
        selective_scan_core(u, -delta, A, B, C, D)
    with pytest.raises(ShapeError):
        selective_scan_core(u, delta, A, B[..., :2], C, D)


# M-Mamba block

def test_block_preserves_shape():
    block = MambaBlock(MambaBlockConfig(d_model=128), Rng(0))
    with no_grad():
        out = block(Tensor(np.random.default_rng(0).normal(size=(2, 7, 12, 128))))
    assert out.shape == (2, 7, 12, 128)


def test_a_parameter_counts():
    independent = MambaBlock(MambaBlockConfig(d_model=128, a_mode=AMode.FEATURE_INDEPENDENT), Rng(0))
    specific = MambaBlock(MambaBlockConfig(d_model=128, a_mode=AMode.FEATURE_SPECIFIC), Rng(0))
    assert independent.ssm.a_log.size == 16
    assert specific.ssm.a_log.size == 2048
    assert specific.num_parameters() - independent.num_parameters() == (128 - 1) * 16
    np.testing.assert_allclose(-np.exp(independent.ssm.a_log.data), -np.arange(1, 17))


def test_step_size_initialisation_range():
    ssm = MambaBlock(MambaBlockConfig(d_model=32), Rng(3)).ssm
    initial = np.logaddexp(0.0, ssm.proj_dt_up.bias.data)
    assert np.all((initial >= 1e-3 - 1e-12) & (initial <= 1e-1 + 1e-12))
    assert ssm.proj_dt_down.weight.shape == (32, 2)


@pytest.mark.parametrize("case", sorted(MAMBA_ABLATION_CASES))
def test_ablation_cases_are_flag_only(case):
    flags = MAMBA_ABLATION_CASES[case]
    block = MambaBlock(MambaBlockConfig(d_model=16, **flags), Rng(0))
    stages = block.trace()
    assert ("causal_conv" in stages) == flags["use_conv"]
    assert ("in_proj_z" in stages) == flags["use_z_branch"]
    assert stages[-1] == "out_proj"
    names = dict(block.named_parameters())
    assert ("conv_weight" in names) == flags["use_conv"]
    assert ("in_proj_z.weight" in names) == flags["use_z_branch"]
    assert ("ssm.d_param" in names) == (flags["d_mode"] == DMode.FREE)
    assert ("ssm.proj_D.weight" in names) == (flags["d_mode"] == DMode.DATA_DEPENDENT)
    expected_a = 16 * 16 if flags["a_mode"] == AMode.FEATURE_SPECIFIC else 16
    assert names["ssm.a_log"].size == expected_a


def test_seven_cases_with_vanilla_and_cmamba():
    assert len(MAMBA_ABLATION_CASES) == 7
    vanilla = MAMBA_ABLATION_CASES["vanilla"]
    assert vanilla["use_conv"] and vanilla["d_mode"] == DMode.FREE and vanilla["a_mode"] == AMode.FEATURE_SPECIFIC
    assert MambaBlockConfig(d_model=8, **MAMBA_ABLATION_CASES["cmamba"]) == MambaBlockConfig(d_model=8)
    assert len({tuple(sorted(f.items())) for f in MAMBA_ABLATION_CASES.values()}) == 7


@pytest.mark.parametrize("flags", [
    {},
    {"use_conv": True, "a_mode": AMode.FEATURE_SPECIFIC, "d_mode": DMode.FREE},
    {"use_z_branch": False},
])
def test_block_gradients_match_finite_differences(flags):
    block = MambaBlock(MambaBlockConfig(d_model=8, d_state=4, **flags), Rng(11))
    gen = np.random.default_rng(11)
    z = Tensor(gen.normal(size=(1, 2, 4, 8)))
    w = gen.normal(size=(1, 2, 4, 8))
    report = grad_check(lambda: (block(z) * w).sum(), dict(block.named_parameters()))
    assert report.passed, report.failures()


@pytest.mark.parametrize("use_conv", [False, True])
def test_block_is_causal(use_conv):
    block = MambaBlock(MambaBlockConfig(d_model=8, d_state=4, use_conv=use_conv), Rng(12))
    gen = np.random.default_rng(12)
    base = gen.normal(size=(1, 2, 6, 8))
    with no_grad():
        reference = block(Tensor(base)).data
        for t in range(6):
            probe = base.copy()
            probe[:, :, t, :] += 0.5
            out = block(Tensor(probe)).data
            np.testing.assert_allclose(out[:, :, :t], reference[:, :, :t], atol=1e-12, rtol=0)
            assert np.max(np.abs(out[:, :, t:] - reference[:, :, t:])) > 1e-6


def test_block_rejects_wrong_width():
    block = MambaBlock(MambaBlockConfig(d_model=8), Rng(0))
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((1, 2, 3, 4))))
