import math

import pytest
import torch

from errors import ArgumentError, ValidationError
from ps_mamba import PSMambaBlock, SelectiveSSM, benchmark_forward, project_phase, ps_mamba_block, \
    ps_mamba_grad, scan, selective_scan


def _block(**kwargs):
    return PSMambaBlock(d_model=6, d_inner=8, d_state=4, **kwargs).double()


def test_project_phase():
    W = torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert not project_phase(torch.zeros(5, 2), W).any()
    assert not project_phase(torch.randn(5, 2), torch.zeros(2, 3)).any()
    out = project_phase(torch.tensor([[0.0, 1.0]]), W)
    assert torch.equal(out, torch.tensor([[4.0, 5.0, 6.0]]))
    with pytest.raises(ArgumentError):
        project_phase(torch.zeros(5, 3), W)


def _toy_scan(M=None):
    ones = torch.ones(1, 3, 1, dtype=torch.float64)
    u = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64).view(1, 3, 1)
    A = torch.full((1, 1), math.log(0.5), dtype=torch.float64)
    return scan(u, ones, A, ones, ones, M)[0, :, 0]


def test_scan_by_hand():
    torch.testing.assert_close(_toy_scan(), torch.tensor([1.0, 0.5, 0.25], dtype=torch.float64))


def test_scan_keyframe_scaling():
    M = torch.tensor([[0.5, 1.0, 1.0]], dtype=torch.float64)
    torch.testing.assert_close(_toy_scan(M), torch.tensor([0.5, 0.25, 0.125], dtype=torch.float64))


def test_unit_keyframes_equal_plain_scan():
    ssm = SelectiveSSM(8, 4).double()
    x = torch.randn(2, 10, 8, dtype=torch.float64)
    assert torch.equal(selective_scan(x, ssm, torch.ones(2, 10, dtype=torch.float64)), selective_scan(x, ssm))


def test_backward_direction_reverses_time():
    fwd = SelectiveSSM(8, 4, "forward").double()
    bwd = SelectiveSSM(8, 4, "backward").double()
    bwd.load_state_dict(fwd.state_dict())
    x = torch.randn(1, 7, 8, dtype=torch.float64)
    torch.testing.assert_close(bwd(x), fwd(x.flip(1)).flip(1))


def test_joint_scan_matches_separate_directions():
    block = _block()
    u = torch.randn(3, 7, 8, dtype=torch.float64)
    M = 0.5 + torch.rand(3, 7, dtype=torch.float64)
    expected = block.forward_ssm(u, M) + block.backward_ssm(u, M)
    torch.testing.assert_close(block.bidirectional_scan(u, M), expected, rtol=0, atol=1e-12)


def test_scan_rejects_nan():
    x = torch.randn(1, 5, 8)
    x[0, 2, 3] = float("nan")
    with pytest.raises(ValidationError):
        SelectiveSSM(8, 4)(x)


def test_decay_is_negative():
    ssm = SelectiveSSM(8, 4)
    assert (ssm.A < 0).all()


def test_reduces_to_vanilla_block():
    block = _block()
    vanilla = _block(use_keyframes=False, use_phase=False)
    vanilla.load_state_dict(block.state_dict())
    X = torch.randn(2, 9, 6, dtype=torch.float64)
    out = ps_mamba_block(X, torch.ones(2, 9, dtype=torch.float64), torch.zeros(2, 9, 2, dtype=torch.float64), block)
    torch.testing.assert_close(out, vanilla(X), rtol=0, atol=1e-12)


def test_single_precision_reduction():
    block = PSMambaBlock(6, 8, 4)
    vanilla = PSMambaBlock(6, 8, 4, use_keyframes=False, use_phase=False)
    vanilla.load_state_dict(block.state_dict())
    X = torch.randn(1, 9, 6)
    torch.testing.assert_close(block(X, torch.ones(1, 9), torch.zeros(1, 9, 2)), vanilla(X), rtol=0, atol=1e-5)


def test_ablation_switches_ignore_inputs():
    block = _block(use_keyframes=False, use_phase=False)
    X = torch.randn(1, 6, 6, dtype=torch.float64)
    M = torch.rand(1, 6, dtype=torch.float64)
    Phi = torch.randn(1, 6, 2, dtype=torch.float64)
    assert torch.equal(block(X, M, Phi), block(X))


def test_zero_input_zero_output():
    block = _block()
    with torch.no_grad():
        block.in_proj.bias.zero_()
        block.out_proj.bias.zero_()
    X = torch.zeros(1, 5, 6, dtype=torch.float64)
    assert not block(X, torch.ones(1, 5, dtype=torch.float64)).any()


def test_keyframe_weights_change_output():
    block = _block()
    X = torch.randn(1, 8, 6, dtype=torch.float64)
    M = torch.ones(1, 8, dtype=torch.float64)
    M[0, 3] = 0.0
    assert not torch.allclose(block(X, M), block(X, torch.ones_like(M)))


def test_grad_matches_finite_differences():
    block = _block()
    X = torch.randn(1, 6, 6, dtype=torch.float64)
    M = 0.5 + torch.rand(1, 6, dtype=torch.float64)
    Phi = torch.randn(1, 6, 2, dtype=torch.float64)
    upstream = torch.randn(1, 6, 6, dtype=torch.float64)
    grads = ps_mamba_grad(block, X, M, Phi, upstream)

    def loss(W):
        with torch.no_grad():
            block.W_phi.copy_(W)
            return (block(X, M, Phi) * upstream).sum().item()

    W0 = block.W_phi.detach().clone()
    numeric = torch.zeros_like(W0)
    h = 1e-5
    for i in range(2):
        for j in range(6):
            E = torch.zeros_like(W0)
            E[i, j] = h
            numeric[i, j] = (loss(W0 + E) - loss(W0 - E)) / (2 * h)
    loss(W0)
    rel = (grads["W_phi"] - numeric).abs().max() / numeric.abs().max()
    assert rel < 1e-4


def test_phase_projection_dead_path():
    block = _block()
    X = torch.randn(1, 6, 6, dtype=torch.float64)
    grads = ps_mamba_grad(block, X, torch.ones(1, 6, dtype=torch.float64),
                          torch.zeros(1, 6, 2, dtype=torch.float64), torch.randn(1, 6, 6, dtype=torch.float64))
    assert not grads["W_phi"].any()
    assert set(grads) >= {"X", "M", "W_phi", "forward_ssm.A_log", "backward_ssm.W_delta.bias"}


def test_grad_is_linear_in_cotangent():
    block = _block()
    X = torch.randn(1, 5, 6, dtype=torch.float64)
    M = torch.rand(1, 5, dtype=torch.float64)
    Phi = torch.randn(1, 5, 2, dtype=torch.float64)
    up = torch.randn(1, 5, 6, dtype=torch.float64)
    g1 = ps_mamba_grad(block, X, M, Phi, up)
    g2 = ps_mamba_grad(block, X, M, Phi, 2 * up)
    for name in g1:
        torch.testing.assert_close(g2[name], 2 * g1[name])


def test_benchmark_rows():
    rows = benchmark_forward([16, 32], d_model=8, d_inner=16, d_state=4, repeats=3)
    assert [L for L, _ in rows] == [16, 32]
    assert all(t > 0 for _, t in rows)


@pytest.mark.slow
def test_forward_time_is_linear_in_length():
    rows = dict(benchmark_forward([256, 512, 1024], d_model=32, d_inner=64, d_state=8, repeats=5))
    assert rows[512] / rows[256] <= 2.5
    assert rows[1024] / rows[512] <= 2.5
