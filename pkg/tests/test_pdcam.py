import math

import pytest
import torch

from errors import ArgumentError
from pdcam import PDCAM, SoftmaxCrossAttention, multi_head_pdcam, pdcam_grad, phase_rotate, rms_norm

f64 = torch.float64


def _module(**kwargs):
    return PDCAM(d_model=8, heads=2, **kwargs).double()


def _inputs(B=2, L_m=5, L_t=3, D=8):
    X = torch.randn(B, L_m, D, dtype=f64)
    T = torch.randn(B, L_t, D, dtype=f64)
    M = 0.2 + torch.rand(B, L_m, dtype=f64)
    phi = 2 * math.pi * torch.rand(B, L_m, dtype=f64)
    return X, T, M, phi


def test_unit_weights_are_plain_projections():
    module = _module()
    X, T, _, _ = _inputs()
    with_ones = module.qkv_project(X, T, torch.ones(2, 5, dtype=f64))
    plain = module.qkv_project(X, T)
    for a, b in zip(with_ones, plain):
        assert torch.equal(a, b)


def test_zero_weight_annihilates_query_row():
    module = _module()
    X, T, M, _ = _inputs()
    M[0, 2] = 0.0
    Q1, Q2, K1, _, _ = module.qkv_project(X, T, M)
    assert not Q1[0, :, 2].any() and not Q2[0, :, 2].any()
    assert Q1[1, :, 2].any()
    assert Q1.shape == (2, 2, 5, 4) and K1.shape == (2, 2, 3, 4)


def test_projection_shape_mismatch():
    module = _module()
    X, T, _, _ = _inputs()
    with pytest.raises(ArgumentError):
        module.qkv_project(X, T, torch.ones(2, 4, dtype=f64))
    with pytest.raises(ArgumentError):
        module.qkv_project(X[..., :6], T)


def test_phase_rotation():
    Q1 = torch.randn(3, 4, dtype=f64)
    Q2 = torch.randn(3, 4, dtype=f64)
    phi = torch.rand(3, dtype=f64) * 6
    a, b = phase_rotate(Q1, Q2, phi, torch.tensor(0.0, dtype=f64))
    assert torch.equal(a, Q1) and torch.equal(b, Q2)

    a, b = phase_rotate(Q1, Q2, torch.full((3,), math.pi / 2, dtype=f64), torch.tensor(1.0, dtype=f64))
    torch.testing.assert_close(a, -Q2)
    torch.testing.assert_close(b, Q1)

    a, b = phase_rotate(Q1, Q2, phi, torch.tensor(0.7, dtype=f64))
    torch.testing.assert_close((a ** 2 + b ** 2).sum(-1), (Q1 ** 2 + Q2 ** 2).sum(-1), rtol=0, atol=1e-6)


def test_token_lambda():
    module = _module()
    base, lam = module.token_lambda()
    assert base.item() == pytest.approx(0.8)
    assert lam is None

    M = torch.tensor([[1.0, 0.6]], dtype=f64)
    with torch.no_grad():
        module.alpha_imp.fill_(0.5)
    _, lam = module.token_lambda(M)
    assert lam[0, 0].item() == pytest.approx(0.8)
    assert lam[0, 1].item() == pytest.approx(0.64)


def test_lambda_base_shared_across_heads():
    module = _module()
    with torch.no_grad():
        module.lambda_q1.fill_(0.1)
        module.lambda_k1.fill_(0.2)
    base, _ = module.token_lambda()
    assert base.item() == pytest.approx(math.exp(8 * 0.02) - 1 + 0.8)


def test_zero_lambda_leaves_first_branch():
    module = _module()
    X, T, M, phi = _inputs()
    act = module.activations(X, T, M, phi, lam_override=torch.tensor(0.0, dtype=f64))
    torch.testing.assert_close(act.out, act.phi_q1 @ act.A1)
    torch.testing.assert_close(module.lin_diff_cross_attn(X, T, M, phi, head=1,
                                                          lam_override=torch.tensor(0.0, dtype=f64)),
                               (act.phi_q1 @ act.A1)[:, 1])


def test_degenerate_single_token():
    module = PDCAM(d_model=1, heads=1).double()
    X = torch.randn(1, 1, 1, dtype=f64)
    T = torch.randn(1, 1, 1, dtype=f64)
    act = module.activations(X, T)
    torch.testing.assert_close(act.out[0, 0], (1 - 0.8) * act.V[0, 0])


def test_uniform_values_give_finite_output():
    module = _module()
    X, T, M, phi = _inputs()
    with torch.no_grad():
        module.W_V.weight.zero_()
        module.W_V.weight[:, 0] = 1.0
    T = T.clone()
    T[..., 0] = 2.0
    act = module.activations(X, T, M, phi)
    assert torch.isfinite(act.out).all()
    # every value row is the same vector v = 2 * ones, and the softmax rows sum to one
    v = torch.full((2 * module.d_head,), 2.0, dtype=f64)
    expected = (1.0 - act.lam)[:, None, :, None] * v
    torch.testing.assert_close(act.out, expected.expand_as(act.out))


def test_full_lambda_init_annihilates_output():
    module = _module(lambda_init=1.0)
    X, T, M, phi = _inputs()
    assert not module(X, T, M, phi).any()


def test_rms_norm_rows():
    x = torch.randn(4, 6, 16, dtype=f64)
    rms = rms_norm(x, 1e-12).pow(2).mean(-1).sqrt()
    torch.testing.assert_close(rms, torch.ones_like(rms), rtol=0, atol=1e-6)


def test_output_shape():
    module = _module()
    X, T, M, phi = _inputs()
    assert multi_head_pdcam(X, T, M, phi, module).shape == X.shape


def _plain_linear_differential_attention(module, X, T):
    """Linear differential cross-attention written directly from the weights: no keyframes, no rotation."""
    dh = module.d_head
    W_q, W_k, W_v = module.W_Q.weight, module.W_K.weight, module.W_V.weight
    lam = (torch.exp((module.lambda_q1 * module.lambda_k1).sum())
           - torch.exp((module.lambda_q2 * module.lambda_k2).sum()) + module.lambda_init)
    heads = []
    for h in range(module.heads):
        rows = slice(2 * h * dh, 2 * (h + 1) * dh)
        q, k, v = X @ W_q[rows].T, T @ W_k[rows].T, T @ W_v[rows].T
        a1 = torch.einsum("btf,btv->bfv", torch.softmax(k[..., :dh], dim=1), v)
        a2 = torch.einsum("btf,btv->bfv", torch.softmax(k[..., dh:], dim=1), v)
        heads.append(torch.softmax(q[..., :dh], dim=-1) @ a1 - lam * (torch.softmax(q[..., dh:], dim=-1) @ a2))
    concat = torch.cat(heads, dim=-1)
    normed = concat / torch.sqrt(concat.pow(2).mean(dim=-1, keepdim=True) + module.rmsnorm_eps)
    return (normed * (1.0 - module.lambda_init)) @ module.W_O.weight.T


def test_reduces_to_linear_differential_attention():
    module = _module()
    with torch.no_grad():
        for p in (module.lambda_q1, module.lambda_k1, module.lambda_q2, module.lambda_k2):
            p.normal_(0.0, 0.3)
        module.beta.zero_()
        module.alpha_imp.zero_()
    X, T, _, phi = _inputs()
    expected = _plain_linear_differential_attention(module, X, T)
    torch.testing.assert_close(module(X, T, torch.ones(2, 5, dtype=f64), phi), expected, rtol=0, atol=1e-12)
    torch.testing.assert_close(module(X, T), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("axes", ["efficient", "paper_literal"])
def test_text_token_order_does_not_matter(axes):
    module = _module(softmax_axes=axes)
    X, T, M, phi = _inputs(L_t=6)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    torch.testing.assert_close(module(X, T[:, perm], M, phi), module(X, T, M, phi), rtol=0, atol=1e-12)


def test_literal_axes_variant():
    module = _module(softmax_axes="paper_literal")
    X, T, M, phi = _inputs()
    act = module.activations(X, T, M, phi)
    torch.testing.assert_close(act.phi_q1.sum(dim=-2), torch.ones(2, 2, 4, dtype=f64))
    torch.testing.assert_close(act.phi_k1.sum(dim=-1), torch.ones(2, 2, 3, dtype=f64))
    with pytest.raises(ArgumentError):
        _module(softmax_axes="rows")


def test_efficient_axes():
    module = _module()
    X, T, M, phi = _inputs()
    act = module.activations(X, T, M, phi)
    torch.testing.assert_close(act.phi_q1.sum(dim=-1), torch.ones(2, 2, 5, dtype=f64))
    torch.testing.assert_close(act.phi_k1.sum(dim=-2), torch.ones(2, 2, 4, dtype=f64))


def test_softmax_baseline_shape():
    attn = SoftmaxCrossAttention(8, 2).double()
    X, T, _, _ = _inputs()
    assert attn(X, T).shape == X.shape


def test_beta_dead_path_without_phase():
    module = _module()
    X, T, M, _ = _inputs()
    grads = pdcam_grad(module, X, T, M, torch.zeros(2, 5, dtype=f64), torch.randn(2, 5, 8, dtype=f64))
    assert grads["beta"].item() == 0.0
    assert grads["alpha_imp"].abs().item() > 0


def test_grad_is_linear_in_cotangent():
    module = _module()
    X, T, M, phi = _inputs()
    up = torch.randn(2, 5, 8, dtype=f64)
    g1 = pdcam_grad(module, X, T, M, phi, up)
    g2 = pdcam_grad(module, X, T, M, phi, 2 * up)
    for name in g1:
        torch.testing.assert_close(g2[name], 2 * g1[name])


def test_grad_matches_finite_differences_for_beta():
    module = _module()
    X, T, M, phi = _inputs()
    up = torch.randn(2, 5, 8, dtype=f64)
    analytic = pdcam_grad(module, X, T, M, phi, up)["beta"].item()

    def loss(b):
        with torch.no_grad():
            module.beta.fill_(b)
            return (module(X, T, M, phi) * up).sum().item()

    h = 1e-5
    numeric = (loss(1.0 + h) - loss(1.0 - h)) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-12)
