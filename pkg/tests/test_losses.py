import math

import numpy as np
import pytest

from mp4sr import kernel as K
from mp4sr import losses as L
from mp4sr import model as M
from mp4sr.errors import ConfigError, ContractError


@pytest.fixture(autouse=True)
def f64():
    with K.verify_mode(True):
        yield


def T(x):
    return K.as_tensor(np.asarray(x, dtype=float))


# -- similarity ----------------------------------------------------------------


def test_similarity_self_is_one():
    v = np.array([0.3, -1.2, 4.0])
    assert abs(L.similarity(v, v).item() - 1.0) < 1e-12


def test_similarity_orthogonal_is_zero():
    assert abs(L.similarity([1.0, 0.0], [0.0, 1.0]).item()) < 1e-12


def test_similarity_hand_value():
    assert abs(L.similarity([1.0, 2.0], [2.0, 1.0]).item() - 4.0 / 5.0) < 1e-12


# -- nip_loss ------------------------------------------------------------------


def test_nip_singleton_batch_is_zero():
    rng = K.make_rng(0)
    m = T(rng.normal(size=(1, 6)))
    z = T(rng.normal(size=(1, 6)))
    assert abs(L.nip_loss(m, m, z, 0.07).item()) < 1e-9


def test_nip_uniform_case():
    # identical projections and duplicated targets: every f equal,
    # each term is log(B), the sum is B log B
    b = 4
    v = np.tile([1.0, 2.0, 3.0], (b, 1))
    loss = L.nip_loss(T(v), T(v), T(v), tau=1.0)
    assert abs(loss.item() - b * math.log(b)) < 1e-9


def test_nip_two_point_reference_value():
    m1 = T([[1.0, 0.0], [0.0, 1.0]])
    # frozen from the direct formula: each term is -log(e / (e + 1))
    expected = 2.0 * math.log(1.0 + 1.0 / math.e)
    # the 1e-12 norm guard inside cosine perturbs the loss at the 1e-11 level
    assert abs(L.nip_loss(m1, m1, m1, tau=1.0).item() - expected) < 1e-9
    assert abs(expected - 0.6265233750364456) < 1e-15


def test_nip_rejects_bad_temperature():
    v = T(np.ones((2, 3)))
    with pytest.raises(ConfigError):
        L.nip_loss(v, v, v, 0.0)


# -- cmcl_loss -----------------------------------------------------------------


def test_cmcl_singleton_batch_is_zero():
    rng = K.make_rng(1)
    a, b = T(rng.normal(size=(1, 5))), T(rng.normal(size=(1, 5)))
    assert abs(L.cmcl_loss(a, b, 0.07).item()) < 1e-9


def test_cmcl_argument_swap_symmetry():
    rng = K.make_rng(2)
    a, b = T(rng.normal(size=(5, 8))), T(rng.normal(size=(5, 8)))
    assert abs(L.cmcl_loss(a, b, 0.07).item() - L.cmcl_loss(b, a, 0.07).item()) < 1e-9


def test_cmcl_two_point_reference_value():
    m = T([[1.0, 0.0], [0.0, 1.0]])
    # each l = log(e / (e + 2)); loss = -2 l
    expected = 2.0 * math.log(1.0 + 2.0 / math.e)
    assert abs(L.cmcl_loss(m, m, tau=1.0).item() - expected) < 1e-9
    assert abs(expected - 1.1028894278641022) < 1e-15


# -- shared contrastive properties ------------------------------------------------


def random_pair(rng, b=6, d=8):
    return T(rng.normal(size=(b, d))), T(rng.normal(size=(b, d))), T(rng.normal(size=(b, d)))


def test_batch_permutation_invariance():
    rng = K.make_rng(3)
    a, b, z = random_pair(rng)
    perm = rng.permutation(6)
    nip0 = L.nip_loss(a, b, z, 0.07).item()
    nip1 = L.nip_loss(T(a.data[perm]), T(b.data[perm]), T(z.data[perm]), 0.07).item()
    assert abs(nip0 - nip1) < 1e-6
    cm0 = L.cmcl_loss(a, b, 0.07).item()
    cm1 = L.cmcl_loss(T(a.data[perm]), T(b.data[perm]), 0.07).item()
    assert abs(cm0 - cm1) < 1e-6


def test_positive_rescale_invariance():
    rng = K.make_rng(4)
    a, b, z = random_pair(rng)
    s = rng.uniform(0.1, 10.0, size=(6, 1))
    assert abs(L.nip_loss(a, b, z, 0.07).item() - L.nip_loss(T(a.data * s), b, T(z.data * 3.0), 0.07).item()) < 1e-6
    assert abs(L.cmcl_loss(a, b, 0.07).item() - L.cmcl_loss(T(a.data * s), T(b.data * 2.0), 0.07).item()) < 1e-6


def test_temperature_sharpens_ratio():
    s_pos, s_neg = 0.9, 0.2
    prev = None
    for tau in (1.0, 0.5, 0.1, 0.07, 0.02):
        ratio = math.exp(s_pos / tau) / math.exp(s_neg / tau)
        if prev is not None:
            assert ratio >= prev
        prev = ratio


# -- pretrain_loss -----------------------------------------------------------------


def proj(rng, d0=8):
    return M.ProjectionParams.create(d0, rng)


def test_pretrain_loss_lambda_zero_is_nip_only():
    rng = K.make_rng(5)
    h_t, h_v, z = random_pair(rng)
    parts = L.pretrain_loss(h_t, h_v, z, z, proj(rng), tau=0.07, lam=0.0)
    expected = parts.nip_text.item() + parts.nip_image.item()
    assert abs(parts.total.item() - expected) < 1e-9


def test_pretrain_loss_singleton_batch_zero():
    rng = K.make_rng(6)
    h_t = T(rng.normal(size=(1, 8)))
    h_v = T(rng.normal(size=(1, 8)))
    z = T(rng.normal(size=(1, 8)))
    parts = L.pretrain_loss(h_t, h_v, z, z, proj(rng), tau=0.07, lam=0.01)
    assert abs(parts.total.item()) < 1e-9


def test_pretrain_loss_composition():
    rng = K.make_rng(7)
    h_t, h_v, z_t = random_pair(rng, b=4)
    z_v = T(rng.normal(size=(4, 8)))
    p = proj(rng)
    parts = L.pretrain_loss(h_t, h_v, z_t, z_v, p, tau=0.07, lam=0.01)
    out = L.project(h_t, h_v, p)
    want = (
        L.nip_loss(out.m_hat_t, out.m_tilde_t, z_t, 0.07).item()
        + L.nip_loss(out.m_hat_v, out.m_tilde_v, z_v, 0.07).item()
        + 0.01 * (L.cmcl_loss(out.m_hat_t, out.m_tilde_t, 0.07).item()
                  + L.cmcl_loss(out.m_hat_v, out.m_tilde_v, 0.07).item())
    )
    assert abs(parts.total.item() - want) < 1e-9


def test_pretrain_loss_flags():
    rng = K.make_rng(8)
    h_t, h_v, z = random_pair(rng, b=3)
    p = proj(rng)
    no_nip = L.pretrain_loss(h_t, h_v, z, z, p, 0.07, 0.5, use_nip=False)
    assert no_nip.nip_text.item() == 0.0 and no_nip.nip_image.item() == 0.0
    no_cmcl = L.pretrain_loss(h_t, h_v, z, z, p, 0.07, 0.5, use_cmcl=False)
    assert no_cmcl.cmcl_text.item() == 0.0 and no_cmcl.cmcl_image.item() == 0.0
    with pytest.raises(ConfigError):
        L.pretrain_loss(h_t, h_v, z, z, p, 0.07, 0.5, use_nip=False, use_cmcl=False)


def test_pretrain_loss_without_projection_uses_h_directly():
    rng = K.make_rng(9)
    h_t, h_v, z = random_pair(rng, b=3)
    parts = L.pretrain_loss(h_t, h_v, z, z, None, tau=0.07, lam=0.01)
    want = (
        L.nip_loss(h_t, h_v, z, 0.07).item()
        + L.nip_loss(h_v, h_t, z, 0.07).item()
        + 0.01 * (L.cmcl_loss(h_t, h_v, 0.07).item() + L.cmcl_loss(h_v, h_t, 0.07).item())
    )
    assert abs(parts.total.item() - want) < 1e-9


# -- finetune scoring ------------------------------------------------------------------


def tables(rng, n_items=5, d0=4):
    f_t = T(rng.normal(size=(n_items + 1, d0)))
    f_v = T(rng.normal(size=(n_items + 1, d0)))
    e = T(rng.normal(size=(n_items + 1, d0)))
    return f_t, f_v, e


def test_scores_zero_h_is_uniform():
    rng = K.make_rng(10)
    f_t, f_v, e = tables(rng)
    h = T(np.zeros((2, 4)))
    sv = L.finetune_scores(h, h, f_t, f_v, e)
    assert sv.probabilities[:, 0].max() == 0.0
    np.testing.assert_allclose(sv.probabilities[:, 1:], 1.0 / 5.0, rtol=1e-12)


def test_scores_zero_tables_isolate_text():
    rng = K.make_rng(11)
    f_t, _, _ = tables(rng)
    zeros = T(np.zeros(f_t.shape))
    h_t = T(rng.normal(size=(3, 4)))
    h_v = T(rng.normal(size=(3, 4)))
    sv = L.finetune_scores(h_t, h_v, f_t, zeros, None)
    direct = h_t.data @ f_t.data.T
    got = np.argsort(-sv.logits.data[:, 1:], axis=1)
    want = np.argsort(-direct[:, 1:], axis=1)
    np.testing.assert_array_equal(got, want)


def test_scores_argmax_matches_brute_force():
    rng = K.make_rng(12)
    f_t, f_v, e = tables(rng)
    h_t = T(rng.normal(size=(4, 4)))
    h_v = T(rng.normal(size=(4, 4)))
    sv = L.finetune_scores(h_t, h_v, f_t, f_v, e)
    brute = h_t.data @ (f_t.data + e.data).T + h_v.data @ (f_v.data + e.data).T
    brute[:, 0] = -np.inf
    np.testing.assert_array_equal(sv.probabilities.argmax(axis=1), brute.argmax(axis=1))


def test_scores_probabilities_sum_to_one():
    rng = K.make_rng(13)
    f_t, f_v, e = tables(rng, n_items=20)
    h_t = T(rng.normal(size=(6, 4)))
    h_v = T(rng.normal(size=(6, 4)))
    sv = L.finetune_scores(h_t, h_v, f_t, f_v, e)
    np.testing.assert_allclose(sv.probabilities.sum(axis=1), 1.0, atol=1e-5)
    assert (sv.probabilities[:, 0] == 0.0).all()


def test_finetune_loss_uniform_is_log_catalog():
    n_items = 100
    logits = L.finetune_logits(T(np.zeros((3, 4))), T(np.zeros((3, 4))),
                               T(np.zeros((n_items + 1, 4))), T(np.zeros((n_items + 1, 4))), None)
    loss = L.finetune_loss(logits, np.array([1, 50, 100]))
    assert abs(loss.item() / 3 - math.log(n_items)) < 1e-9


def test_finetune_loss_confident_target_tends_to_zero():
    raw = np.full((1, 6), -30.0)
    raw[0, 0] = K.NEG_INF
    raw[0, 3] = 30.0
    loss = L.finetune_loss(T(raw), np.array([3]))
    assert loss.item() < 1e-9


def test_finetune_loss_matches_log_softmax_oracle():
    rng = K.make_rng(14)
    raw = rng.normal(size=(3, 8))
    targets = np.array([2, 7, 1])
    loss = L.finetune_loss(T(raw), targets)
    shifted = raw - raw.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    want = -logp[np.arange(3), targets].sum()
    assert abs(loss.item() - want) < 1e-6


def test_finetune_loss_rejects_pad_target():
    with pytest.raises(ContractError):
        L.finetune_loss(T(np.zeros((1, 4))), np.array([0]))
