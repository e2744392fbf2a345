import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from monopatch.losses import (HUBER_DELTA, LossWeights, depth_losses, huber_rgb, masked_ncc, masked_ssim,
                              mvs_depth_loss, normal_losses, solve_patch_alignment, total_loss)

K = 8


def unit_field(rng, shape=(K, K)):
    n = rng.normal(size=shape + (3,))
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def fd_check(fn, x, grad, eps=1e-6, rtol=1e-4, n=30, rng=None):
    """Central differences of scalar ``fn`` at ``x`` against ``grad`` on sampled entries."""
    rng = rng or np.random.default_rng(0)
    flat = x.reshape(-1)
    for i in rng.choice(flat.size, min(n, flat.size), replace=False):
        x0 = flat[i]
        flat[i] = x0 + eps
        lp = fn(x)
        flat[i] = x0 - eps
        lm = fn(x)
        flat[i] = x0
        fd = (lp - lm) / (2 * eps)
        assert abs(grad.reshape(-1)[i] - fd) <= max(rtol * abs(fd), 1e-8), (i, grad.reshape(-1)[i], fd)


# --------------------------------------------------------------------------- huber

def huber_oracle(a, b):
    tot = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        r = abs(x - y)
        tot += 0.5 * r * r if r <= HUBER_DELTA else HUBER_DELTA * (r - 0.5 * HUBER_DELTA)
    return tot / a.size


def test_huber_examples():
    rng = np.random.default_rng(0)
    c = rng.random((K, K, 3))
    assert huber_rgb(c, c)[0] == 0
    assert huber_rgb(c + 0.05, c)[0] == pytest.approx(0.5 * 0.05 ** 2, abs=1e-15)
    d = rng.random((K, K, 3))
    assert abs(huber_rgb(c, d)[0] - huber_oracle(c, d)) < 1e-12


def test_huber_adjoint():
    rng = np.random.default_rng(1)
    x, y = rng.random((3, K, K, 3)), rng.random((3, K, K, 3))
    fd_check(lambda z: huber_rgb(z, y)[0], x, huber_rgb(x, y)[1])


# --------------------------------------------------------------------------- alignment

def test_alignment_exact_affine():
    d = np.random.default_rng(2).uniform(1, 3, (K, K))
    al = solve_patch_alignment(d, 2 * d + 3)
    assert al.valid
    assert abs(al.scale - 2) < 1e-9 and abs(al.shift - 3) < 1e-9


def test_alignment_constant_mono_falls_back():
    r = np.random.default_rng(3).uniform(1, 3, (K, K))
    al = solve_patch_alignment(np.full((K, K), 2.0), r)
    assert al.valid and al.scale == 1.0
    np.testing.assert_allclose(r - al.apply(np.full((K, K), 2.0)), r - r.mean(), atol=1e-12)


def test_alignment_needs_two_pixels_and_positive_scale():
    d = np.random.default_rng(4).uniform(1, 3, (K, K))
    valid = np.zeros((K, K), bool)
    valid[0, 0] = True
    assert not solve_patch_alignment(d, d, valid).valid
    assert not solve_patch_alignment(d, 5 - d).valid


def test_alignment_matches_grid_search():
    rng = np.random.default_rng(5)
    d = rng.uniform(1, 3, (K, K))
    r = 1.3 * d + 0.4 + rng.normal(scale=0.2, size=(K, K))
    al = solve_patch_alignment(d, r)
    # dense brute-force grid; the squared residual is expanded so the grid stays cheap
    h = 1e-3
    S, T = np.meshgrid(np.arange(0, 3, h), np.arange(-2, 2, h), indexing="ij")
    cost = (S * S * (d * d).sum() + 2 * S * T * d.sum() + d.size * T * T
            - 2 * S * (d * r).sum() - 2 * T * r.sum())
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    assert abs(al.scale - S[i, j]) <= 2 * h and abs(al.shift - T[i, j]) <= 4 * h
    solved = (al.scale ** 2 * (d * d).sum() + 2 * al.scale * al.shift * d.sum() + d.size * al.shift ** 2
              - 2 * al.scale * (d * r).sum() - 2 * al.shift * r.sum())
    assert solved <= cost.min() + 1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (K, K), elements=st.floats(0.5, 5.0)), arrays(np.float64, (K, K), elements=st.floats(0.5, 5.0)))
def test_alignment_is_local_minimum(d, r):
    al = solve_patch_alignment(d, r)
    if not al.valid or np.var(d) < 1e-6:
        return
    base = ((al.apply(d) - r) ** 2).sum()
    for ds, dt in ((1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)):
        assert ((((al.scale + ds) * d + al.shift + dt) - r) ** 2).sum() >= base - 1e-9


# --------------------------------------------------------------------------- depth

def depth_oracle(a, r, valid):
    res = [abs(r[i, j] - a[i, j]) for i in range(K) for j in range(K) if valid[i, j]]
    pairs = []
    for i in range(K):
        for j in range(K):
            if j + 1 < K and valid[i, j] and valid[i, j + 1]:
                pairs.append(abs((r[i, j + 1] - r[i, j]) - (a[i, j + 1] - a[i, j])))
            if i + 1 < K and valid[i, j] and valid[i + 1, j]:
                pairs.append(abs((r[i + 1, j] - r[i, j]) - (a[i + 1, j] - a[i, j])))
    return np.mean(res), np.mean(pairs)


def test_depth_examples():
    rng = np.random.default_rng(6)
    a = rng.uniform(1, 3, (K, K))
    assert depth_losses(a, a)[:2] == (0.0, 0.0)
    Ld, Lg, _, _ = depth_losses(a, a + 0.37)
    assert Ld == pytest.approx(0.37, abs=1e-12) and Lg == pytest.approx(0.0, abs=1e-12)
    r = rng.uniform(1, 3, (K, K))
    valid = rng.random((K, K)) > 0.2
    Ld, Lg, _, _ = depth_losses(a, r, valid)
    od, og = depth_oracle(a, r, valid)
    assert abs(Ld - od) < 1e-12 and abs(Lg - og) < 1e-12


def test_depth_adjoints():
    rng = np.random.default_rng(7)
    a, r = rng.uniform(1, 3, (4, K, K)), rng.uniform(1, 3, (4, K, K))
    valid = rng.random((4, K, K)) > 0.2
    _, _, gd, gg = depth_losses(a, r, valid)
    fd_check(lambda z: depth_losses(a, z, valid)[0], r, gd)
    fd_check(lambda z: depth_losses(a, z, valid)[1], r, gg)


def test_invalid_patch_contributes_nothing():
    rng = np.random.default_rng(8)
    a, r = rng.uniform(1, 3, (2, K, K)), rng.uniform(1, 3, (2, K, K))
    Ld, Lg, gd, gg = depth_losses(a, r, patch_valid=np.array([True, False]))
    assert not gd[1].any() and not gg[1].any()
    one = depth_losses(a[0], r[0])
    assert Ld == pytest.approx(one[0] / 2) and Lg == pytest.approx(one[1] / 2)


# --------------------------------------------------------------------------- normals

def normal_oracle(n, ng, nm, valid):
    per = []
    for i in range(K):
        for j in range(K):
            if valid[i, j]:
                per.append(sum(1 - n[i, j] @ x[i, j] + np.abs(n[i, j] - x[i, j]).sum() for x in (ng, nm)))
    e = n - ng
    pairs = []
    for i in range(K):
        for j in range(K):
            if j + 1 < K and valid[i, j] and valid[i, j + 1]:
                pairs.append(np.abs(e[i, j + 1] - e[i, j]).sum())
            if i + 1 < K and valid[i, j] and valid[i + 1, j]:
                pairs.append(np.abs(e[i + 1, j] - e[i, j]).sum())
    return np.mean(per), np.mean(pairs)


def test_normal_examples():
    rng = np.random.default_rng(9)
    n = unit_field(rng)
    assert normal_losses(n, n, n)[:2] == pytest.approx((0.0, 0.0), abs=1e-15)
    Ln, Lg, *_ = normal_losses(n, -n, n)
    per = 2 + 2 * np.abs(n).sum(-1)
    assert Ln == pytest.approx(per.mean(), abs=1e-12)
    ng, nm = unit_field(rng), unit_field(rng)
    valid = rng.random((K, K)) > 0.25
    Ln, Lg, *_ = normal_losses(n, ng, nm, valid)
    on, og = normal_oracle(n, ng, nm, valid)
    assert abs(Ln - on) < 1e-12 and abs(Lg - og) < 1e-12


def test_normal_adjoints():
    rng = np.random.default_rng(10)
    n, ng, nm = unit_field(rng, (2, K, K)), unit_field(rng, (2, K, K)), unit_field(rng, (2, K, K))
    valid = rng.random((2, K, K)) > 0.2
    _, _, dng, dnm, dgg = normal_losses(n, ng, nm, valid)
    fd_check(lambda z: normal_losses(n, z, nm, valid)[0], ng, dng)
    fd_check(lambda z: normal_losses(n, ng, z, valid)[0], nm, dnm)
    fd_check(lambda z: normal_losses(n, z, nm, valid)[1], ng, dgg)
    assert not normal_losses(n, ng, nm, valid)[3][~valid].any()


# --------------------------------------------------------------------------- photometric

def ssim_oracle(x3, y3, m):
    x, y = x3.mean(-1)[m], y3.mean(-1)[m]
    mx, my = x.mean(), y.mean()
    vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
    cxy = ((x - mx) * (y - my)).mean()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return 1 - (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def ncc_oracle(x3, y3, m):
    x, y = x3.mean(-1)[m], y3.mean(-1)[m]
    dx, dy = x - x.mean(), y - y.mean()
    return 1 - (dx * dy).sum() / np.sqrt(((dx ** 2).sum() + 1e-8) * ((dy ** 2).sum() + 1e-8))


def test_ssim_examples_and_oracle():
    rng = np.random.default_rng(11)
    c = rng.random((K, K, 3))
    assert masked_ssim(c, c)[0] == pytest.approx(0, abs=1e-15)
    L, g = masked_ssim(c, rng.random((K, K, 3)), np.zeros((K, K), bool))
    assert L == 0 and not g.any()
    x, m = rng.random((K, K, 3)), rng.random((K, K)) > 0.3
    assert abs(masked_ssim(x, c, m)[0] - ssim_oracle(x, c, m)) < 1e-10


def test_ncc_examples_and_oracle():
    rng = np.random.default_rng(12)
    c = rng.random((K, K, 3))
    assert masked_ncc(2.5 * c + 0.1, c)[0] == pytest.approx(0, abs=1e-6)
    L, g = masked_ncc(c, np.full((K, K, 3), 0.4))
    assert L == 0 and np.isfinite(g).all()
    x, m = rng.random((K, K, 3)), rng.random((K, K)) > 0.3
    assert abs(masked_ncc(x, c, m)[0] - ncc_oracle(x, c, m)) < 1e-10


def test_photometric_adjoints():
    rng = np.random.default_rng(13)
    x, y = rng.random((3, K, K, 3)), rng.random((3, K, K, 3))
    m = rng.random((3, K, K)) > 0.3
    fd_check(lambda z: masked_ssim(z, y, m)[0], x, masked_ssim(x, y, m)[1])
    fd_check(lambda z: masked_ncc(z, y, m)[0], x, masked_ncc(x, y, m)[1])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(-1.0, 1.0), st.integers(0, 2 ** 31))
def test_ncc_affine_invariance(g, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((K, K, 3)), rng.random((K, K, 3))
    assert abs(masked_ncc(x, g * y + b)[0] - masked_ncc(x, y)[0]) < 1e-6


# --------------------------------------------------------------------------- mvs / total

def test_mvs_examples():
    rng = np.random.default_rng(14)
    d = rng.uniform(1, 3, (K, K))
    assert mvs_depth_loss(d, d)[0] == 0
    L, g = mvs_depth_loss(np.zeros((K, K)), d)
    assert L == 0 and not g.any()
    mvs = np.where(rng.random((K, K)) > 0.3, rng.uniform(1, 3, (K, K)), 0.0)
    m = mvs > 0
    assert abs(mvs_depth_loss(mvs, d)[0] - np.abs(d[m] - mvs[m]).mean()) < 1e-12
    fd_check(lambda z: mvs_depth_loss(mvs, z)[0], d.copy(), mvs_depth_loss(mvs, d)[1])


def test_total_loss():
    w = LossWeights()
    assert total_loss({k: 0.0 for k in w.as_dict()}, w)[0] == 0
    assert total_loss({"depth": 3.0}, w)[0] == pytest.approx(0.05 * 3.0)
    rng = np.random.default_rng(15)
    terms = {k: rng.random() for k in w.as_dict()}
    assert total_loss(terms, w)[0] == sum(terms[k] * v for k, v in w.as_dict().items())
    assert total_loss({"rgb": float("nan")}, w)[0] == 0
    with pytest.raises(ValueError):
        LossWeights(depth=-1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((K, K, 3)), rng.random((K, K, 3))
    a, r = rng.uniform(1, 3, (K, K)), rng.uniform(1, 3, (K, K))
    n, ng, nm = unit_field(rng), unit_field(rng), unit_field(rng)
    assert huber_rgb(x, y)[0] >= 0
    assert min(depth_losses(a, r)[:2]) >= 0
    assert min(normal_losses(n, ng, nm)[:2]) >= 0
    assert masked_ssim(x, y)[0] >= 0 and masked_ncc(x, y)[0] >= 0
