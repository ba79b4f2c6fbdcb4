import numpy as np
import pytest

from invkernel import kernel_engine as ke
from invkernel import kpn_net as kn
from invkernel import tam
from invkernel.image_core import ShapeMismatch

TINY = dict(image_channels=1, widths=(2, 3, 4), embed_dim=2, tam_hidden=3, dtype="float64")


def perturbed_model(seed=0, scale=0.3, **kw):
    cfg = kn.ModelConfig(**{**TINY, **kw})
    model = kn.init_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for arr in model.parameters().values():
        arr += rng.normal(0, scale, arr.shape)
    return model


# -- scalar reference network ---------------------------------------------

def ref_conv(x, w, b, stride):
    h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.zeros((h + 2, wd + 2, cin))
    xp[1:-1, 1:-1] = x
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((ho, wo, cout))
    for r in range(ho):
        for c in range(wo):
            for o in range(cout):
                acc = b[o]
                for a in range(3):
                    for q in range(3):
                        for i in range(cin):
                            acc += xp[r * stride + a, c * stride + q, i] * w[a, q, i, o]
                out[r, c, o] = acc
    return out


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def ref_net(x, p):
    h, w, _ = x.shape
    H, W = -(-h // 4) * 4, -(-w // 4) * 4
    xp = np.empty((H, W, x.shape[2]))
    for r in range(H):
        for c in range(W):
            xp[r, c] = x[min(r, h - 1), min(c, w - 1)]

    def layer(v, name, stride=1):
        return ref_gelu(ref_conv(v, p[f"{name}.w"], p[f"{name}.b"], stride))

    def up(v):
        return v.repeat(2, axis=0).repeat(2, axis=1)

    h0 = layer(xp, "stem")
    d1 = layer(layer(h0, "down1a", 2), "down1b")
    d2 = layer(layer(d1, "down2a", 2), "down2b")
    bt = layer(d2, "bottleneck")
    u1 = layer(np.concatenate([up(bt), d1], -1), "up1")
    u2 = layer(np.concatenate([up(u1), h0], -1), "up2")
    k = np.einsum("hwc,ck->hwk", u2, p["khead.w"]) + p["khead.b"]
    k[..., 4] += 1
    z = np.einsum("hwc,ck->hwk", u2, p["fhead.w"]) + p["fhead.b"]
    return k[:h, :w], z[:h, :w]


@pytest.mark.parametrize("size", [(8, 8), (10, 7)])
def test_net_forward_matches_scalar_reference(size):
    model = perturbed_model()
    p = model.stages[0].net
    x = np.random.default_rng(3).random(size + (1,))
    k, z, _ = kn.net_forward(x[None], p)
    k_ref, z_ref = ref_net(x, p)
    assert k.shape == (1,) + size + (9,)
    np.testing.assert_allclose(k[0], k_ref, atol=1e-6)
    np.testing.assert_allclose(z[0], z_ref, atol=1e-6)


def test_zero_heads_give_identity_and_uniform_fusion():
    model = kn.init_model(kn.ModelConfig(), 0)
    x = np.random.default_rng(0).random((1, 12, 12, 3)).astype(np.float32)
    k, z, _ = kn.net_forward(x, model.stages[0].net)
    np.testing.assert_array_equal(k, ke.identity_kernel(12, 12, batch=(1,)))
    np.testing.assert_allclose(ke.softmax_fusion(z), 1 / 3, atol=1e-7)


@pytest.mark.parametrize("task", [0, 1, 2])
def test_identity_at_init(task):
    model = kn.init_model(kn.ModelConfig(), 5)
    I = np.random.default_rng(task).random((16, 20, 3)).astype(np.float32)
    J1, UM, J2, _ = kn.two_stage_forward(I, model, task)
    assert np.max(np.abs(J1 - I)) <= 1e-6
    assert np.max(np.abs(J2 - I)) <= 1e-6
    np.testing.assert_allclose(UM, 1 / 9, atol=1e-7)


@pytest.mark.parametrize("h, w", [(8, 8), (9, 13), (17, 8), (3, 3)])
def test_output_shape_contract(h, w):
    model = perturbed_model()
    I = np.random.default_rng(0).random((h, w, 1))
    J1, UM, J2, _ = kn.two_stage_forward(I, model, 1)
    assert J1.shape == J2.shape == I.shape
    assert UM.shape == (h, w, 1)


def test_gain_inverse_is_expressible():
    rng = np.random.default_rng(0)
    J = rng.random((8, 8, 3))
    g = 0.6
    K = ke.identity_kernel(8, 8, np.float64) / g
    alpha = ke.softmax_fusion(np.zeros((8, 8, 3)))
    out = ke.apply_multiscale_fast(ke.gather_samples(g * J, (1, 2, 4)), K, alpha)
    np.testing.assert_allclose(out, J, atol=1e-12)


def test_stage_forward_composes_module_ops():
    model = perturbed_model(2)
    sp = model.stages[0]
    x = np.random.default_rng(1).random((8, 8, 1))
    J, UM, _ = kn.stage_forward(x, sp, 1, (1, 2, 4))
    k, z, _ = kn.net_forward(x[None], sp.net)
    m = tam.modulation(k[0], 1, sp.embeddings, sp.tam)
    kt = tam.modulate(k[0], m)
    ref = ke.apply_multiscale_fast(ke.gather_samples(x, (1, 2, 4)), kt, ke.softmax_fusion(z[0]))
    np.testing.assert_allclose(J, ref, atol=1e-7)
    np.testing.assert_allclose(UM, ke.uncertainty_map(kt), atol=1e-7)


def test_uncertainty_map_feeds_stage_two():
    model = perturbed_model(3)
    I = np.random.default_rng(2).random((8, 8, 1))
    _, _, J2, _ = kn.two_stage_forward(I, model, 0)
    blind = kn.Model(kn.ModelConfig(**{**TINY, "use_um": False}), model.embeddings, model.stages)
    _, _, J2_blind, _ = kn.two_stage_forward(I, blind, 0)
    assert np.max(np.abs(J2 - J2_blind)) > 1e-8


def test_stage_channel_contract():
    cfg = kn.ModelConfig(**TINY)
    model = kn.init_model(cfg, 0)
    rng = np.random.default_rng(0)
    wrong = kn.StageParams(kn.init_net(rng, 1, cfg.widths), model.stages[1].tam, model.embeddings, 2)
    with pytest.raises(ShapeMismatch):
        kn.Model(cfg, model.embeddings, [model.stages[0], wrong])
    with pytest.raises(ShapeMismatch):
        kn.two_stage_forward(np.zeros((8, 8, 3)), model, 0)


def test_one_stage_variant_returns_j1():
    model = perturbed_model(4, two_stage=False)
    I = np.random.default_rng(0).random((8, 8, 1))
    J1, _, J2, caches = kn.two_stage_forward(I, model, 2)
    np.testing.assert_array_equal(J2, J1)
    assert caches.stage2 is None
    assert len(model.stages) == 1


def test_nonfinite_activation_raises():
    model = perturbed_model()
    model.stages[0].net["khead.b"][0] = np.inf
    with pytest.raises(kn.NonFiniteActivation):
        kn.two_stage_forward(np.zeros((8, 8, 1)), model, 0)


def test_zero_upstream_gives_zero_grads():
    model = perturbed_model()
    I = np.random.default_rng(0).random((8, 8, 1))
    J1, _, J2, caches = kn.two_stage_forward(I, model, 0)
    grads = kn.backward(caches, model, np.zeros_like(J1), np.zeros_like(J2))
    assert all(not g.any() for g in grads.values())


def test_consumed_cache_rejected():
    model = perturbed_model()
    I = np.random.default_rng(0).random((8, 8, 1))
    J1, _, J2, caches = kn.two_stage_forward(I, model, 0)
    kn.backward(caches, model, J1, J2)
    with pytest.raises(tam.StaleCache):
        kn.backward(caches, model, J1, J2)


def _loss(model, I, task, w1, w2):
    J1, _, J2, caches = kn.two_stage_forward(I, model, task)
    return float(np.sum(w1 * J1) + np.sum(w2 * J2)), caches


def test_finite_difference_sample():
    model = perturbed_model(7)
    rng = np.random.default_rng(8)
    I = rng.random((8, 8, 1))
    w1, w2 = rng.normal(size=I.shape), rng.normal(size=I.shape)
    _, caches = _loss(model, I, 1, w1, w2)
    grads = kn.backward(caches, model, w1, w2)
    params = model.parameters()
    names = sorted(params)
    picks = [(names[i], tuple(rng.integers(0, s) for s in params[names[i]].shape))
             for i in rng.choice(len(names), 12)]
    h = 1e-4
    for name, idx in picks:
        arr = params[name]
        old = arr[idx]
        arr[idx] = old + h
        lp, _ = _loss(model, I, 1, w1, w2)
        arr[idx] = old - h
        lm, _ = _loss(model, I, 1, w1, w2)
        arr[idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(num - grads[name][idx]) <= 1e-3 * max(abs(num), 1e-4), name


def test_um_path_changes_stage_one_head_grads():
    model = perturbed_model(9)
    rng = np.random.default_rng(1)
    I = rng.random((8, 8, 1))
    w = rng.normal(size=I.shape)
    _, c = _loss(model, I, 0, 0, w)
    with_um = kn.backward(c, model, None, w, um_path=True)
    _, c = _loss(model, I, 0, 0, w)
    without = kn.backward(c, model, None, w, um_path=False)
    assert np.max(np.abs(with_um["s1.net.khead.w"] - without["s1.net.khead.w"])) > 1e-8


def test_init_is_deterministic():
    a = kn.init_model(kn.ModelConfig(), 3).parameters()
    b = kn.init_model(kn.ModelConfig(), 3).parameters()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_load_parameters_round_trip():
    src = perturbed_model(1)
    dst = kn.init_model(src.config, 0)
    dst.load_parameters({k: v.copy() for k, v in src.parameters().items()})
    for k, v in src.parameters().items():
        np.testing.assert_array_equal(dst.parameters()[k], v)
    with pytest.raises(KeyError):
        dst.load_parameters({"embeddings": src.embeddings.entries})
