import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st
from scipy.special import erf

from conftest import finite_difference_error
from dttnet.blocks import TDF, TFC, BlockConfig, ConvBlock, Downsample, TFCTDFv3, Upsample

CFG = BlockConfig()


# --- numpy oracles -------------------------------------------------------------


def conv2d_ref(x, w, b, stride=1, pad=1):
    """Direct zero-padded cross-correlation, x [C, F, T], w [O, C, k, k]."""
    c, f, t = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    fo = (f + 2 * pad - k) // stride + 1
    to = (t + 2 * pad - k) // stride + 1
    out = np.zeros((o, fo, to))
    for oc in range(o):
        for i in range(fo):
            for j in range(to):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


def instance_norm_ref(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma[:, None, None] + beta[:, None, None]


def gelu_ref(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def np_(p):
    return p.detach().numpy()


def tfc_ref(x, tfc):
    for blk in tfc.convs:
        norm, _, conv = blk
        x = conv2d_ref(gelu_ref(instance_norm_ref(x, np_(norm.weight), np_(norm.bias))),
                       np_(conv.weight), np_(conv.bias))
    return x


def tdf_ref(x, tdf):
    r, e = np_(tdf.reduce.weight), np_(tdf.expand.weight)  # [F/bf, F], [F, F/bf]
    h = np.einsum("gf,cft->cgt", r, x)
    return x + np.einsum("fg,cgt->cft", e, gelu_ref(h))


def v3_ref(x, blk):
    y = tfc_ref(x, blk.tfc1)
    y = tdf_ref(y, blk.tdf)
    y = tfc_ref(y, blk.tfc2)
    w = np_(blk.shortcut.weight)[:, :, 0, 0]
    return y + np.einsum("oc,cft->oft", w, x) + np_(blk.shortcut.bias)[:, None, None]


def randomize(module, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
    return module


# --- TFC ---------------------------------------------------------------------------


def test_tfc_shape():
    assert TFC(32, CFG)(torch.randn(1, 32, 64, 16)).shape == (1, 32, 64, 16)


def test_tfc_zero_in_zero_out():
    tfc = TFC(8, CFG)
    for blk in tfc.convs:
        torch.nn.init.zeros_(blk.conv.bias)
    assert torch.count_nonzero(tfc(torch.zeros(2, 8, 16, 8))) == 0


def test_tfc_matches_direct_convolution(rng):
    tfc = randomize(TFC(1, CFG).double(), 3)
    with torch.no_grad():
        # identity-like kernel in the middle block: centre tap plus a small neighbour
        k = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        k[0, 0, 1, 1], k[0, 0, 0, 1] = 1.0, 0.25
        tfc.convs[1].conv.weight.copy_(k)
    x = rng.normal(size=(1, 1, 4, 4))
    out = tfc(torch.from_numpy(x)).detach().numpy()[0]
    np.testing.assert_allclose(out, tfc_ref(x[0], tfc), atol=1e-10)


def test_conv_block_order_is_norm_act_conv():
    blk = ConvBlock(4, 4, CFG)
    assert [type(m).__name__ for m in blk] == ["InstanceNorm2d", "GELU", "Conv2d"]


def test_tfc_rejects_wrong_channels():
    with pytest.raises(ValueError):
        TFC(8, CFG)(torch.zeros(1, 4, 8, 8))


# --- TDF ---------------------------------------------------------------------------


@pytest.mark.parametrize("bins, bf, width", [(2048, 8, 256), (864, 2, 432)])
def test_tdf_bottleneck_width(bins, bf, width):
    tdf = TDF(bins, BlockConfig(bf=bf))
    assert tdf.bottleneck == width
    assert tdf(torch.randn(1, 2, bins, 3)).shape == (1, 2, bins, 3)


def test_tdf_zero_weights_is_identity():
    tdf = TDF(64, CFG)
    with torch.no_grad():
        tdf.reduce.weight.zero_()
        tdf.expand.weight.zero_()
    x = torch.randn(2, 3, 64, 5)
    assert torch.equal(tdf(x), x)


def test_tdf_matches_oracle(rng):
    tdf = TDF(16, BlockConfig(bf=4)).double()
    x = rng.normal(size=(1, 3, 16, 5))
    np.testing.assert_allclose(tdf(torch.from_numpy(x)).detach().numpy()[0], tdf_ref(x[0], tdf), atol=1e-12)


def test_tdf_rejects_indivisible():
    with pytest.raises(ValueError):
        TDF(30, BlockConfig(bf=8))
    with pytest.raises(ValueError):
        TDF(32, CFG)(torch.zeros(1, 1, 16, 4))


# --- TFC-TDF v3 -----------------------------------------------------------------


def test_v3_shape():
    blk = TFCTDFv3(32, 128, CFG)
    assert blk(torch.randn(2, 32, 128, 32)).shape == (2, 32, 128, 32)


def test_v3_identity_when_internals_zero():
    blk = TFCTDFv3(4, 16, CFG)
    with torch.no_grad():
        for name, p in blk.named_parameters():
            if not name.startswith("shortcut") and not name.endswith(("0.weight", "0.bias")):
                p.zero_()
        blk.shortcut.weight.copy_(torch.eye(4)[:, :, None, None])
        blk.shortcut.bias.zero_()
    x = torch.randn(1, 4, 16, 8)
    assert torch.equal(blk(x), x)


def test_v3_matches_reference_composition(rng):
    blk = randomize(TFCTDFv3(4, 8, CFG).double(), 7)
    x = rng.normal(size=(1, 4, 8, 8))
    out = blk(torch.from_numpy(x)).detach().numpy()[0]
    np.testing.assert_allclose(out, v3_ref(x[0], blk), atol=1e-9)


# --- down / up sampling ---------------------------------------------------------


def test_downsample_default_shapes():
    with torch.no_grad():
        y = Downsample(32, 32, CFG)(torch.randn(1, 32, 2048, 256))
        assert y.shape == (1, 64, 1024, 128)
        assert Downsample(64, 32, CFG)(y).shape == (1, 96, 512, 64)


def test_downsample_matches_direct_strided_conv(rng):
    down = randomize(Downsample(2, 1, CFG).double(), 1)
    x = rng.normal(size=(1, 2, 4, 4))
    norm = down.block[0]
    h = gelu_ref(instance_norm_ref(x[0], np_(norm.weight), np_(norm.bias)))
    ref = conv2d_ref(h, np_(down.conv.weight), np_(down.conv.bias), stride=2)
    np.testing.assert_allclose(down(torch.from_numpy(x)).detach().numpy()[0], ref, atol=1e-12)


def test_upsample_shapes():
    with torch.no_grad():
        assert Upsample(160, 32, CFG)(torch.randn(1, 160, 128, 16)).shape == (1, 128, 256, 32)
        x = torch.randn(1, 32, 16, 8)
        assert Upsample(64, 32, CFG)(Downsample(32, 32, CFG)(x)).shape == x.shape


def test_shape_errors():
    with pytest.raises(ValueError):
        Downsample(4, 4, CFG)(torch.zeros(1, 4, 7, 8))
    with pytest.raises(ValueError):
        Downsample(4, 4, CFG)(torch.zeros(1, 4, 8, 5))
    with pytest.raises(ValueError):
        Upsample(32, 32, CFG)
    with pytest.raises(ValueError):
        Upsample(8, 4, CFG)(torch.zeros(1, 4, 8, 8))


def test_strided_conv_adjointness(rng):
    down = Downsample(3, 2, CFG).double()
    up = Upsample(5, 2, CFG).double()
    with torch.no_grad():
        up.conv.weight.copy_(down.conv.weight)  # both [5, 3, 3, 3]
    x = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    y = torch.from_numpy(rng.normal(size=(1, 5, 2, 2)))
    with torch.no_grad():
        ax = torch.nn.functional.conv2d(x, down.conv.weight, stride=2, padding=1)
        aty = torch.nn.functional.conv_transpose2d(y, up.conv.weight, stride=2, padding=1, output_padding=1)
    assert ax.shape == y.shape and aty.shape == x.shape
    lhs = float((ax * y).sum())
    rhs = float((x * aty).sum())
    # brute-force inner products, independent of torch
    ref_ax = conv2d_ref(x.numpy()[0], down.conv.weight.detach().numpy(), np.zeros(5), stride=2)
    assert lhs == pytest.approx(float((ref_ax * y.numpy()[0]).sum()), abs=1e-10)
    assert lhs == pytest.approx(rhs, abs=1e-10)


# --- properties --------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 6), st.integers(1, 4), st.integers(1, 5),
    st.sampled_from([1, 2, 4]), st.integers(1, 4),
)
def test_shape_contracts(b, c, f_half, t_half, bf, g):
    f, t = 2 * f_half * bf, 2 * t_half
    x = torch.randn(b, c, f, t)
    cfg = BlockConfig(bf=bf)
    assume(f_half * bf * t_half > 1)  # instance norm needs more than one element per map
    with torch.no_grad():
        assert TFC(c, cfg)(x).shape == x.shape
        assert TDF(f, cfg)(x).shape == x.shape
        assert TFCTDFv3(c, f, cfg)(x).shape == x.shape
        d = Downsample(c, g, cfg)(x)
        assert d.shape == (b, c + g, f // 2, t // 2)
        assert Upsample(c + g, g, cfg)(d).shape == x.shape


@pytest.mark.parametrize(
    "make",
    [
        lambda: TFC(4, CFG),
        lambda: TDF(8, BlockConfig(bf=2)),
        lambda: TFCTDFv3(4, 8, BlockConfig(bf=2)),
        lambda: Downsample(4, 2, CFG),
        lambda: Upsample(4, 2, CFG),
    ],
    ids=["tfc", "tdf", "v3", "down", "up"],
)
def test_backward_matches_finite_differences(make, rng):
    torch.manual_seed(0)
    m = make().double()
    x = torch.from_numpy(rng.normal(size=(1, 4, 8, 8)))
    probe = torch.from_numpy(rng.normal(size=m(x).shape))
    params = list(m.parameters())
    err = finite_difference_error(lambda: (m(x) * probe).sum(), [x] + params, max_entries=64)
    assert err <= 1e-3


def test_downsample_single_entry_gradient(rng):
    m = Downsample(4, 2, CFG).double()
    x = torch.from_numpy(rng.normal(size=(1, 4, 8, 8))).requires_grad_(True)
    m(x).sum().backward()
    auto = x.grad[0, 1, 3, 5].item()
    eps = 1e-3
    with torch.no_grad():
        xp, xm = x.clone(), x.clone()
        xp[0, 1, 3, 5] += eps
        xm[0, 1, 3, 5] -= eps
        fd = (m(xp).sum() - m(xm).sum()).item() / (2 * eps)
    assert abs(auto - fd) <= 1e-3 * max(abs(fd), 1e-8)
