import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import mini_config, randomized
from snsr.field import FieldConfig, HashGridConfig, ScaleField
from snsr.render import RayBundle, composite, dump_weight_profiles, render_bundle, sdf_to_alpha


def sphere_field(sharpness=None):
    cfg = FieldConfig(hash=HashGridConfig(n_levels=2, log2_table_size=10, base_resolution=4, finest_resolution=8),
                      plane_resolution=8, scale_resolution=4)
    f = ScaleField(cfg).double().geometric_init(0.5, generator=torch.Generator().manual_seed(0))
    if sharpness is not None:
        with torch.no_grad():
            f.log_sharpness.fill_(math.log(sharpness))
    return f


def plane_field(normal, offset):
    """Field that is exactly f(p) = normal . p + offset inside the domain."""
    f = ScaleField(mini_config()).double()
    with torch.no_grad():
        for p in f.parameters():
            p.zero_()
        f.hidden.weight[0, :3] = torch.as_tensor(normal, dtype=torch.float64)
        f.hidden.bias[0] = 2.0  # keeps the unit active everywhere in [-1, 1]^3
        f.out.weight[0, 0] = 1.0
        f.out.bias.fill_(offset - 2.0)
        f.log_sharpness.fill_(math.log(100.0))
    return f


def line_bundle(origin, direction, n, near=0.05, far=3.5):
    o = torch.as_tensor(origin, dtype=torch.float64).view(-1, 3)
    d = torch.as_tensor(direction, dtype=torch.float64).view(-1, 3)
    t = torch.linspace(near, far, n, dtype=torch.float64).expand(len(o), -1)
    pts = o[:, None] + t[..., None] * d[:, None]
    return RayBundle(t, pts, torch.full(t.shape, 3e-3, dtype=torch.float64))


def test_alpha_examples():
    a = torch.tensor(100.0, dtype=torch.float64)
    assert float(sdf_to_alpha(torch.tensor(0.2), torch.tensor(0.2), a)) == 0.0
    assert float(sdf_to_alpha(torch.tensor(-0.1), torch.tensor(0.3), a)) == 0.0
    val = float(sdf_to_alpha(torch.tensor(0.01, dtype=torch.float64), torch.tensor(-0.01, dtype=torch.float64), a))
    assert abs(val - 0.632121) < 1e-6
    assert val == pytest.approx((0.731059 - 0.268941) / 0.731059, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 1000))
def test_alpha_matches_scalar_oracle(f0, f1, a):
    got = float(sdf_to_alpha(torch.tensor(f0, dtype=torch.float64), torch.tensor(f1, dtype=torch.float64),
                             torch.tensor(a, dtype=torch.float64)))
    assert 0.0 <= got <= 1.0
    assert got == pytest.approx(oracles.alpha(f0, f1, a), abs=1e-9)


def test_composite_examples():
    n1 = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    n2 = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    out, op, w = composite(torch.tensor([[1.0]], dtype=torch.float64), n1.view(1, 1, 3))
    assert torch.equal(out[0], n1) and float(op[0]) == 1.0
    out, op, w = composite(torch.tensor([[0.5, 0.5]], dtype=torch.float64), torch.stack([n1, n2]).view(1, 2, 3))
    torch.testing.assert_close(out[0], 0.5 * n1 + 0.25 * n2)
    assert float(op[0]) == pytest.approx(0.75)
    torch.testing.assert_close(w[0], torch.tensor([0.5, 0.25], dtype=torch.float64))
    out, op, _ = composite(torch.zeros(1, 4, dtype=torch.float64), torch.ones(1, 4, 3, dtype=torch.float64))
    assert torch.all(out == 0) and float(op[0]) == 0.0


def test_weights_valid_on_random_rays():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(10_000, 33, generator=g, dtype=torch.float64).cumsum(1) * 0.05
    a = torch.exp(torch.rand(10_000, 1, generator=g, dtype=torch.float64) * 8)
    alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], a)
    assert torch.all((alpha >= 0) & (alpha <= 1))
    _, op, w = composite(alpha, torch.zeros(10_000, 32, 3, dtype=torch.float64))
    assert torch.all(w >= 0)
    assert float(op.max()) <= 1 + 1e-6


def test_opacity_monotone_in_sample_count():
    g = torch.Generator().manual_seed(1)
    alpha = torch.rand(50, 20, generator=g, dtype=torch.float64) * 0.3
    prev = torch.zeros(50, dtype=torch.float64)
    for k in range(1, 21):
        _, op, _ = composite(alpha[:, :k], torch.zeros(50, k, 3, dtype=torch.float64))
        assert torch.all(op >= prev)
        prev = op


def test_sphere_field_center_and_miss():
    field = sphere_field(sharpness=200.0)
    hit = render_bundle(field, line_bundle([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 256))
    miss = render_bundle(field, line_bundle([0.0, 0.8, -3.0], [0.0, 0.0, 1.0], 256))
    assert float(hit.opacity[0].detach()) > 0.95
    assert float(miss.opacity[0].detach()) < 0.05


def test_render_matches_scalar_compositing():
    field = randomized(ScaleField(mini_config()).double())
    bundle = line_bundle([[0.1, -0.9, 0.2], [0.3, 0.2, -0.9]], [[0.0, 1.0, 0.1], [0.1, 0.0, 1.0]], 12, 0.0, 1.6)
    out = render_bundle(field, bundle)
    a = float(field.sharpness)
    for r in range(2):
        f = out.sdf[r].detach().tolist()
        g = out.gradients[r].detach().tolist()
        T, n_acc, m_acc = 1.0, np.zeros(3), 0.0
        for k in range(len(f)):
            al = oracles.alpha(f[k], f[k + 1], a) if k + 1 < len(f) else 0.0
            n_acc += T * al * np.array(g[k])
            m_acc += T * al
            T *= 1 - al
        np.testing.assert_allclose(out.normal[r].detach().numpy(), n_acc, atol=1e-12)
        assert float(out.opacity[r].detach()) == pytest.approx(m_acc, abs=1e-12)


@pytest.mark.parametrize("normal", [(0.0, 0.0, 1.0), (0.6, 0.0, 0.8), (0.36, -0.48, 0.8)])
def test_plane_normal(normal):
    field = plane_field(normal, 0.1)
    out = render_bundle(field, line_bundle([0.05, -0.02, 3.0], [0.1, 0.05, -1.0], 128))
    n = torch.nn.functional.normalize(out.normal[0].detach(), dim=0)
    ang = math.degrees(math.acos(min(1.0, float(n @ torch.tensor(normal, dtype=torch.float64)))))
    assert ang < 1.0
    assert float(out.opacity[0].detach()) > 0.95


def test_sharper_field_concentrates_weights():
    entropies = []
    for a in (25.0, 50.0, 100.0, 200.0):
        out = render_bundle(sphere_field(a), line_bundle([0.02, 0.01, -3.0], [0.0, 0.0, 1.0], 512))
        w = out.weights[0].detach()
        p = w / w.sum()
        entropies.append(float(-(p[p > 0] * p[p > 0].log()).sum()))
    assert all(b < a for a, b in zip(entropies, entropies[1:])), entropies


def test_weight_profile_dump(tmp_path):
    field = sphere_field(50.0)
    bundle = line_bundle([[0.0, 0.0, -3.0], [0.0, 0.3, -3.0]], [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], 8)
    out = render_bundle(field, bundle)
    dump_weight_profiles(tmp_path / "w.txt", bundle, out)
    lines = (tmp_path / "w.txt").read_text().splitlines()
    assert lines[0] == "# ray 0" and lines[1] == "# t f alpha T w"
    rows = [l for l in lines if not l.startswith("#")]
    assert len(rows) == 16
    vals = np.array([[float(x) for x in r.split()] for r in rows[:8]])
    np.testing.assert_allclose(vals[:, 4], out.weights[0].detach().numpy(), rtol=1e-7)
    np.testing.assert_allclose(vals[:, 3] * vals[:, 2], vals[:, 4], rtol=1e-6, atol=1e-12)
