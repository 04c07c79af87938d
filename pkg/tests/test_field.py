import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import mini_config, random_scales, randomized
from helpers import central_gradient, loss_fixture, parameter_fd_error, smooth_points
from snsr.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from snsr.field import FieldConfig, HashGridConfig, ScaleField, ScaleTriplane


def small_config():
    return FieldConfig(hash=HashGridConfig(n_levels=4, log2_table_size=12, base_resolution=4, finest_resolution=64),
                       plane_resolution=16, scale_resolution=8, plane_features=4, hidden=16)


def test_default_dimensions():
    cfg = FieldConfig()
    assert cfg.hash.width == 28
    assert cfg.input_width == 55
    res = cfg.hash.resolutions()
    assert len(res) == 14 and res[0] == 16 and res[-1] == 2048
    assert all(b > a for a, b in zip(res, res[1:]))
    field = ScaleField(cfg)
    assert tuple(field.triplane.planes.shape) == (3, 128, 32, 8)
    assert torch.count_nonzero(field.triplane.planes) == 0
    assert field.hidden.in_features == 55 and field.hidden.out_features == 64
    assert field.out.out_features == 1
    assert field.hash.table.shape[0] == 2


def test_resolutions_must_increase():
    with pytest.raises(ValueError):
        HashGridConfig(n_levels=8, base_resolution=4, finest_resolution=6).resolutions()


def test_hash_vertex_and_cell_center():
    field = randomized(ScaleField(small_config()).double())
    grid = field.hash
    r = grid.resolutions[0]
    # a vertex of the coarsest level is stored verbatim
    v = torch.tensor([[3, 1, 2]], dtype=torch.float64)
    p = v / r * 2 - 1
    feats, _ = grid(p)
    idx = 3 + 1 * (r + 1) + 2 * (r + 1) ** 2
    np.testing.assert_allclose(feats[0, :2].detach().numpy(), grid.table[:, idx].detach().numpy(), atol=1e-12)
    # a cell center is the mean of the cell's eight corners
    c = (v + 0.5) / r * 2 - 1
    corners = [3 + dx + (1 + dy) * (r + 1) + (2 + dz) * (r + 1) ** 2
               for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    feats, _ = grid(c)
    np.testing.assert_allclose(feats[0, :2].detach().numpy(), grid.table[:, corners].detach().mean(1).numpy(), atol=1e-12)


@pytest.mark.parametrize("cfg", [small_config(), FieldConfig()], ids=["small", "default"])
def test_hash_matches_bruteforce(cfg):
    # float64: at resolution 2048 float32 positions alone carry ~1e-4 weight error
    field = ScaleField(cfg).double()
    with torch.no_grad():
        field.hash.table.uniform_(-1, 1, generator=torch.Generator().manual_seed(3))
    p = torch.rand(100, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64) * 2 - 1
    feats, _ = field.hash(p)
    ref = np.stack([oracles.hash_features(field.hash, q.double().tolist()) for q in p])
    assert np.abs(feats.detach().double().numpy() - ref).max() < 1e-6


def test_hash_out_of_domain_is_clamped_and_counted():
    field = ScaleField(small_config())
    p = torch.tensor([[1.5, 0.0, 0.0], [0.2, 0.1, -0.3]])
    feats, _ = field.hash(p)
    edge, _ = field.hash(torch.tensor([[1.0, 0.0, 0.0]]))
    assert torch.equal(feats[0], edge[0])
    assert field.hash.n_clamped == 1


def test_triplane_zero_init_and_vertex_lookup():
    tri = ScaleTriplane(8, 4, 3, 1e-3, 1e-2).double()
    p = torch.rand(10, 3, dtype=torch.float64) * 2 - 1
    s = torch.full((10,), 3e-3, dtype=torch.float64)
    feats, _ = tri(p, s)
    assert torch.count_nonzero(feats) == 0
    with torch.no_grad():
        tri.planes.normal_(generator=torch.Generator().manual_seed(0))
    bins = tri.scale_bins()
    i, j = 5, 2
    coord = i / 7 * 2 - 1
    feats, _ = tri(torch.tensor([[coord, coord, coord]], dtype=torch.float64), bins[j:j + 1])
    for axis in range(3):
        np.testing.assert_allclose(feats[0, axis * 3:(axis + 1) * 3].detach().numpy(),
                                   tri.planes[axis, i, j].detach().numpy(), atol=1e-12)


def test_triplane_matches_bruteforce():
    field = ScaleField(FieldConfig()).double()
    with torch.no_grad():
        field.triplane.planes.uniform_(-1, 1, generator=torch.Generator().manual_seed(5))
    g = torch.Generator().manual_seed(6)
    p = torch.rand(100, 3, generator=g, dtype=torch.float64) * 2 - 1
    s = torch.exp(torch.empty(100, dtype=torch.float64).uniform_(math.log(5e-4), math.log(2e-2), generator=g))  # some clamp
    feats, _ = field.triplane(p, s)
    ref = np.stack([oracles.triplane_features(field.triplane, q.double().tolist(), float(si))
                    for q, si in zip(p, s)])
    assert np.abs(feats.detach().double().numpy() - ref).max() < 1e-6
    assert field.triplane.n_clamped > 0


def test_constant_mlp_gives_constant_field():
    field = randomized(ScaleField(mini_config()).double())
    with torch.no_grad():
        field.hidden.weight.zero_()
        field.hidden.bias.zero_()
        field.out.weight.zero_()
        field.out.bias.fill_(0.37)
    p = torch.rand(50, 3, dtype=torch.float64) * 2 - 1
    f, g = field(p, random_scales(50, field))
    assert torch.all(f == 0.37)
    assert torch.all(g == 0)


def test_forward_matches_reference(mini_field):
    g = torch.Generator().manual_seed(9)
    p = torch.rand(40, 3, generator=g, dtype=torch.float64) * 2 - 1
    s = random_scales(40, mini_field, 1)
    f = mini_field.sdf(p, s)
    ref = np.array([oracles.sdf(mini_field, q.tolist(), float(si)) for q, si in zip(p, s)])
    assert np.abs(f.detach().numpy() - ref).max() < 1e-9


def test_forward_matches_reference_default_width():
    field = randomized(ScaleField(FieldConfig()), seed=2, std=0.1)
    g = torch.Generator().manual_seed(10)
    p = torch.rand(30, 3, generator=g) * 2 - 1
    s = random_scales(30, field, 2, torch.float32)
    f = field.sdf(p, s)
    ref = np.array([oracles.sdf(field, q.double().tolist(), float(si)) for q, si in zip(p, s)])
    assert np.abs(f.detach().double().numpy() - ref).max() < 1e-5


def test_spatial_gradient_matches_fd_miniature(mini_field):
    p, s = smooth_points(mini_field, 200, seed=1)
    _, g = mini_field(p, s)
    fd = central_gradient(mini_field, p, s)
    rel = (g - fd).norm(dim=1) / g.norm(dim=1).clamp_min(1e-12)
    assert rel.max() < 1e-3


def test_spatial_gradient_matches_fd_default():
    field = randomized(ScaleField(FieldConfig()).double(), seed=4, std=0.1)
    p, s = smooth_points(field, 100, seed=2, candidates=8000)
    _, g = field(p, s)
    fd = central_gradient(field, p, s)
    rel = (g - fd).norm(dim=1) / g.norm(dim=1).clamp_min(1e-12)
    assert rel.max() < 1e-3


def test_gradient_zero_outside_domain_hash_and_plane_terms():
    field = randomized(ScaleField(mini_config()).double())
    p = torch.tensor([[1.3, 0.2, 0.1]], dtype=torch.float64)
    _, g = field(p, random_scales(1, field))
    # beyond x = 1 the encoders are constant in x; only the raw-coordinate input varies
    h = 1e-5
    fd = (field.sdf(p + torch.tensor([[h, 0, 0]], dtype=torch.float64), random_scales(1, field))
          - field.sdf(p - torch.tensor([[h, 0, 0]], dtype=torch.float64), random_scales(1, field))) / (2 * h)
    assert float(g[0, 0].detach()) == pytest.approx(float(fd[0]), rel=1e-6)


def test_scale_is_ignored_with_zero_planes():
    field = randomized(ScaleField(mini_config()).double())
    with torch.no_grad():
        field.triplane.planes.zero_()
    p = torch.rand(64, 3, dtype=torch.float64) * 2 - 1
    f1 = field.sdf(p, random_scales(64, field, 1))
    f2 = field.sdf(p, random_scales(64, field, 2))
    assert torch.equal(f1, f2)


def test_continuity(mini_field):
    p = torch.rand(200, 3, dtype=torch.float64) * 1.8 - 0.9
    s = random_scales(200, mini_field)
    d = torch.randn(200, 3, dtype=torch.float64)
    d = 1e-6 * d / d.norm(dim=1, keepdim=True)
    assert (mini_field.sdf(p + d, s) - mini_field.sdf(p, s)).abs().max() < 1e-4


def test_nonfinite_output_raises_with_diagnostics(mini_field):
    with torch.no_grad():
        mini_field.out.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="out.bias"):
        mini_field.sdf(torch.zeros(1, 3, dtype=torch.float64), random_scales(1, mini_field))


def test_geometric_init():
    field = ScaleField(FieldConfig()).geometric_init(0.5, generator=torch.Generator().manual_seed(0))
    g = torch.Generator().manual_seed(1)
    s = random_scales(1000, field, 3, torch.float32)
    assert float(field.sdf(torch.zeros(1, 3), s[:1])) < 0
    # sign agrees with the analytic sphere
    p = torch.rand(1000, 3, generator=g) * 2 - 1
    r = p.norm(dim=1)
    keep = (r - 0.5).abs() > 0.02
    f = field.sdf(p, s)
    assert torch.all(torch.sign(f[keep]) == torch.sign(r[keep] - 0.5))
    # near-zero on the sphere
    d = torch.nn.functional.normalize(torch.randn(1000, 3, generator=g), dim=1)
    assert field.sdf(0.5 * d, s).abs().max() < 0.05
    # the triplane contributes nothing at init
    assert torch.count_nonzero(field.triplane.planes) == 0
    assert field.sharpness.item() == pytest.approx(4 / 0.3, rel=1e-6)


def test_geometric_init_gradient_direction():
    """Gradient direction vs p/|p|. The 64-unit ReLU layer approximates |p| with
    a few percent ripple, so individual directions can be ~11 degrees off while
    the mean error stays small."""
    field = ScaleField(FieldConfig()).geometric_init(0.5, generator=torch.Generator().manual_seed(0))
    g = torch.Generator().manual_seed(2)
    d = torch.nn.functional.normalize(torch.randn(1000, 3, generator=g), dim=1)
    p = d * (0.2 + 0.7 * torch.rand(1000, 1, generator=g))
    _, grad = field(p, random_scales(1000, field, 4, torch.float32))
    cos = (torch.nn.functional.normalize(grad, dim=1) * d).sum(1).clamp(-1, 1)
    ang = torch.rad2deg(torch.arccos(cos))
    assert ang.mean() < 5.0
    assert ang.max() < 12.0


def test_geometric_init_rejects_bad_radius():
    with pytest.raises(ValueError):
        ScaleField(mini_config()).geometric_init(1.5)


def test_output_bias_gradient(mini_field):
    p = torch.tensor([[0.1, -0.2, 0.3]], dtype=torch.float64)
    s = random_scales(1, mini_field)
    f = mini_field.sdf(p, s)
    (f**2).sum().backward()
    assert mini_field.out.bias.grad.item() == pytest.approx(2 * f.item(), rel=1e-12)


def test_untouched_hash_entries_get_zero_gradient():
    field = randomized(ScaleField(small_config()).double())
    p = torch.tensor([[0.11, -0.42, 0.33]], dtype=torch.float64)
    s = random_scales(1, field)
    f, g = field(p, s)
    (f.sum() + g.pow(2).sum()).backward()
    res = field.hash.res.double()
    cell = ((p.T + 1) * 0.5)[:, None, :] * res[None, :, None]
    touched = field.hash.corner_index(cell.floor().long()).reshape(-1)
    mask = torch.ones(field.hash.table.shape[1], dtype=torch.bool)
    mask[touched] = False
    assert torch.all(field.hash.table.grad[:, mask] == 0)
    assert torch.count_nonzero(field.hash.table.grad[:, ~mask]) > 0


def test_parameter_gradients_match_fd():
    field = randomized(ScaleField(mini_config()).double())
    err, where = parameter_fd_error(field, loss_fixture(field))
    assert err < 1e-3, where


def test_parameter_gradients_are_linear_over_rays(mini_field):
    from snsr.render import RayBundle, render_bundle

    g = torch.Generator().manual_seed(0)
    pts = torch.rand(2, 5, 3, generator=g, dtype=torch.float64) * 1.6 - 0.8
    t = torch.linspace(0, 1, 5, dtype=torch.float64).expand(2, -1)
    sc = random_scales(10, mini_field).view(2, 5)

    def grads(rows):
        mini_field.zero_grad()
        out = render_bundle(mini_field, RayBundle(t[rows], pts[rows], sc[rows]))
        (out.normal.pow(2).sum() + out.opacity.sum()).backward()
        return [p.grad.clone() for p in mini_field.parameters()]

    both = grads([0, 1])
    single = [a + b for a, b in zip(grads([0]), grads([1]))]
    for a, b in zip(both, single):
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 5.0))
def test_scale_selection_invariant_to_positive_rescaling(c):
    from snsr.mesh import select_scales

    tri = ScaleTriplane(16, 8, 4, 1e-3, 1e-2)
    with torch.no_grad():
        tri.planes.normal_(generator=torch.Generator().manual_seed(0))
    a = select_scales(tri, 20, 5)
    with torch.no_grad():
        tri.planes.mul_(c)
    b = select_scales(tri, 20, 5)
    assert np.array_equal(a.index, b.index)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    field = randomized(ScaleField(small_config()), seed=7)
    field.set_scale_range(2.3e-4, 7.7e-3)
    save_checkpoint(field, tmp_path / "f.ckpt", {"iteration": 12})
    back, meta = load_checkpoint(tmp_path / "f.ckpt")
    assert meta == {"iteration": 12}
    assert back.cfg == field.cfg
    for (k, a), (k2, b) in zip(field.state_dict().items(), back.state_dict().items()):
        assert k == k2 and a.dtype == b.dtype and torch.equal(a, b), k
    p = torch.rand(20, 3) * 2 - 1
    s = random_scales(20, field, 0, torch.float32)
    assert torch.equal(field.sdf(p, s), back.sdf(p, s))
    # saving the reloaded field reproduces the same bytes
    save_checkpoint(back, tmp_path / "g.ckpt", {"iteration": 12})
    assert (tmp_path / "f.ckpt").read_bytes() == (tmp_path / "g.ckpt").read_bytes()


def test_checkpoint_float64(tmp_path):
    field = randomized(ScaleField(mini_config()).double())
    save_checkpoint(field, tmp_path / "d.ckpt")
    back, _ = load_checkpoint(tmp_path / "d.ckpt")
    assert back.hidden.weight.dtype == torch.float64
    assert all(torch.equal(a, b) for a, b in zip(field.state_dict().values(), back.state_dict().values()))


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage" * 4)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(tmp_path / "x.ckpt")
    field = ScaleField(mini_config())
    save_checkpoint(field, tmp_path / "t.ckpt")
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated"):
        read_checkpoint(tmp_path / "t.ckpt")
