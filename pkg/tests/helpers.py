import math

import torch


def interpolation_pattern(field, p, s):
    """Per-point signature of everything piecewise in f: hash cells of every
    level, triplane cells and the ReLU on/off mask."""
    res = field.hash.res.to(p.dtype)
    cells = (((p.clamp(-1, 1) + 1) * 0.5)[:, None, :] * res[None, :, None]).floor()
    nx = field.triplane.resolution
    tri = ((p.clamp(-1, 1) + 1) * 0.5 * (nx - 1)).floor()
    with torch.no_grad():
        h, _ = field.hash(p)
        t, _ = field.triplane(p, s)
        pre = field.hidden(torch.cat([p, h, t], -1))
    return torch.cat([cells.reshape(len(p), -1), tri, (pre > 0).to(p.dtype)], 1)


def smooth_points(field, n, h=1e-4, seed=0, lo=-0.9, hi=0.9, candidates=None):
    """``n`` random (p, s) whose +-h stencils along every axis stay inside one
    interpolation cell and one ReLU pattern, so f is smooth over the stencil."""
    g = torch.Generator().manual_seed(seed)
    m = candidates or 40 * n
    dt = field.hidden.weight.dtype
    p = lo + (hi - lo) * torch.rand(m, 3, generator=g, dtype=dt)
    a, b = math.log(field.triplane.s_min), math.log(field.triplane.s_max)
    s = torch.exp(a + (b - a) * torch.rand(m, generator=g, dtype=dt))
    base = interpolation_pattern(field, p, s)
    ok = torch.ones(m, dtype=torch.bool)
    for e in torch.eye(3, dtype=dt):
        for sign in (1, -1):
            ok &= (interpolation_pattern(field, p + sign * h * e, s) == base).all(1)
    idx = torch.nonzero(ok).squeeze(-1)[:n]
    if len(idx) < n:
        raise RuntimeError(f"only {len(idx)} smooth points among {m} candidates")
    return p[idx], s[idx]


def central_gradient(field, p, s, h=1e-4):
    with torch.no_grad():
        return torch.stack([(field.sdf(p + h * e, s) - field.sdf(p - h * e, s)) / (2 * h)
                            for e in torch.eye(3, dtype=p.dtype)], -1)


def loss_fixture(field, n_rays=4, n_samples=6, k=3, n_scales=4, seed=0):
    """A fixed miniature batch and a closure computing the total loss on it."""
    from snsr.losses import LossTerms, csr_loss, eikonal_loss, mask_loss, normal_loss
    from snsr.render import RayBundle, render_bundle

    g = torch.Generator().manual_seed(seed)
    dt = field.hidden.weight.dtype
    start = -0.8 + 0.3 * torch.rand(n_rays, 3, generator=g, dtype=dt)
    direction = torch.nn.functional.normalize(torch.rand(n_rays, 3, generator=g, dtype=dt) + 0.5, dim=-1)
    t = torch.linspace(0, 1.4, n_samples, dtype=dt).expand(n_rays, -1).contiguous()
    points = start[:, None] + t[..., None] * direction[:, None]
    a, b = math.log(field.triplane.s_min), math.log(field.triplane.s_max)
    scales = torch.exp(a + (b - a) * torch.rand(n_rays, n_samples, generator=g, dtype=dt))
    normals = torch.nn.functional.normalize(torch.randn(n_rays, 3, generator=g, dtype=dt), dim=-1)
    masks = (torch.arange(n_rays) % 2 == 0).to(dt)
    bundle = RayBundle(t, points, scales, normals, masks)
    csr_p = -0.8 + 1.6 * torch.rand(k, 3, generator=g, dtype=dt)
    csr_s = torch.exp(a + (b - a) * torch.rand(k, n_scales, generator=g, dtype=dt))

    def loss():
        out = render_bundle(field, bundle)
        ln, _ = normal_loss(out.normal, normals, masks)
        terms = LossTerms(ln, mask_loss(out.opacity, masks), eikonal_loss(out.gradients),
                          csr_loss(field, csr_p, csr_s), 4.0)
        return terms.total

    return loss


def parameter_fd_error(field, loss, h=1e-6, floor=1e-6):
    """Max over all parameter entries of |analytic - central FD| / max(|analytic|, |FD|, floor)."""
    field.zero_grad()
    loss().backward()
    worst, where = 0.0, None
    with torch.no_grad():
        for name, prm in field.named_parameters():
            grad = prm.grad.clone() if prm.grad is not None else torch.zeros_like(prm)
            flat = prm.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = grad.view(-1)[i].item()
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                if err > worst:
                    worst, where = err, (name, i, an, fd)
    return worst, where
