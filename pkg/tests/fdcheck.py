"""Central finite-difference gradient oracle for float64 modules."""

from __future__ import annotations

import torch

H = 1e-5


def randomize_(module: torch.nn.Module, std: float = 0.3, seed: int = 0) -> None:
    # zero-initialised gates make most gradients vanish; move off that point first
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)


def rel_err(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_param_error(loss_fn, params: dict[str, torch.Tensor], n_entries: int = 3, seed: int = 0,
                    h: float = H) -> tuple[float, str]:
    """Worst relative error over every named parameter.

    Each parameter is checked along one random direction (so every entry is
    covered) and at ``n_entries`` individual entries.
    """
    g = torch.Generator().manual_seed(seed)
    for p in params.values():
        p.grad = None
    base = loss_fn()
    base.backward()
    # central differences carry ~eps*|f|/h of rounding noise; below this scale a
    # relative error says nothing about the gradient
    floor = 1e-6 * max(1.0, abs(float(base.detach())))
    worst, where = 0.0, ""
    for name, p in params.items():
        grad = p.grad.detach().clone()
        direction = torch.randn(p.shape, generator=g, dtype=p.dtype)
        probes = [("dir", direction)]
        for idx in torch.randint(p.numel(), (min(n_entries, p.numel()),), generator=g).tolist():
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[idx] = 1.0
            probes.append((f"[{idx}]", e.view(p.shape)))
        for label, d in probes:
            with torch.no_grad():
                p.add_(h * d)
                up = float(loss_fn())
                p.sub_(2 * h * d)
                down = float(loss_fn())
                p.add_(h * d)
            fd = (up - down) / (2 * h)
            an = float((grad * d).sum())
            err = rel_err(fd, an, floor)
            if err > worst:
                worst, where = err, f"{name}{label} fd={fd:.6g} analytic={an:.6g}"
    return worst, where


def module_param_error(module: torch.nn.Module, loss_fn, **kw) -> tuple[float, str]:
    return max_param_error(loss_fn, dict(module.named_parameters()), **kw)
