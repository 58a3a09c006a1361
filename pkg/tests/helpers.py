import numpy as np
import torch


def fd_gradient_check(loss_fn, params, n_weights=12, h=1e-6, seed=0):
    """Compare autograd with central differences on randomly sampled weights.

    ``loss_fn()`` must be deterministic and evaluated in float64. Returns a
    list of (analytic, numeric, relative_error) tuples.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    picks = []
    while len(picks) < n_weights:
        i = int(torch.multinomial(sizes, 1, generator=g))
        j = int(torch.randint(params[i].numel(), (1,), generator=g))
        # weights with an exactly zero gradient carry no information about the check
        if analytic[i].reshape(-1)[j] != 0 and (i, j) not in picks:
            picks.append((i, j))
    results = []
    with torch.no_grad():
        for i, j in picks:
            # multi-index: channels-last weights have no flat view
            idx = tuple(int(k) for k in np.unravel_index(j, params[i].shape))
            orig = params[i][idx].item()
            params[i][idx] = orig + h
            up = loss_fn().item()
            params[i][idx] = orig - h
            down = loss_fn().item()
            params[i][idx] = orig
            num = (up - down) / (2 * h)
            ana = analytic[i].reshape(-1)[j].item()
            rel = abs(ana - num) / max(abs(ana), abs(num))
            results.append((ana, num, rel))
    return results


def crps_integral(members, y) -> float:
    """Exact integral of (F_emp(z) - 1{z >= y})^2, piecewise over breakpoints."""
    xs = sorted(members)
    m = len(xs)
    points = sorted(xs + [y])
    total = 0.0
    for a, b in zip(points[:-1], points[1:]):
        if b == a:
            continue
        z = 0.5 * (a + b)
        F = sum(x <= z for x in xs) / m
        H = 1.0 if z >= y else 0.0
        total += (F - H) ** 2 * (b - a)
    return total


def brute_fractions(binary, window):
    h, w = binary.shape
    r = window // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        s += binary[ii, jj]
            out[i, j] = s / window ** 2
    return out


def brute_fss(f, o, thr, window):
    pf = brute_fractions((f >= thr).astype(float), window)
    po = brute_fractions((o >= thr).astype(float), window)
    den = np.sum(pf ** 2) + np.sum(po ** 2)
    return 1.0 if den == 0 else 1.0 - np.sum((pf - po) ** 2) / den
