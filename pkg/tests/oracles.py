"""Independent reference computations used by the unit and acceptance tests."""
import numpy as np
import torch


# ---- naive network layers (numpy, float64) ---------------------------------

def conv2d(x, w, b, stride, pad=1):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[oc, i, j] = b[oc] + np.sum(patch * w[oc])
    return out


def conv_transpose2d(x, w, b, stride=2, pad=1):
    c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for ic in range(c):
        for i in range(h):
            for j in range(wd):
                full[:, i * stride:i * stride + k, j * stride:j * stride + k] += x[ic, i, j] * w[ic]
    out = full[:, pad:full.shape[1] - pad, pad:full.shape[2] - pad]
    return out + b[:, None, None]


def instance_norm(x, gamma, beta, eps=1e-5):
    mean = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma[:, None, None] + beta[:, None, None]


def leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def reference_generator_depth2(state, image):
    """Hand-unrolled depth-2 U-Net forward pass from a state dict."""
    p = {k: v.detach().double().numpy() for k, v in state.items()}
    x = image.astype(np.float64).transpose(2, 0, 1)
    e0 = leaky(conv2d(x, p["down.0.conv.weight"], p["down.0.conv.bias"], 2))
    e1 = leaky(conv2d(e0, p["down.1.conv.weight"], p["down.1.conv.bias"], 2))
    u1 = conv_transpose2d(e1, p["up.0.conv.weight"], p["up.0.conv.bias"])
    u1 = np.maximum(instance_norm(u1, p["up.0.norm.weight"], p["up.0.norm.bias"]), 0.0)
    y = conv_transpose2d(np.concatenate([u1, e0]), p["out.weight"], p["out.bias"])
    return ((np.tanh(y) + 1.0) / 2.0).transpose(1, 2, 0)


def conv_output_size(n, stride, kernel=4, pad=1):
    return (n + 2 * pad - kernel) // stride + 1


# ---- finite differences -------------------------------------------------------

def finite_difference_check(params, loss_fn, h=1e-6, rel_tol=1e-3, abs_tol=1e-5, small=1e-2):
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    Every element of every tensor in ``params`` is perturbed. Returns a list
    of (name, index, analytic, numeric) tuples that violate the tolerance.
    """
    for _, t in params:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [t for _, t in params])
    failures = []
    checked = 0
    with torch.no_grad():
        for (name, t), g in zip(params, grads):
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = gflat[i].item()
                diff = abs(ana - num)
                if max(abs(ana), abs(num)) < small:
                    ok = diff <= abs_tol
                else:
                    ok = diff <= rel_tol * max(abs(ana), abs(num))
                checked += 1
                if not ok:
                    failures.append((name, i, ana, num))
    return failures, checked


# ---- metric brute force ----------------------------------------------------

def brute_force_scores(counts):
    """Plain-loop means of n_d/n_c and n_p/n_c over trios with n_c > 0."""
    t1 = t2 = 0.0
    m = skipped = 0
    for c in counts:
        if c.n_c == 0:
            skipped += 1
            continue
        m += 1
        t1 += c.n_d / c.n_c
        t2 += c.n_p / c.n_c
    if m == 0:
        return None
    return t1 / m, t2 / m, m, skipped


def micro_gradient_case(seed):
    """Depth-2, base-4 generator and 1-layer discriminator on 8x8 inputs, float64."""
    from derain.networks import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator

    gen = build_generator(GeneratorConfig(4, 2, (8, 8)), seed).double()
    disc = build_discriminator(DiscriminatorConfig(4, 1, (8, 8)), seed + 1000).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # move away from the initialiser so every parameter carries gradient signal
        for p in list(gen.parameters()) + list(disc.parameters()):
            p.add_(0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    x = torch.rand((1, 3, 8, 8), generator=g, dtype=torch.float64)
    y = torch.rand((1, 3, 8, 8), generator=g, dtype=torch.float64)
    return gen, disc, x, y
