"""Central finite-difference checks on randomly chosen parameter coordinates."""
import numpy as np
import torch


def relative_errors(loss_fn, params, n_coords=20, h=1e-4, seed=0, floor=1e-8):
    """Compare autograd and central differences at ``n_coords`` random coordinates.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    The five-point stencil has O(h**4) truncation error, which allows a step
    large enough that round-off in the loss stays small next to tiny gradients.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errs = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            i = int(f - offsets[k])
            view = params[k].view(-1)
            orig = view[i].item()
            vals = []
            for k_h in (2, 1, -1, -2):
                view[i] = orig + k_h * h
                vals.append(loss_fn().item())
            view[i] = orig
            num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            a = analytic[k].view(-1)[i].item()
            errs.append(abs(a - num) / max(abs(a), abs(num), floor))
    return np.array(errs)
