"""Shared test helpers: finite-difference gradient checks and small oracles."""

import numpy as np
import torch


def finite_difference_check(
    build_loss,
    params: list[torch.Tensor],
    n_coords: int = 20,
    eps: float = 1e-6,
    rtol: float = 1e-3,
    seed: int = 0,
):
    """Compare autograd gradients against central differences.

    ``build_loss()`` must recompute the scalar loss from ``params`` (leaf
    float64 tensors with requires_grad). Samples ``n_coords`` coordinates
    across all parameters and asserts relative error below ``rtol``.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    flat = []
    for p_idx, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        for i in range(param.numel()):
            flat.append((p_idx, i))
    take = min(n_coords, len(flat))
    chosen = rng.choice(len(flat), size=take, replace=False)
    worst = 0.0
    for c in chosen:
        p_idx, i = flat[int(c)]
        param = params[p_idx]
        with torch.no_grad():
            orig = param.view(-1)[i].item()
            param.view(-1)[i] = orig + eps
            up = build_loss().item()
            param.view(-1)[i] = orig - eps
            down = build_loss().item()
            param.view(-1)[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[p_idx].view(-1)[i].item()
        scale = max(abs(numeric), abs(analytic), 1e-8)
        rel = abs(numeric - analytic) / scale
        worst = max(worst, rel)
        assert rel < rtol, (
            f"gradient mismatch at param {p_idx} coord {i}: "
            f"analytic {analytic} vs numeric {numeric} (rel {rel})"
        )
    return worst


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_cell_oracle(x, h, weight_ih, weight_hh, bias_ih, bias_hh):
    """Reference GRU cell on numpy arrays, mirroring the documented gating:
    r = s(W_ir x + b_ir + W_hr h + b_hr), z likewise,
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn)), h' = (1 - z) n + z h.
    """
    gi = weight_ih @ x + bias_ih
    gh = weight_hh @ h + bias_hh
    i_r, i_z, i_n = np.split(gi, 3)
    h_r, h_z, h_n = np.split(gh, 3)
    r = sigmoid(i_r + h_r)
    z = sigmoid(i_z + h_z)
    n = np.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def bce_np(p, t, clip=1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1 - clip)
    t = np.asarray(t, dtype=np.float64)
    return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())


def brute_force_pit(activities, labels, clip=1e-7):
    """Exhaustive PIT oracle on numpy arrays (pads to square first).

    Returns (min mean BCE over label-column permutations, best mapping)
    where mapping[i] is the padded label column matched to activity column
    i (real activity columns only).
    """
    from itertools import permutations

    acts = np.asarray(activities, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    n_out, n_lab = acts.shape[1], lab.shape[1]
    size = max(n_out, n_lab, 1)
    if n_out < size:
        acts = np.concatenate([acts, np.zeros((acts.shape[0], size - n_out))], axis=1)
    if n_lab < size:
        lab = np.concatenate([lab, np.zeros((lab.shape[0], size - n_lab))], axis=1)
    best_loss, best_perm = None, None
    for perm in permutations(range(size)):
        loss = bce_np(acts, lab[:, list(perm)], clip)
        if best_loss is None or loss < best_loss - 1e-15:
            best_loss, best_perm = loss, perm
    return best_loss, tuple(best_perm[:n_out])


def brute_force_assignments(logp, k):
    """All cannot-link respecting resolved mappings with their scores.

    ``logp`` is (n_attractors, k + 1); existing states 0..k-1 may be used
    once, column k is the new-speaker slot (spawn indices k, k+1, ...).
    Sorted best-first with lexicographic tie-breaking.
    """
    import itertools

    n = logp.shape[0]
    results = []
    for raw in itertools.product(range(k + 1), repeat=n):
        existing = [c for c in raw if c < k]
        if len(set(existing)) != len(existing):
            continue
        mapping, spawned, score = [], 0, 0.0
        for i, c in enumerate(raw):
            if c < k:
                mapping.append(c)
            else:
                mapping.append(k + spawned)
                spawned += 1
            score += logp[i, min(c, k)]
        results.append((score, tuple(mapping)))
    results.sort(key=lambda t: (-t[0], t[1]))
    return results


def overlap_oracle(segments):
    """Independent interval containment oracle over elementary regions."""
    points = sorted({s.onset for s in segments} | {s.offset for s in segments})
    speech = overlapped = 0.0
    for left, right in zip(points[:-1], points[1:]):
        mid = 0.5 * (left + right)
        active = sum(1 for s in segments if s.onset <= mid < s.offset)
        if active >= 1:
            speech += right - left
        if active >= 2:
            overlapped += right - left
    return 100.0 * overlapped / speech if speech else 0.0
