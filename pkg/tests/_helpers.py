"""Shared oracles for the test suite."""

from __future__ import annotations

import math

import cv2
import numpy as np
import torch

from dermfoundry.pretrain import ArchConfig, PretrainModel, RandomFrozenTeacher, alignment_loss, generate_block_mask
from dermfoundry.pretrain.train import split_targets, teacher_targets
from dermfoundry.synth import euclidean_warp


def fixture_problem(seed: int = 0, batch: int = 2, w_visible: float = 1.0):
    """float64 fixture model, teacher targets and a fixed mask; returns (model, loss_fn)."""
    torch.manual_seed(seed)
    arch = ArchConfig.fixture()
    model = PretrainModel(arch).double().eval()
    teacher = RandomFrozenTeacher(arch).double()
    images = torch.rand(batch, 3, arch.image_side, arch.image_side, dtype=torch.float64)
    mask = generate_block_mask(arch.grid_spec, 38, np.random.default_rng(seed))
    t_vis, t_msk = split_targets(teacher_targets(teacher, images, arch.grid_spec), mask)

    def loss_fn():
        p_vis, p_msk = model(images, mask.masked)
        return alignment_loss(p_msk, t_msk) + w_visible * alignment_loss(p_vis, t_vis)

    return model, loss_fn


def gradient_check(n_scalars: int = 20, seed: int = 0, eps: float = 1e-6):
    """Analytic vs central-difference gradients on randomly chosen scalars; returns relative errors."""
    model, loss_fn = fixture_problem(seed)
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in params])
    picks = rng.choice(sizes.sum(), size=n_scalars, replace=False)
    bounds = np.cumsum(sizes)
    out = []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(bounds, flat, side="right"))
            idx = int(flat - (bounds[k - 1] if k else 0))
            name, p = params[k]
            view = p.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            orig = float(view[idx])
            view[idx] = orig + eps
            up = float(loss_fn())
            view[idx] = orig - eps
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-12)
            out.append((name, idx, analytic, numeric, abs(analytic - numeric) / denom))
    return out


def metric_files(run_dir):
    """{relative path: bytes} for every CSV/JSON under a run's outputs (checkpoints excluded)."""
    out = {}
    root = run_dir / "outputs"
    for p in sorted(root.rglob("*")):
        if p.suffix in (".csv", ".json") and "checkpoint" not in p.parts:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def _quartile(sorted_vals, q):
    # linear interpolation between order statistics, written out by hand
    pos = (len(sorted_vals) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])


def brute_tukey(features, lesion_ids, patient_ids, k=1.5, min_lesions=4):
    """Reference ugly-duckling flags using plain loops; returns a set of lesion ids."""
    groups = {}
    for f, lid, pid in zip(features, lesion_ids, patient_ids):
        groups.setdefault(pid, []).append((lid, [float(v) for v in f]))
    flagged = set()
    for members in groups.values():
        if len(members) < min_lesions:
            continue
        dim = len(members[0][1])
        mean = [sum(m[1][j] for m in members) / len(members) for j in range(dim)]
        dist = [(lid, sum((v - mu) ** 2 for v, mu in zip(vec, mean)) ** 0.5) for lid, vec in members]
        s = sorted(d for _, d in dist)
        q1, q3 = _quartile(s, 0.25), _quartile(s, 0.75)
        fence = q3 + k * (q3 - q1)
        flagged.update(lid for lid, d in dist if d > fence)
    return flagged


def brute_partial_loglik(beta, x, time, event):
    """Breslow partial log-likelihood for one covariate, summed with plain loops."""
    import math

    ll = 0.0
    for i in range(len(time)):
        if not event[i]:
            continue
        risk = sum(math.exp(beta * x[j]) for j in range(len(time)) if time[j] >= time[i])
        ll += beta * x[i] - math.log(risk)
    return ll


def grid_argmax(fn, lo=-6.0, hi=6.0, step=1e-2, refine=(1e-4, 1e-6)):
    """Maximize a 1-D function on a grid, then on finer grids around the best point."""
    grid = np.arange(lo, hi + step / 2, step)
    best = grid[int(np.argmax([fn(b) for b in grid]))]
    width = step
    for s in refine:
        grid = np.arange(best - width, best + width + s / 2, s)
        best = grid[int(np.argmax([fn(b) for b in grid]))]
        width = s * 10
    return float(best)


def brute_tauc(time, score, horizon):
    """Uncensored cumulative/dynamic AUC by counting every (case, control) pair."""
    num = den = 0.0
    for i in range(len(time)):
        if time[i] > horizon:
            continue
        for j in range(len(time)):
            if time[j] <= horizon:
                continue
            den += 1
            num += 1.0 if score[i] > score[j] else 0.5 if score[i] == score[j] else 0.0
    return num / den


def exhaustive_bootstrap_bounds(values, level=0.95):
    """Percentile bounds from every one of the n**n equally likely resamples of the mean."""
    import itertools

    means = sorted(sum(c) / len(values) for c in itertools.product(values, repeat=len(values)))
    m = len(means)
    alpha = (1 - level) / 2

    def inv_cdf(q):
        # smallest value whose cumulative mass reaches q
        for k, v in enumerate(means):
            if (k + 1) / m >= q - 1e-15:
                return v
        return means[-1]

    return inv_cdf(alpha), inv_cdf(1 - alpha)


def exhaustive_permutation_p(a, b):
    """Two-sided paired-swap p over all 2**n swap patterns, mean-difference statistic."""
    import itertools

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    obs = abs(a.mean() - b.mean())
    hits = 0
    total = 0
    for pattern in itertools.product((False, True), repeat=len(a)):
        s = np.array(pattern)
        stat = abs(np.where(s, b, a).mean() - np.where(s, a, b).mean())
        hits += stat >= obs - 1e-12 * max(1.0, obs)
        total += 1
    return hits / total


def warp_error(reg, M, side):
    """Centre-point displacement error (px) and angle error (deg) of an estimated transform vs a cv2 matrix."""
    est = reg.transform.matrix
    c = np.array([side / 2 - 0.5, side / 2 - 0.5, 1.0])
    truth = np.vstack([M, [0, 0, 1]])
    shift_err = np.abs((est @ c)[:2] - (truth @ c)[:2]).max()
    ang_err = abs(math.degrees(math.atan2(est[1, 0], est[0, 0]) - math.atan2(M[1, 0], M[0, 0])))
    return shift_err, ang_err


def known_motion(img, angle, shift):
    """Rotate about the centre by ``angle`` degrees then shift; returns (moved image, cv2 2x3 truth)."""
    side = img.shape[0]
    M = cv2.getRotationMatrix2D((side / 2 - 0.5, side / 2 - 0.5), angle, 1.0)
    M[:, 2] += shift
    return euclidean_warp(img, angle, shift), M
