"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or closed forms and shares no
code with the package beyond reading public attributes.
"""

from __future__ import annotations

import math

import numpy as np

OP_NAMES = ("SEP3", "SEP5", "MAXPOOL3", "MINPOOL3", "IDENTITY", "CONV1")


def numeric_grad(f, arrays, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every array in ``arrays`` (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def naive_conv2d(x, w, stride=1):
    """Same-padded (k//2 each side) correlation with explicit loops."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


def naive_depthwise(x, w, stride=1):
    n, c, h, wd = x.shape
    out = np.zeros((n, c, math.ceil(h / stride), math.ceil(wd / stride)))
    for ch in range(c):
        out[:, ch:ch + 1] = naive_conv2d(x[:, ch:ch + 1], w[ch:ch + 1], stride)
    return out


def naive_pool(x, stride, kind):
    n, c, h, wd = x.shape
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            vals = []
            for u in range(-1, 2):
                for v in range(-1, 2):
                    y, z = i * stride + u, j * stride + v
                    if 0 <= y < h and 0 <= z < wd:
                        vals.append(x[:, :, y, z])
            vals = np.stack(vals)
            out[:, :, i, j] = {"max": vals.max(0), "min": vals.min(0), "avg": vals.mean(0)}[kind]
    return out


def shuffle_by_loops(channels, groups=2):
    """Output order of channel indices after a group shuffle, built element by element."""
    per = channels // groups
    out = []
    for j in range(per):
        for gi in range(groups):
            out.append(gi * per + j)
    return out


def loose_ends_by_refcount(pairs):
    """1-based indices of blocks no later block consumes."""
    refs = [0] * (len(pairs) + 1)
    for idx, _ in pairs:
        refs[idx] += 1
    return {b for b in range(1, len(pairs) + 1) if refs[b] == 0}


def cosine_closed_form(epoch, T0=10, mult=2, lr_max=0.05, lr_min=5e-4):
    start, T = 0.0, T0
    while epoch >= start + T:
        start += T
        T *= mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * (epoch - start) / T))


# -- closed-form parameter counts -------------------------------------------


def sep_params(C, k):
    return 2 * (k * k * C + C * C + 2 * C)


def conv1_params(C):
    return C * C + 2 * C


def factorized_params(c_in, c_out):
    return c_in * c_out + 2 * c_out


def _op_params(name, C, stride2):
    if name == "SEP3":
        return sep_params(C, 3)
    if name == "SEP5":
        return sep_params(C, 5)
    if name == "CONV1":
        return conv1_params(C)
    if name == "IDENTITY" and stride2:
        return factorized_params(C, C)
    return 0


def _cell_params(cell, C, reduction, merge_mode, cell_bn):
    """``cell``: list of (input_index, op_name)."""
    total = sum(_op_params(name, C, reduction and idx == 0) for idx, name in cell)
    n_loose = len(loose_ends_by_refcount(cell))
    if merge_mode == "concat_1x1":
        total += n_loose * C * C + 2 * C
    elif cell_bn:
        total += 2 * C
    return total


def final_model_params(normal, reduction, B, N, f, classes=10, merge_mode="sum", cell_bn=False,
                       bypass="factorized"):
    """Parameter count of a standalone model from the macro layout formulas."""
    total = 3 * 3 * 3 * f + 2 * f  # stem conv + BN
    C = f
    for stage in range(3):
        for _ in range(N):
            total += _cell_params(normal, C // 2, False, merge_mode, cell_bn)
        if stage < 2:
            total += _cell_params(reduction, C, True, merge_mode, cell_bn)
            if bypass == "factorized":
                total += factorized_params(C, C)
            elif bypass == "sep3x3":
                total += sep_params(C, 3)
            else:
                total += _cell_params(reduction, C, True, merge_mode, cell_bn)
            C *= 2
    return total + C * classes + classes


def supernet_params(B, N, f, classes=10, merge_mode="sum", cell_bn=False):
    """Every op at every position; identity reductions allocated at every reduction position."""
    total = 3 * 3 * 3 * f + 2 * f
    C = f
    for stage in range(3):
        layers = [(C // 2, False)] * N + ([(C, True)] if stage < 2 else [])
        for width, red in layers:
            per_pos = sep_params(width, 3) + sep_params(width, 5) + conv1_params(width)
            if red:
                per_pos += factorized_params(width, width)
            total += B * per_pos
            if merge_mode == "concat_1x1":
                total += B * width * width + 2 * width
            elif cell_bn:
                total += 2 * width
            if red:
                total += factorized_params(width, width)
        if stage < 2:
            C *= 2
    return total + C * classes + classes


# -- CIFAR records ----------------------------------------------------------


def cifar_record(label, image_hwc):
    """Serialize one record: label byte then R, G, B planes row-major."""
    planes = [image_hwc[:, :, ch].reshape(-1) for ch in range(3)]
    return bytes([label]) + b"".join(p.astype(np.uint8).tobytes() for p in planes)
