"""Explicit pixel-loop reference implementations, independent of the vectorized code."""
import math


def confusion(pred, gt):
    tp = fp = fn = tn = 0
    h, w = len(gt), len(gt[0])
    for i in range(h):
        for j in range(w):
            p, g = bool(pred[i][j]), bool(gt[i][j])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def dice_loop(pred, gt):
    tp, fp, fn, _ = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou_loop(pred, gt):
    tp, fp, fn, _ = confusion(pred, gt)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def accuracy_loop(pred, gt):
    tp, fp, fn, tn = confusion(pred, gt)
    return (tp + tn) / (tp + fp + fn + tn)


def sensitivity_loop(pred, gt):
    tp, _, fn, _ = confusion(pred, gt)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def boundaries_loop(mask):
    h, w = len(mask), len(mask[0])
    upper, lower = [], []
    for j in range(w):
        rows = [i for i in range(h) if mask[i][j]]
        upper.append(rows[0] if rows else None)
        lower.append(rows[-1] if rows else None)
    return upper, lower


def ausde_loop(a, b, height):
    total, n = 0.0, 0
    for x, y in zip(a, b):
        if x is None and y is None:
            continue
        if x is None or y is None:
            total += height
        else:
            total += abs(x - y)
        n += 1
    return math.nan if n == 0 else total / n


def thickness_loop(mask):
    counts = []
    for j in range(len(mask[0])):
        c = sum(1 for i in range(len(mask)) if mask[i][j])
        if c:
            counts.append(c)
    return 0.0 if not counts else sum(counts) / len(counts)


def choroid_ausde_loop(pred, gt):
    h = len(gt)
    pu, pl = boundaries_loop(pred)
    gu, gl = boundaries_loop(gt)
    up, lo = ausde_loop(pu, gu, h), ausde_loop(pl, gl, h)
    return up, lo, (up + lo) / 2
