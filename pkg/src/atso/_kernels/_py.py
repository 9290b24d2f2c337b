"""Pure-numpy fallback for the compiled kernel core.

Same call signatures and semantics as ``atso._kernels._core``. Integer-valued
kernels (confusion counts, majority vote) are bit-identical to the compiled
backend; floating-point kernels may differ from it in the last ulp because
BLAS accumulates in a different order than the sequential C loops.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def forward_linear(X, W, b):
    """Softmax probabilities of a linear head. X: (N,F), W: (F,K), b: (K)."""
    Z = X @ W + b
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return P


def forward_mlp(X, W1, b1, W2, b2):
    """Softmax probabilities of a one-hidden-layer tanh head."""
    A = np.tanh(X @ W1 + b1)
    Z = A @ W2 + b2
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return P


def _group_loss_grad(P, y, reduced, group):
    """Cross-entropy on (optionally) group-summed probabilities.

    For rows flagged ``reduced``, the target ``y`` lives in the coarse class
    space and the predicted mass of target group g is sum of P over source
    classes mapped to g. Returns (sum of -log mass, dZ) where dZ is the
    gradient w.r.t. logits, NOT yet divided by the batch size.
    """
    n, k = P.shape
    member = np.zeros((n, k), dtype=np.float64)
    rows = np.arange(n)
    is_red = reduced.astype(bool)
    if is_red.any():
        member[is_red] = group[np.newaxis, :] == y[is_red, np.newaxis]
    full = ~is_red
    member[rows[full], y[full]] = 1.0
    mass = (P * member).sum(axis=1)
    loss = -np.log(mass).sum()
    dZ = P - P * member / mass[:, np.newaxis]
    return loss, dZ


def sgd_epoch_linear(X, y, reduced, group, W, b, perm, batch_size, lr, l2):
    """One epoch of mini-batch SGD on the linear head; updates W, b in place.

    Returns the mean per-row cross-entropy observed before each update.
    """
    n = X.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        Xb = X[idx]
        Pb = forward_linear(Xb, W, b)
        loss, dZ = _group_loss_grad(Pb, y[idx], reduced[idx], group)
        total += loss
        m = float(len(idx))
        dZ /= m
        W -= lr * (Xb.T @ dZ + l2 * W)
        b -= lr * dZ.sum(axis=0)
    return total / n


def sgd_epoch_mlp(X, y, reduced, group, W1, b1, W2, b2, perm, batch_size, lr, l2):
    """One epoch of mini-batch SGD on the tanh-MLP head; in-place update."""
    n = X.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        Xb = X[idx]
        A = np.tanh(Xb @ W1 + b1)
        Z = A @ W2 + b2
        Z -= Z.max(axis=1, keepdims=True)
        Pb = np.exp(Z)
        Pb /= Pb.sum(axis=1, keepdims=True)
        loss, dZ = _group_loss_grad(Pb, y[idx], reduced[idx], group)
        total += loss
        m = float(len(idx))
        dZ /= m
        dA = dZ @ W2.T
        dZ1 = dA * (1.0 - A * A)
        W2 -= lr * (A.T @ dZ + l2 * W2)
        b2 -= lr * dZ.sum(axis=0)
        W1 -= lr * (Xb.T @ dZ1 + l2 * W1)
        b1 -= lr * dZ1.sum(axis=0)
    return total / n


def box_stats(img, radius):
    """Clipped-window box mean and mean-of-squares of a 2D image.

    Windows are (2r+1)x(2r+1), clipped at the borders and normalised by the
    actual pixel count, so edge statistics stay unbiased.
    """
    h, w = img.shape
    out_mean = np.empty((h, w))
    out_sq = np.empty((h, w))
    sat = np.zeros((h + 1, w + 1))
    sat2 = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    sat2[1:, 1:] = np.cumsum(np.cumsum(img * img, axis=0), axis=1)

    ii = np.arange(h)
    jj = np.arange(w)
    r0 = np.maximum(ii - radius, 0)
    r1 = np.minimum(ii + radius, h - 1) + 1
    c0 = np.maximum(jj - radius, 0)
    c1 = np.minimum(jj + radius, w - 1) + 1
    cnt = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    for s, out in ((sat, out_mean), (sat2, out_sq)):
        win = s[r1][:, c1] - s[r0][:, c1] - s[r1][:, c0] + s[r0][:, c0]
        out[:] = win / cnt
    return out_mean, out_sq


def confusion_counts(pred, truth, num_classes):
    """K x K confusion counts; rows are truth classes, columns predictions."""
    k = num_classes
    idx = truth.astype(np.int64) * k + pred.astype(np.int64)
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def majority_vote(votes, num_classes):
    """Per-pixel modal class over the vote stack (V, N); ties -> lowest class."""
    v, n = votes.shape
    counts = np.zeros((num_classes, n), dtype=np.int64)
    for i in range(v):
        np.add.at(counts, (votes[i], np.arange(n)), 1)
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return counts.argmax(axis=0).astype(np.int32)
