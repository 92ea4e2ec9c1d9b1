"""Compiled inner loop for ``tinynet.train``.

Mirrors ``tinynet._forward`` / ``tinynet.backward`` / ``Optimizer.step``
step for step. Random draws (batch indices, dropout uniforms) are made by
the caller so both engines consume one identical stream.
"""

import math

import numpy as np
from numba import njit

SGD, ADAM, ADAGRAD = 0, 1, 2
XENT, MSE = 0, 1


@njit(cache=True)
def run_steps(theta, grad, mov_mean, mov_var, opt_a, opt_b, t0,
              X, y, idx, drop_u, dims, w_off, b_off, g_off, be_off, h_off,
              bn, rate, opt_kind, lr, loss_kind,
              bn_eps, bn_mom, beta1, beta2, adam_eps, ada_eps):
    S, B = idx.shape
    L = dims.shape[0] - 2
    maxw = 1
    for i in range(dims.shape[0]):
        if dims[i] > maxw:
            maxw = dims[i]
    acts = np.zeros((L + 2, B, maxw))
    zhat = np.zeros((max(L, 1), B, maxw))
    gate = np.zeros((max(L, 1), B, maxw))
    inv = np.zeros((max(L, 1), maxw))
    da = np.zeros((B, maxw))
    dz = np.zeros((B, maxw))
    keep = 1.0 / (1.0 - rate) if rate > 0 else 1.0
    loss = 0.0
    for s in range(S):
        for b in range(B):
            r = idx[s, b]
            for k in range(dims[0]):
                acts[0, b, k] = X[r, k]

        # forward
        for i in range(L + 1):
            fi = dims[i]
            fo = dims[i + 1]
            wo = w_off[i]
            bo = b_off[i]
            for b in range(B):
                for j in range(fo):
                    acts[i + 1, b, j] = theta[bo + j]
                for k in range(fi):
                    a = acts[i, b, k]
                    row = wo + k * fo
                    for j in range(fo):
                        acts[i + 1, b, j] += a * theta[row + j]
            if i == L:
                break
            if bn:
                go = g_off[i]
                beo = be_off[i]
                ho = h_off[i]
                for j in range(fo):
                    mu = 0.0
                    for b in range(B):
                        mu += acts[i + 1, b, j]
                    mu /= B
                    var = 0.0
                    for b in range(B):
                        d = acts[i + 1, b, j] - mu
                        var += d * d
                    var /= B
                    iv = 1.0 / math.sqrt(var + bn_eps)
                    inv[i, j] = iv
                    for b in range(B):
                        zh = (acts[i + 1, b, j] - mu) * iv
                        zhat[i, b, j] = zh
                        acts[i + 1, b, j] = zh * theta[go + j] + theta[beo + j]
                    mov_mean[ho + j] = bn_mom * mov_mean[ho + j] + (1.0 - bn_mom) * mu
                    mov_var[ho + j] = bn_mom * mov_var[ho + j] + (1.0 - bn_mom) * var
            ho = h_off[i]
            for b in range(B):
                for j in range(fo):
                    g = 1.0 if acts[i + 1, b, j] > 0 else 0.0
                    if rate > 0:
                        g *= keep if drop_u[s, b, ho + j] >= rate else 0.0
                    gate[i, b, j] = g
                    acts[i + 1, b, j] *= g

        # loss and dLoss/df
        loss = 0.0
        for b in range(B):
            f = acts[L + 1, b, 0]
            if loss_kind == 0:
                m = y[idx[s, b]] * f
                sp_neg = max(-m, 0.0) + math.log1p(math.exp(-abs(m)))
                sp_pos = max(m, 0.0) + math.log1p(math.exp(-abs(m)))
                loss += sp_neg
                da[b, 0] = -y[idx[s, b]] * math.exp(-sp_pos) / B
            else:
                rr = f - y[idx[s, b]]
                loss += rr * rr
                da[b, 0] = 2.0 * rr / B
        loss /= B

        # backward
        for i in range(L, -1, -1):
            fi = dims[i]
            fo = dims[i + 1]
            if i == L:
                for b in range(B):
                    dz[b, 0] = da[b, 0]
            else:
                for b in range(B):
                    for j in range(fo):
                        dz[b, j] = da[b, j] * gate[i, b, j]
                if bn:
                    go = g_off[i]
                    beo = be_off[i]
                    for j in range(fo):
                        sg = 0.0
                        sb = 0.0
                        for b in range(B):
                            sg += dz[b, j] * zhat[i, b, j]
                            sb += dz[b, j]
                        grad[go + j] = sg
                        grad[beo + j] = sb
                        gam = theta[go + j]
                        for b in range(B):
                            dz[b, j] = (dz[b, j] * gam - gam * sb / B
                                        - zhat[i, b, j] * (gam * sg / B)) * inv[i, j]
            wo = w_off[i]
            bo = b_off[i]
            for p in range(wo, wo + fi * fo):
                grad[p] = 0.0
            for b in range(B):
                for k in range(fi):
                    a = acts[i, b, k]
                    row = wo + k * fo
                    for j in range(fo):
                        grad[row + j] += a * dz[b, j]
            for j in range(fo):
                acc = 0.0
                for b in range(B):
                    acc += dz[b, j]
                grad[bo + j] = acc
            if i > 0:
                for b in range(B):
                    for k in range(fi):
                        acc = 0.0
                        for j in range(fo):
                            acc += dz[b, j] * theta[wo + k * fo + j]
                        da[b, k] = acc

        # optimizer
        t = t0 + s + 1
        P = theta.shape[0]
        if opt_kind == SGD:
            for p in range(P):
                theta[p] -= lr * grad[p]
        elif opt_kind == ADAM:
            c1 = 1.0 - beta1 ** t
            c2 = 1.0 - beta2 ** t
            for p in range(P):
                gp = grad[p]
                opt_a[p] = beta1 * opt_a[p] + (1.0 - beta1) * gp
                opt_b[p] = beta2 * opt_b[p] + (1.0 - beta2) * gp * gp
                theta[p] -= lr * (opt_a[p] / c1) / (math.sqrt(opt_b[p] / c2) + adam_eps)
        else:
            for p in range(P):
                gp = grad[p]
                opt_a[p] += gp * gp
                theta[p] -= lr * gp / (math.sqrt(opt_a[p]) + ada_eps)
    return loss
