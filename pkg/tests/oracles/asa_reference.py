"""Straight-line slot attention for one sample, written with explicit loops.

Shares nothing with ``dgw.numcore``: plain numpy scalars/vectors only.
"""

import math

import numpy as np


def _layer_norm(v, eps=1e-5):
    m = sum(v) / len(v)
    var = sum((a - m) ** 2 for a in v) / len(v)
    return [(a - m) / math.sqrt(var + eps) for a in v]


def _vecmat(v, w):
    rows, cols = w.shape
    return [sum(v[r] * w[r, c] for r in range(rows)) for c in range(cols)]


def _sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


def asa_reference(E, noise, p):
    """E: (L, d) normalized tokens; noise: (C, d) standard normals; p: dict of arrays.

    Keys: mu, log_std, q, k, v, w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h, iters.
    Returns (slots (C, d), attention (C, L)).
    """
    L, d = E.shape
    C = noise.shape[0]
    S = [[p["mu"][c, j] + math.exp(p["log_std"][c, j]) * noise[c, j] for j in range(d)] for c in range(C)]
    keys = [_vecmat(E[l], p["k"]) for l in range(L)]
    vals = [_vecmat(E[l], p["v"]) for l in range(L)]
    A = None
    for _ in range(p["iters"]):
        S = [_layer_norm(s) for s in S]
        qs = [_vecmat(s, p["q"]) for s in S]
        logits = [[sum(qs[c][j] * keys[l][j] for j in range(d)) / math.sqrt(d) for l in range(L)]
                  for c in range(C)]
        A = [[0.0] * L for _ in range(C)]
        for l in range(L):  # softmax over slots, one column at a time
            col = [logits[c][l] for c in range(C)]
            m = max(col)
            ex = [math.exp(a - m) for a in col]
            tot = sum(ex)
            for c in range(C):
                A[c][l] = ex[c] / tot
        for c in range(C):  # renormalize each slot's row over tokens
            tot = sum(A[c])
            A[c] = [a / tot for a in A[c]]
        U = [[sum(A[c][l] * vals[l][j] for l in range(L)) for j in range(d)] for c in range(C)]
        new_S = []
        for c in range(C):
            h, u = S[c], U[c]
            uz, hz = _vecmat(u, p["w_z"]), _vecmat(h, p["u_z"])
            ur, hr = _vecmat(u, p["w_r"]), _vecmat(h, p["u_r"])
            z = [_sigmoid(uz[j] + hz[j] + p["b_z"][j]) for j in range(d)]
            r = [_sigmoid(ur[j] + hr[j] + p["b_r"][j]) for j in range(d)]
            uh = _vecmat(u, p["w_h"])
            hh = _vecmat([r[j] * h[j] for j in range(d)], p["u_h"])
            cand = [math.tanh(uh[j] + hh[j] + p["b_h"][j]) for j in range(d)]
            new_S.append([(1 - z[j]) * h[j] + z[j] * cand[j] for j in range(d)])
        S = new_S
    return np.array(S), np.array(A)


def branch_params(model, br):
    pre = f"dgw_{br}"
    P = lambda n: model.params[f"{pre}.{n}"].data
    out = {"mu": P("slots_mu"), "log_std": P("slots_log_std"), "q": P("asa.q.w"), "k": P("asa.k.w"),
           "v": P("asa.v.w"), "iters": model.dims.iters}
    for g in "zrh":
        out[f"w_{g}"], out[f"u_{g}"], out[f"b_{g}"] = P(f"gru.w_{g}"), P(f"gru.u_{g}"), P(f"gru.b_{g}")
    return out
