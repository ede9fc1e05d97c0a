"""Independent oracles the production code is checked against.

The EM oracle is a deliberate scalar-loop transcription of the routing
equations (uniform init; M-step mean/variance/cost/activation; E-step
density-weighted reassignment) sharing no code with the vectorized
production path. Floors match the documented production guards.
"""

from __future__ import annotations

import math

import numpy as np


def stable_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def em_oracle(votes: np.ndarray, a_in: np.ndarray, beta_a: np.ndarray,
              beta_u: float, iters: int, lambda0: float = 1.0,
              var_floor: float = 1e-4, den_floor: float = 1e-30):
    """Step-by-step EM routing; returns one dict per iteration with the
    assignment matrix entering the M-step plus mu, sigma2, j, a."""
    n_s, ci, co, d = votes.shape
    r = np.full((n_s, ci, co), 1.0 / co)
    steps = []
    for it in range(1, iters + 1):
        lam = lambda0 * 2.0 ** (it - 1)
        mu = np.zeros((n_s, co, d))
        sigma2 = np.zeros((n_s, co, d))
        j_cost = np.zeros((n_s, co, d))
        a_out = np.zeros((n_s, co))
        w = np.zeros((n_s, ci, co))
        for n in range(n_s):
            for i in range(ci):
                for j in range(co):
                    w[n, i, j] = r[n, i, j] * a_in[n, i]
        for n in range(n_s):
            for j in range(co):
                wsum = 0.0
                for i in range(ci):
                    wsum += w[n, i, j]
                den = max(wsum, den_floor)
                for h in range(d):
                    num = 0.0
                    for i in range(ci):
                        num += w[n, i, j] * votes[n, i, j, h]
                    mu[n, j, h] = num / den
                for h in range(d):
                    num = 0.0
                    for i in range(ci):
                        num += w[n, i, j] * (votes[n, i, j, h] - mu[n, j, h]) ** 2
                    sigma2[n, j, h] = max(num / den, var_floor)
                cost = 0.0
                for h in range(d):
                    j_cost[n, j, h] = (math.log(math.sqrt(sigma2[n, j, h])) + beta_u) * wsum
                    cost += j_cost[n, j, h]
                a_out[n, j] = stable_sigmoid(lam * (beta_a[j] - cost))
        steps.append({"r": r.copy(), "mu": mu, "sigma2": sigma2,
                      "j": j_cost, "a": a_out})
        if it < iters:
            new_r = np.zeros_like(r)
            for n in range(n_s):
                for i in range(ci):
                    logits = []
                    for j in range(co):
                        logp = 0.0
                        for h in range(d):
                            logp += (-0.5 * math.log(2.0 * math.pi * sigma2[n, j, h])
                                     - (votes[n, i, j, h] - mu[n, j, h]) ** 2
                                     / (2.0 * sigma2[n, j, h]))
                        logits.append(math.log(a_out[n, j]) + logp
                                      if a_out[n, j] > 0 else -math.inf)
                    top = max(logits)
                    if not math.isfinite(top):
                        new_r[n, i, :] = 1.0 / co
                        continue
                    exps = [math.exp(v - top) for v in logits]
                    total = sum(exps)
                    for j in range(co):
                        new_r[n, i, j] = exps[j] / total
            r = new_r
    return steps


def conv2d_oracle(x: np.ndarray, kernel: np.ndarray, bias, stride: int,
                  pad: int) -> np.ndarray:
    """Direct quadruple-loop cross-correlation."""
    n_s, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n_s, cout, ho, wo))
    for n in range(n_s):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (xp[n, c, y * stride + i, xx * stride + j]
                                        * kernel[o, c, i, j])
                    out[n, o, y, xx] = acc + (bias[o] if bias is not None else 0.0)
    return out
