"""Fused inner-loop kernels for the LSTM and GRU batch passes.

The recurrent steps are short chains of elementwise work between small
GEMMs; numpy pays one memory pass per operator, which dominates training
time for nets this small. These numba kernels fuse each step's
elementwise chain into a single pass (hidden-state GEMMs still go
through BLAS via np.dot). They fill exactly the same scratch arrays as
the pure-numpy fallback in models.py, so everything downstream (weight-
gradient GEMMs, kink margins) is path-agnostic. No fastmath: results are
IEEE-strict and reproducible.

Import is optional; models.py falls back to numpy when numba is absent.
"""
from __future__ import annotations

import math

try:
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    AVAILABLE = False

    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn

        return wrap

import numpy as np


@njit(cache=True)
def lstm_fwd(XWb, w_h_t, Hs, G, CPre, Cs, PhiC, h, tanh_cell):
    """Sequential LSTM forward; gate layout f|i|o|c.

    XWb: [W,B,4U] input-side pre-activations (x-part plus bias).
    w_h_t: [U,4U] hidden-side weights, transposed, contiguous.
    Fills Hs, G (post-activation gates), CPre, Cs, PhiC; h is the running
    hidden state, [B,U], zeroed by the caller.
    """
    W, B, U4 = XWb.shape
    U = w_h_t.shape[0]
    U3 = 3 * U
    Cs[0] = 0.0
    for s in range(W):
        Hs[s] = h
        z = np.dot(h, w_h_t)
        for b in range(B):
            for j in range(U3):
                G[s, b, j] = 1.0 / (1.0 + math.exp(-(z[b, j] + XWb[s, b, j])))
            for u in range(U):
                pre = z[b, U3 + u] + XWb[s, b, U3 + u]
                CPre[s, b, u] = pre
                if tanh_cell:
                    G[s, b, U3 + u] = math.tanh(pre)
                else:
                    G[s, b, U3 + u] = pre if pre > 0.0 else 0.0
            for u in range(U):
                f = G[s, b, u]
                i = G[s, b, U + u]
                o = G[s, b, 2 * U + u]
                ct = G[s, b, U3 + u]
                c = f * Cs[s, b, u] + i * ct
                Cs[s + 1, b, u] = c
                if tanh_cell:
                    pc = math.tanh(c)
                else:
                    pc = c if c > 0.0 else 0.0
                PhiC[s, b, u] = pc
                h[b, u] = o * pc


@njit(cache=True)
def lstm_bwd(G, CPre, Cs, PhiC, d_h, w_h_part, dZ, tanh_cell):
    """Backward through the LSTM steps; d_h arrives as dLoss/dh_final and
    leaves as dLoss/dh_0. Fills dZ (pre-activation gate gradients)."""
    W, B, U4 = G.shape
    U = w_h_part.shape[1]
    U3 = 3 * U
    dc = np.zeros((B, U))
    for s in range(W - 1, -1, -1):
        for b in range(B):
            for u in range(U):
                f = G[s, b, u]
                i = G[s, b, U + u]
                o = G[s, b, 2 * U + u]
                ct = G[s, b, U3 + u]
                pc = PhiC[s, b, u]
                dhv = d_h[b, u]
                dZ[s, b, 2 * U + u] = dhv * pc * o * (1.0 - o)
                if tanh_cell:
                    dcv = dc[b, u] + dhv * o * (1.0 - pc * pc)
                else:
                    dcv = dc[b, u] + (dhv * o if Cs[s + 1, b, u] > 0.0 else 0.0)
                dZ[s, b, u] = dcv * Cs[s, b, u] * f * (1.0 - f)
                dZ[s, b, U + u] = dcv * ct * i * (1.0 - i)
                if tanh_cell:
                    dZ[s, b, U3 + u] = dcv * i * (1.0 - ct * ct)
                else:
                    dZ[s, b, U3 + u] = dcv * i if CPre[s, b, u] > 0.0 else 0.0
                dc[b, u] = dcv * f
        d_h[:] = np.dot(dZ[s], w_h_part)


@njit(cache=True)
def gru_fwd(XWbzr, XWbc, wzr_h_t, wh_h_t, Hs, ZR, RH, CPre, HT, ZPre, h,
            tanh_cell, relu_z):
    """Sequential GRU forward; gate layout z|r.

    XWbzr: [W,B,2U], XWbc: [W,B,U] input-side pre-activations (plus bias).
    Fills Hs, ZR (post-activation gates), RH (r*h_prev), CPre, HT; ZPre is
    filled only in strict mode (ReLU update gate).
    """
    W, B, U2 = XWbzr.shape
    U = wh_h_t.shape[0]
    for s in range(W):
        Hs[s] = h
        zl = np.dot(h, wzr_h_t)
        for b in range(B):
            for u in range(U):
                zv = zl[b, u] + XWbzr[s, b, u]
                if relu_z:
                    ZPre[s, b, u] = zv
                    ZR[s, b, u] = zv if zv > 0.0 else 0.0
                else:
                    ZR[s, b, u] = 1.0 / (1.0 + math.exp(-zv))
            for u in range(U):
                rv = zl[b, U + u] + XWbzr[s, b, U + u]
                r = 1.0 / (1.0 + math.exp(-rv))
                ZR[s, b, U + u] = r
                RH[s, b, u] = r * h[b, u]
        al = np.dot(RH[s], wh_h_t)
        for b in range(B):
            for u in range(U):
                pre = al[b, u] + XWbc[s, b, u]
                CPre[s, b, u] = pre
                if tanh_cell:
                    ht = math.tanh(pre)
                else:
                    ht = pre if pre > 0.0 else 0.0
                HT[s, b, u] = ht
                h[b, u] = h[b, u] + ZR[s, b, u] * (ht - h[b, u])


@njit(cache=True)
def gru_bwd(ZR, RH, HT, Hs, CPre, ZPre, d_h, wzr_h_part, wh_h_part,
            dZR, dAC, tanh_cell, relu_z):
    """Backward through the GRU steps; d_h arrives as dLoss/dh_final and
    leaves as dLoss/dh_0. Fills dZR and dAC (pre-activation gradients)."""
    W, B, U2 = ZR.shape
    U = wh_h_part.shape[0]
    dhn = np.empty((B, U))
    for s in range(W - 1, -1, -1):
        for b in range(B):
            for u in range(U):
                z = ZR[s, b, u]
                ht = HT[s, b, u]
                hp = Hs[s, b, u]
                dhv = d_h[b, u]
                dz = dhv * (ht - hp)
                if relu_z:
                    dZR[s, b, u] = dz if ZPre[s, b, u] > 0.0 else 0.0
                else:
                    dZR[s, b, u] = dz * z * (1.0 - z)
                dht = dhv * z
                if tanh_cell:
                    dAC[s, b, u] = dht * (1.0 - ht * ht)
                else:
                    dAC[s, b, u] = dht if CPre[s, b, u] > 0.0 else 0.0
                dhn[b, u] = dhv * (1.0 - z)
        dvh = np.dot(dAC[s], wh_h_part)
        for b in range(B):
            for u in range(U):
                r = ZR[s, b, U + u]
                dr = dvh[b, u] * Hs[s, b, u]
                dZR[s, b, U + u] = dr * r * (1.0 - r)
                dhn[b, u] += dvh[b, u] * r
        dg = np.dot(dZR[s], wzr_h_part)
        for b in range(B):
            for u in range(U):
                d_h[b, u] = dhn[b, u] + dg[b, u]
