"""Fused forward/backward kernels for the velocity MLP.

All parameters live in one flat float64 vector ``theta``. The layout is
described by integer tables so the same kernel serves any depth/width:

``layers[l] = (offW, offb, offg, offbeta, n_in, n_out)``  (``offg = -1`` without LayerNorm)
``head = (offW, offb, n_in, n_out)``
``gain_off`` is the offset of the per-channel input gain, or -1.

Weights are stored row-major ``(n_in, n_out)``. The input feature vector is
``[emb(z_0) .. emb(z_{d-1}), emb(y), emb(t)]``; the class embedding rows are
precomputed by the caller (``yemb``) because labels take few values.

Each kernel exists twice: a numba version (BLAS for the matmuls, explicit
loops elsewhere) and a vectorised numpy version. Both are deterministic; they
agree to rounding, not bit-for-bit.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from ._accel import HAVE_NUMBA, USE_NUMBA, njit

# reassociation lets LLVM vectorise the reductions; no approximate math functions
_FM = {"nsz", "arcp", "contract", "reassoc"}
_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10

_RSQRT2 = 1.0 / math.sqrt(2.0)
_RSQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_BLOCK = 2048


# --------------------------------------------------------------------------- numba


@njit(fastmath=_FM)
def _nb_gelu(a_, h_, dg_, bits):
    """Exact GELU ``a * Phi(a)`` and its derivative, written to be SIMD friendly.

    ``exp(-a^2/2)`` uses Cody-Waite reduction plus a degree-12 Taylor kernel
    (error < 2 ulp) and is shared between ``Phi`` and ``phi``. ``Phi`` uses the
    Cephes erf/erfc rational approximations, the same ones scipy ships. Every
    branch is evaluated and then selected so the loop has no control flow.
    """
    n = a_.shape[0]
    for i in range(n):
        a = a_[i]
        w = max(-0.5 * a * a, -700.0)
        kf = math.floor(w * _LOG2E + 0.5)
        r = (w - kf * _LN2_HI) - kf * _LN2_LO
        p = 1.0 / 479001600.0
        p = p * r + 1.0 / 39916800.0
        p = p * r + 1.0 / 3628800.0
        p = p * r + 1.0 / 362880.0
        p = p * r + 1.0 / 40320.0
        p = p * r + 1.0 / 5040.0
        p = p * r + 1.0 / 720.0
        p = p * r + 1.0 / 120.0
        p = p * r + 1.0 / 24.0
        p = p * r + 1.0 / 6.0
        p = p * r + 0.5
        p = p * r + 1.0
        p = p * r + 1.0
        dg_[i] = p
        bits[i] = (np.int64(kf) + 1023) << 52
    scale = bits.view(np.float64)
    for i in range(n):
        a = a_[i]
        e = dg_[i] * scale[i]
        x = a * _RSQRT2
        ax = abs(x)
        z = x * x
        num = (((9.60497373987051638749E0 * z + 9.00260197203842689217E1) * z
                + 2.23200534594684319226E3) * z + 7.00332514112805075473E3) * z + 5.55923013010394962768E4
        den = ((((z + 3.35617141647503099647E1) * z + 5.21357949780152679795E2) * z
                + 4.59432382970980127987E3) * z + 2.26290000613890934246E4) * z + 4.92673942608635921086E4
        c_small = 0.5 + 0.5 * x * num / den
        pn = (((((((2.46196981473530512524E-10 * ax + 5.64189564831068821977E-1) * ax
                   + 7.46321056442269912687E0) * ax + 4.86371970985681366614E1) * ax
                 + 1.96520832956077098242E2) * ax + 5.26445194995477358631E2) * ax
               + 9.34528527171957607540E2) * ax + 1.02755188689515710272E3) * ax + 5.57535335369399327526E2
        pd = (((((((ax + 1.32281951154744992508E1) * ax + 8.67072140885989742329E1) * ax
                  + 3.54937778887819891062E2) * ax + 9.75708501743205489753E2) * ax
                + 1.82390916687909736289E3) * ax + 2.24633760818710981792E3) * ax
              + 1.65666309194161350182E3) * ax + 5.57535340817727675546E2
        rn = ((((5.64189583547755073984E-1 * ax + 1.27536670759978104416E0) * ax
                + 5.01905042251180477414E0) * ax + 6.16021097993053585195E0) * ax
              + 7.40974269950448939160E0) * ax + 2.97886665372100240670E0
        rd = (((((ax + 2.26052863220117276590E0) * ax + 9.39603524938001434673E0) * ax
                + 1.20489539808096656605E1) * ax + 1.70814450747565897222E1) * ax
              + 9.60896809063285878198E0) * ax + 3.36907645100081516050E0
        y = e * (pn / pd if ax < 8.0 else rn / rd)
        c_big = 1.0 - 0.5 * y if x > 0.0 else 0.5 * y
        cdf = c_small if ax < 1.0 else c_big
        h_[i] = a * cdf
        dg_[i] = cdf + a * _RSQRT2PI * e


@njit(fastmath=_FM)
def _nb_embed(z, t, yemb, freqs, E0, DZ):
    n, d = z.shape
    emb = yemb.shape[1]
    half = freqs.shape[0]
    for i in range(n):
        for j in range(d):
            base = j * emb
            x = z[i, j]
            for k in range(half):
                w = freqs[k]
                s = math.sin(x * w)
                c = math.cos(x * w)
                E0[i, base + k] = s
                E0[i, base + half + k] = c
                DZ[i, base + k] = w * c
                DZ[i, base + half + k] = -w * s
        base = d * emb
        for k in range(emb):
            E0[i, base + k] = yemb[i, k]
        base = (d + 1) * emb
        x = t[i]
        for k in range(half):
            E0[i, base + k] = math.sin(x * freqs[k])
            E0[i, base + half + k] = math.cos(x * freqs[k])


@njit(fastmath=_FM)
def _nb_mat(buf, off, rows, cols):
    return buf[off:off + rows * cols].reshape((rows, cols))


@njit(fastmath=_FM)
def nb_workspace(n, layers, d, emb):
    """Scratch buffers for a batch of ``n`` rows.

    Fresh multi-megabyte allocations page-fault on every touch, which costs
    more than the arithmetic here, so callers keep one workspace per batch size.
    """
    in_w = emb * (d + 2)
    n_layers = layers.shape[0]
    offs = np.zeros(n_layers + 2, dtype=np.int64)
    offs[1] = n * in_w
    wmax = in_w
    for l in range(n_layers):
        offs[l + 2] = offs[l + 1] + n * layers[l, 5]
        wmax = max(wmax, layers[l, 5])
    hid = offs[n_layers + 1] - offs[1]
    return (np.empty((n, in_w)), np.empty((n, d * emb)), np.empty(offs[n_layers + 1]),
            np.empty(hid), np.empty(hid), np.empty(hid), np.empty(n * wmax, dtype=np.int64),
            np.empty((n_layers, n)), offs)


@njit(fastmath=_FM)
def _nb_forward(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps, ws):
    """Forward pass over the whole batch, layer by layer, inside workspace ``ws``.

    Afterwards ``ws`` holds everything the backward pass needs: embeddings and
    their z-derivatives, every layer input, normalised pre-activations, GELU
    derivatives and inverse standard deviations.
    """
    n, d = z.shape
    emb = yemb.shape[1]
    in_w = emb * (d + 2)
    n_layers = layers.shape[0]
    E0, DZ, Hbuf, Abuf, NHbuf, DGbuf, bits, INV, offs = ws
    _nb_embed(z, t, yemb, freqs, E0, DZ)
    H0 = _nb_mat(Hbuf, 0, n, in_w)
    for i in range(n):
        for c in range(in_w):
            H0[i, c] = E0[i, c] * theta[gain_off + c] if gain_off >= 0 else E0[i, c]
    for l in range(n_layers):
        o_w, o_b, o_g, o_bt, nin, nout = layers[l]
        Hin = _nb_mat(Hbuf, offs[l], n, nin)
        W = _nb_mat(theta, o_w, nin, nout)
        A = _nb_mat(Abuf, offs[l + 1] - offs[1], n, nout)
        np.dot(Hin, W, A)
        bias = theta[o_b:o_b + nout]
        if o_g < 0:
            for i in range(n):
                A[i] += bias
        else:
            gam = theta[o_g:o_g + nout]
            bet = theta[o_bt:o_bt + nout]
            NH = _nb_mat(NHbuf, offs[l + 1] - offs[1], n, nout)
            for i in range(n):
                row = A[i]
                mean = 0.0
                for o in range(nout):
                    row[o] += bias[o]
                    mean += row[o]
                mean /= nout
                var = 0.0
                for o in range(nout):
                    dv = row[o] - mean
                    var += dv * dv
                inv = 1.0 / math.sqrt(var / nout + ln_eps)
                INV[l, i] = inv
                nrow = NH[i]
                for o in range(nout):
                    nh = (row[o] - mean) * inv
                    nrow[o] = nh
                    row[o] = gam[o] * nh + bet[o]
        base = offs[l + 1] - offs[1]
        m = n * nout
        _nb_gelu(Abuf[base:base + m], Hbuf[offs[l + 1]:offs[l + 1] + m], DGbuf[base:base + m], bits[:m])
    h_w, h_b, h_in, nd = head
    v = np.dot(_nb_mat(Hbuf, offs[n_layers], n, h_in), _nb_mat(theta, h_w, h_in, nd))
    for i in range(n):
        for o in range(nd):
            v[i, o] += theta[h_b + o]
    return v


@njit(fastmath=_FM)
def nb_forward(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps):
    # row blocks bound the workspace size for large sampling batches
    n, d = z.shape
    v = np.empty((n, head[3]))
    ws = nb_workspace(min(n, _BLOCK), layers, d, yemb.shape[1])
    for s in range(0, n, _BLOCK):
        e = min(n, s + _BLOCK)
        if e - s < _BLOCK and n > _BLOCK:
            ws = nb_workspace(e - s, layers, d, yemb.shape[1])
        v[s:e] = _nb_forward(theta, layers, head, gain_off, freqs, z[s:e], t[s:e], yemb[s:e], ln_eps, ws)
    return v


@njit(fastmath=_FM)
def _nb_colsum(M, out, off):
    rows, cols = M.shape
    for i in range(rows):
        for c in range(cols):
            out[off + c] += M[i, c]


@njit(fastmath=_FM)
def nb_loss_grad(theta, layers, head, gain_off, freqs, z, t, yemb, u, ln_eps, ws):
    """Mean squared residual ``|v - u|^2``, its gradient w.r.t. ``theta`` and w.r.t. ``z``."""
    n, d = z.shape
    emb = yemb.shape[1]
    in_w = emb * (d + 2)
    n_layers = layers.shape[0]
    v = _nb_forward(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps, ws)
    E0, DZ, Hbuf, Abuf, NHbuf, DGbuf, bits, INV, offs = ws
    h_w, h_b, h_in, nd = head
    grad = np.zeros(theta.shape[0])
    dV = np.empty((n, nd))
    loss = 0.0
    for i in range(n):
        for o in range(nd):
            r = v[i, o] - u[i, o]
            loss += r * r
            dV[i, o] = (2.0 / n) * r
    Hl = _nb_mat(Hbuf, offs[n_layers], n, h_in)
    gW = np.dot(Hl.T, dV)
    for k in range(h_in):
        for o in range(nd):
            grad[h_w + k * nd + o] = gW[k, o]
    _nb_colsum(dV, grad, h_b)
    dH = np.dot(dV, _nb_mat(theta, h_w, h_in, nd).T)
    for l in range(n_layers - 1, -1, -1):
        o_w, o_b, o_g, o_bt, nin, nout = layers[l]
        base = offs[l + 1] - offs[1]
        dN = np.empty((n, nout))
        for i in range(n):
            for o in range(nout):
                dN[i, o] = dH[i, o] * DGbuf[base + i * nout + o]
        if o_g >= 0:
            for i in range(n):
                m1 = 0.0
                m2 = 0.0
                for o in range(nout):
                    nh = NHbuf[base + i * nout + o]
                    g = dN[i, o]
                    grad[o_g + o] += g * nh
                    grad[o_bt + o] += g
                    g *= theta[o_g + o]
                    dN[i, o] = g
                    m1 += g
                    m2 += g * nh
                m1 /= nout
                m2 /= nout
                inv = INV[l, i]
                for o in range(nout):
                    dN[i, o] = inv * (dN[i, o] - m1 - NHbuf[base + i * nout + o] * m2)
        Hin = _nb_mat(Hbuf, offs[l], n, nin)
        gW = np.dot(Hin.T, dN)
        for k in range(nin):
            for o in range(nout):
                grad[o_w + k * nout + o] = gW[k, o]
        _nb_colsum(dN, grad, o_b)
        dH = np.dot(dN, _nb_mat(theta, o_w, nin, nout).T)
    gz = np.zeros((n, d))
    for i in range(n):
        for c in range(in_w):
            g = dH[i, c]
            if gain_off >= 0:
                grad[gain_off + c] += g * E0[i, c]
                g *= theta[gain_off + c]
            if c < d * emb:
                gz[i, c // emb] += g * DZ[i, c]
    return loss / n, grad, gz, v


# --------------------------------------------------------------------------- numpy


def _np_embed(x, freqs):
    ang = x[..., None] * freqs
    s, c = np.sin(ang), np.cos(ang)
    return np.concatenate([s, c], axis=-1), np.concatenate([freqs * c, -freqs * s], axis=-1)


def _np_forward_cache(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps):
    n, d = z.shape
    emb = yemb.shape[1]
    ez, dez = _np_embed(z, freqs)
    et, _ = _np_embed(t, freqs)
    e0 = np.concatenate([ez.reshape(n, d * emb), yemb, et], axis=1)
    in_w = e0.shape[1]
    h = e0 * theta[gain_off:gain_off + in_w] if gain_off >= 0 else e0
    cache = []
    for o_w, o_b, o_g, o_bt, nin, nout in layers:
        W = theta[o_w:o_w + nin * nout].reshape(nin, nout)
        a = h @ W + theta[o_b:o_b + nout]
        nh = inv = None
        if o_g >= 0:
            mean = a.mean(axis=1, keepdims=True)
            cen = a - mean
            inv = 1.0 / np.sqrt((cen * cen).mean(axis=1, keepdims=True) + ln_eps)
            nh = cen * inv
            a = theta[o_g:o_g + nout] * nh + theta[o_bt:o_bt + nout]
        cdf = 0.5 * (1.0 + _erf(a * _RSQRT2))
        cache.append((h, a, nh, inv, cdf))
        h = a * cdf
    h_w, h_b, h_in, nd = head
    Wo = theta[h_w:h_w + h_in * nd].reshape(h_in, nd)
    v = h @ Wo + theta[h_b:h_b + nd]
    return v, h, cache, e0, dez


def np_forward(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps):
    return _np_forward_cache(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps)[0]


def np_loss_grad(theta, layers, head, gain_off, freqs, z, t, yemb, u, ln_eps, ws=None):
    n, d = z.shape
    emb = yemb.shape[1]
    v, h_last, cache, e0, dez = _np_forward_cache(theta, layers, head, gain_off, freqs, z, t, yemb, ln_eps)
    grad = np.zeros_like(theta)
    r = v - u
    loss = float(np.sum(r * r) / n)
    dv = (2.0 / n) * r
    h_w, h_b, h_in, nd = head
    Wo = theta[h_w:h_w + h_in * nd].reshape(h_in, nd)
    grad[h_w:h_w + h_in * nd] = (h_last.T @ dv).ravel()
    grad[h_b:h_b + nd] = dv.sum(axis=0)
    dh = dv @ Wo.T
    for (o_w, o_b, o_g, o_bt, nin, nout), (h, a, nh, inv, cdf) in zip(layers[::-1], cache[::-1]):
        dn = dh * (cdf + a * _RSQRT2PI * np.exp(-0.5 * a * a))
        if o_g >= 0:
            grad[o_g:o_g + nout] = (dn * nh).sum(axis=0)
            grad[o_bt:o_bt + nout] = dn.sum(axis=0)
            dn = dn * theta[o_g:o_g + nout]
            dn = inv * (dn - dn.mean(axis=1, keepdims=True) - nh * (dn * nh).mean(axis=1, keepdims=True))
        W = theta[o_w:o_w + nin * nout].reshape(nin, nout)
        grad[o_w:o_w + nin * nout] = (h.T @ dn).ravel()
        grad[o_b:o_b + nout] = dn.sum(axis=0)
        dh = dn @ W.T
    if gain_off >= 0:
        in_w = e0.shape[1]
        grad[gain_off:gain_off + in_w] = (dh * e0).sum(axis=0)
        dh = dh * theta[gain_off:gain_off + in_w]
    gz = (dh[:, : d * emb].reshape(n, d, emb) * dez).sum(axis=2)
    return loss, grad, gz, v


# --------------------------------------------------------------------------- dispatch

_BACKENDS = {
    "numba": (nb_forward, nb_loss_grad),
    "numpy": (np_forward, np_loss_grad),
}
_active = "numba" if USE_NUMBA else "numpy"


def backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _active = name


def forward(*args):
    return _BACKENDS[_active][0](*args)


def workspace(n, layers, d, emb):
    """Reusable scratch for :func:`loss_grad`; ``None`` on the numpy path."""
    return nb_workspace(n, layers, d, emb) if _active == "numba" else None


def loss_grad(*args):
    """``(theta, layers, head, gain_off, freqs, z, t, yemb, u, ln_eps, ws)``.

    ``ws`` must come from :func:`workspace` for the same batch size and the
    currently active backend.
    """
    return _BACKENDS[_active][1](*args)
