"""Pure-numpy scaled forward/backward recursions (fallback for ``_fb_ext``)."""
import numpy as np


def forward(pi, omega, emis):
    T, Z = emis.shape
    fhat = np.zeros((T, Z))
    scale = np.zeros(T)
    f = pi * emis[0]
    for t in range(T):
        if t > 0:
            f = (fhat[t - 1] @ omega) * emis[t]
        s = f.sum()
        scale[t] = s
        if not s > 0.0:
            return fhat, scale, t
        fhat[t] = f / s
    return fhat, scale, -1


def backward(omega, emis, scale):
    T, Z = emis.shape
    bhat = np.ones((T, Z))
    for t in range(T - 2, -1, -1):
        bhat[t] = omega @ (emis[t + 1] * bhat[t + 1]) / scale[t + 1]
    return bhat


def forward_loglik(pi, omega, emis):
    T = emis.shape[0]
    total = 0.0
    f = pi * emis[0]
    for t in range(T):
        if t > 0:
            f = (f @ omega) * emis[t]
        s = f.sum()
        if not s > 0.0:
            return total, t
        total += np.log(s)
        f = f / s
    return float(total), -1
