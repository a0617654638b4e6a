"""Pure numpy implementation of the training kernels (same contract as ``_core``)."""

import numpy as np


def _layers(sizes, params):
    out, pos = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = params[pos : pos + n_out * n_in].reshape(n_out, n_in)
        pos += n_out * n_in
        b = params[pos : pos + n_out]
        pos += n_out
        out.append((w, b))
    if pos != params.shape[0]:
        raise ValueError("parameter vector does not match layer sizes")
    return out


def sgd_epoch(sizes, params, velocity, X, y, order, batch, lr, momentum):
    sizes = [int(s) for s in sizes]
    if sizes[-1] != 1:
        raise ValueError("output layer must have exactly one unit")
    if X.shape[1] != sizes[0]:
        raise ValueError("feature count does not match input layer")
    layers = _layers(sizes, params)
    vel = _layers(sizes, velocity)
    n = order.shape[0]
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        acts = [X[idx]]
        for k, (w, b) in enumerate(layers):
            z = acts[-1] @ w.T + b
            with np.errstate(over="ignore"):
                acts.append(z if k == len(layers) - 1 else 1.0 / (1.0 + np.exp(-z)))
        delta = acts[-1] - y[idx, None]
        grads = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            grads[k] = (delta.T @ acts[k] / len(idx), delta.mean(axis=0))
            if k > 0:
                a = acts[k]
                delta = (delta @ w) * a * (1.0 - a)
        for (w, b), (vw, vb), (gw, gb) in zip(layers, vel, grads):
            vw *= momentum
            vw -= lr * gw
            w += vw
            vb *= momentum
            vb -= lr * gb
            b += vb


def mf_epoch(rows, cols, vals, P, Q, order, lr, reg):
    if Q.shape[1] != P.shape[1]:
        raise ValueError("factor ranks differ")
    for e in order:
        i = rows[e]
        j = cols[e]
        p = P[i].copy()
        q = Q[j]
        err = vals[e] - p @ q
        P[i] += lr * (err * q - reg * p)
        Q[j] += lr * (err * p - reg * q)
