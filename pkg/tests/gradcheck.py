"""Central finite differences on the smooth (surrogate) forward pass."""

import numpy as np

from rbe.model import backward, forward, init_params


def make_params(estimator, m=4, n=4, u=2, v=1, hash_dim=12, seed=0, binarized=True, alpha=1.7):
    params = init_params(m=m, n=n, u=u, v=v, hash_dim=hash_dim, seed=seed, estimator=estimator, binarized=binarized)
    params.alpha = alpha
    rng = np.random.default_rng(seed + 99)
    for side in (params.query, params.keyword):
        for _, arr in side.arrays():
            if arr.ndim == 1:
                arr[:] = rng.uniform(-0.3, 0.3, arr.shape)
    return params


def relative_errors(params, side, features, upstream, eps=1e-6):
    """Per-array relative error between backward() and finite differences."""

    def loss():
        return float(np.sum(upstream * forward(params, side, features, smooth=True).output))

    trace = forward(params, side, features, smooth=True)
    grads = backward(params, trace, upstream)
    out = {}
    for (name, arr), (_, g) in zip(params.side(side).arrays(), grads.arrays()):
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = arr[i]
            arr[i] = keep + eps
            hi = loss()
            arr[i] = keep - eps
            lo = loss()
            arr[i] = keep
            num[i] = (hi - lo) / (2 * eps)
        denom = np.linalg.norm(num) + np.linalg.norm(g)
        out[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(num - g) / denom)
    return out


def smooth_case(estimator, seed=0, binarized=True):
    params = make_params(estimator, seed=seed, binarized=binarized, u=2 if binarized else 0, v=1 if binarized else 0)
    rng = np.random.default_rng(seed)
    features = rng.poisson(1.0, size=(5, params.hash_dim)).astype(float)
    return params, features, rng
