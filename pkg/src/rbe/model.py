"""Recurrent binary embedding layers on top of a hashed-trigram encoder.

Per side (query or keyword), for a dense feature vector ``f``::

    b0       = rho(W f + w)
    g[t-1]   = tanh(B[t-1] b[t-1] + c[t-1])         # reconstruction
    d[t-1]   = rho(R[t-1] (f - g[t-1]) + r[t-1])    # residual plane
    b[t]     = b[t-1] + 2**-t d[t-1]

``b[t-1]`` fed to the reconstruction is the running refined vector.
``f = tanh(E x + e)`` comes from sparse trigram counts ``x``. Everything is
batched over rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from rbe.binvec import PackedBinaryVector, RbeEmbedding, pack_rows, plane_weight
from rbe.features import DEFAULT_HASH_DIM, Featurizer

ESTIMATORS = ("straight_through", "straight_through_variant", "annealing_tanh")
SIDES = ("query", "keyword")

CHECKPOINT_MAGIC = b"RBEM"
CHECKPOINT_VERSION = 1


def _check_estimator(estimator: str) -> None:
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def binarize(x: float) -> int:
    """Forward sign: -1 for ``x <= 0``, +1 otherwise."""
    if not math.isfinite(x):
        raise ValueError(f"cannot binarize non-finite value {x!r}")
    return 1 if x > 0 else -1


def binarize_array(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, -1.0)


def binarize_grad(x, upstream, estimator: str, alpha: float = 1.0):
    """Gradient passed through ``rho`` under the chosen estimator."""
    _check_estimator(estimator)
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(upstream))):
        raise ValueError("non-finite input to binarize_grad")
    if estimator == "straight_through":
        out = upstream * np.ones_like(x)
    elif estimator == "straight_through_variant":
        out = upstream * (np.abs(x) <= 1.0)
    else:
        if alpha < 1:
            raise ValueError("annealing slope must be >= 1")
        th = np.tanh(alpha * x)
        out = upstream * alpha * (1.0 - th * th)
    return out if out.ndim else float(out)


def surrogate(x: np.ndarray, estimator: str, alpha: float = 1.0) -> np.ndarray:
    """Smooth stand-in for ``rho`` whose derivative is the estimator's gradient."""
    _check_estimator(estimator)
    if estimator == "straight_through":
        return np.array(x, dtype=np.float64)
    if estimator == "straight_through_variant":
        return np.clip(x, -1.0, 1.0)
    return np.tanh(alpha * x)


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    s = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


@dataclass
class SideParams:
    """Parameters of one tower. Lists are indexed by recurrence step."""

    encoder: np.ndarray
    encoder_bias: np.ndarray
    base: np.ndarray
    base_bias: np.ndarray
    recon: list[np.ndarray] = field(default_factory=list)
    recon_bias: list[np.ndarray] = field(default_factory=list)
    resid: list[np.ndarray] = field(default_factory=list)
    resid_bias: list[np.ndarray] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.recon)

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every array in checkpoint order, with a stable name."""
        yield "encoder", self.encoder
        yield "encoder_bias", self.encoder_bias
        yield "base", self.base
        yield "base_bias", self.base_bias
        for t in range(self.steps):
            yield f"recon{t}", self.recon[t]
            yield f"recon_bias{t}", self.recon_bias[t]
            yield f"resid{t}", self.resid[t]
            yield f"resid_bias{t}", self.resid_bias[t]

    def zeros_like(self) -> SideParams:
        return SideParams(
            np.zeros_like(self.encoder),
            np.zeros_like(self.encoder_bias),
            np.zeros_like(self.base),
            np.zeros_like(self.base_bias),
            [np.zeros_like(a) for a in self.recon],
            [np.zeros_like(a) for a in self.recon_bias],
            [np.zeros_like(a) for a in self.resid],
            [np.zeros_like(a) for a in self.resid_bias],
        )

    def copy(self) -> SideParams:
        return SideParams(
            self.encoder.copy(),
            self.encoder_bias.copy(),
            self.base.copy(),
            self.base_bias.copy(),
            [a.copy() for a in self.recon],
            [a.copy() for a in self.recon_bias],
            [a.copy() for a in self.resid],
            [a.copy() for a in self.resid_bias],
        )


@dataclass
class RbeModelParams:
    m: int
    n: int
    u: int
    v: int
    query: SideParams
    keyword: SideParams
    hash_dim: int = DEFAULT_HASH_DIM
    gamma: float = 10.0
    estimator: str = "straight_through_variant"
    alpha: float = 1.0
    alpha_growth: float = 1.1
    use_residual_weights: bool = True
    use_bias: bool = True
    binarized: bool = True

    def __post_init__(self):
        _check_estimator(self.estimator)
        if self.u < 0 or self.v < 0:
            raise ValueError("u and v must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.binarized and (self.u or self.v):
            raise ValueError("the full-precision ablation has no residual steps")
        for name, side, steps in (("query", self.query, self.u), ("keyword", self.keyword, self.v)):
            if side.steps != steps:
                raise ValueError(f"{name} side has {side.steps} steps, expected {steps}")
            _check_shapes(side, self.hash_dim, self.m, self.n)

    def side(self, name: str) -> SideParams:
        if name not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        return self.query if name == "query" else self.keyword

    def steps_for(self, side: str) -> int:
        return self.u if side == "query" else self.v

    @property
    def featurizer(self) -> Featurizer:
        return Featurizer(self.hash_dim)

    def copy(self) -> RbeModelParams:
        return replace(self, query=self.query.copy(), keyword=self.keyword.copy())


def _check_shapes(side: SideParams, hash_dim: int, m: int, n: int) -> None:
    expected = {
        "encoder": (hash_dim, m),
        "encoder_bias": (m,),
        "base": (n, m),
        "base_bias": (n,),
    }
    for t in range(side.steps):
        expected.update(
            {
                f"recon{t}": (m, n),
                f"recon_bias{t}": (m,),
                f"resid{t}": (n, m),
                f"resid_bias{t}": (n,),
            }
        )
    for name, arr in side.arrays():
        if arr.shape != expected[name]:
            raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")


def _init_side(rng, hash_dim, m, n, steps) -> SideParams:
    return SideParams(
        encoder=glorot(rng, hash_dim, m),
        encoder_bias=np.zeros(m),
        base=glorot(rng, n, m),
        base_bias=np.zeros(n),
        recon=[glorot(rng, m, n) for _ in range(steps)],
        recon_bias=[np.zeros(m) for _ in range(steps)],
        resid=[glorot(rng, n, m) for _ in range(steps)],
        resid_bias=[np.zeros(n) for _ in range(steps)],
    )


def init_params(
    m: int = 288,
    n: int = 64,
    u: int = 1,
    v: int = 1,
    hash_dim: int = DEFAULT_HASH_DIM,
    seed: int = 0,
    **options,
) -> RbeModelParams:
    """Glorot-uniform weights, zero biases. Query and keyword towers are independent."""
    rng = np.random.default_rng(seed)
    query = _init_side(rng, hash_dim, m, n, u)
    keyword = _init_side(rng, hash_dim, m, n, v)
    return RbeModelParams(m=m, n=n, u=u, v=v, query=query, keyword=keyword, hash_dim=hash_dim, **options)


@dataclass
class ForwardTrace:
    """Intermediates of one batched forward pass.

    ``planes[0]`` is the base plane ``b0`` and ``planes[t]`` (``t >= 1``) the
    residual plane ``d[t-1]``. ``refined[t]`` is the running refined vector
    after ``t`` residual steps.
    """

    side: str
    features: sp.csr_matrix
    f: np.ndarray
    base_pre: np.ndarray
    planes: list[np.ndarray]
    recon_pre: list[np.ndarray]
    recon: list[np.ndarray]
    resid_pre: list[np.ndarray]
    refined: list[np.ndarray]
    weighted: bool
    binary: bool

    @property
    def steps(self) -> int:
        return len(self.recon)

    @property
    def output(self) -> np.ndarray:
        return self.refined[-1]

    def embeddings(self) -> list[RbeEmbedding]:
        """Packed embeddings, one per row. Only valid for binary traces."""
        if not self.binary:
            raise ValueError("trace holds real-valued planes")
        packed = [pack_rows(p.astype(np.int8)) for p in self.planes]
        dim = self.planes[0].shape[1]
        norms = np.linalg.norm(self.output, axis=1)
        out = []
        for row in range(self.f.shape[0]):
            planes = tuple(PackedBinaryVector(dim, p[row]) for p in packed)
            out.append(RbeEmbedding(planes, float(norms[row])))
        return out


def _as_batch(features, hash_dim: int) -> sp.csr_matrix:
    if sp.issparse(features):
        mat = sp.csr_matrix(features, dtype=np.float64)
    elif isinstance(features, dict):
        idx = np.fromiter(features.keys(), dtype=np.int64)
        val = np.fromiter(features.values(), dtype=np.float64)
        mat = sp.csr_matrix((val, (np.zeros_like(idx), idx)), shape=(1, hash_dim))
    else:
        arr = np.atleast_2d(np.asarray(features, dtype=np.float64))
        mat = sp.csr_matrix(arr)
    if mat.shape[1] != hash_dim:
        raise ValueError(f"features have width {mat.shape[1]}, model expects {hash_dim}")
    return mat


def encode_dense(params: RbeModelParams, side: str, features) -> np.ndarray:
    """The dense feature vector ``f`` for each row."""
    p = params.side(side)
    x = _as_batch(features, params.hash_dim)
    return np.tanh(x @ p.encoder + p.encoder_bias)


def forward(
    params: RbeModelParams,
    side: str,
    features,
    steps: int | None = None,
    smooth: bool = False,
) -> ForwardTrace:
    """Run one tower.

    ``smooth=True`` replaces ``rho`` with the estimator's surrogate (identity,
    hard tanh or ``tanh(alpha x)``), which makes the network differentiable
    for gradient checking.
    """
    p = params.side(side)
    max_steps = params.steps_for(side)
    steps = max_steps if steps is None else steps
    if not 0 <= steps <= max_steps:
        raise ValueError(f"steps must be in [0, {max_steps}] for the {side} side")
    x = _as_batch(features, params.hash_dim)
    f = np.tanh(x @ p.encoder + p.encoder_bias)

    if not params.binarized:
        rho = np.tanh
    elif smooth:
        def rho(a):
            return surrogate(a, params.estimator, params.alpha)
    else:
        rho = binarize_array

    base_pre = f @ p.base.T + p.base_bias
    planes = [rho(base_pre)]
    refined = [planes[0]]
    recon_pre, recon, resid_pre = [], [], []
    for t in range(1, steps + 1):
        c = refined[-1] @ p.recon[t - 1].T + p.recon_bias[t - 1]
        g = np.tanh(c)
        e = (f - g) @ p.resid[t - 1].T + p.resid_bias[t - 1]
        d = rho(e)
        recon_pre.append(c)
        recon.append(g)
        resid_pre.append(e)
        planes.append(d)
        refined.append(refined[-1] + plane_weight(t, params.use_residual_weights) * d)
    return ForwardTrace(
        side=side,
        features=x,
        f=f,
        base_pre=base_pre,
        planes=planes,
        recon_pre=recon_pre,
        recon=recon,
        resid_pre=resid_pre,
        refined=refined,
        weighted=params.use_residual_weights,
        binary=params.binarized and not smooth,
    )


def _rho_grad(params: RbeModelParams, pre: np.ndarray, out: np.ndarray, upstream: np.ndarray):
    if not params.binarized:
        return upstream * (1.0 - out * out)
    return binarize_grad(pre, upstream, params.estimator, params.alpha)


def backward(params: RbeModelParams, trace: ForwardTrace, upstream: np.ndarray) -> SideParams:
    """Gradients of all tower parameters given ``dL/d(refined output)``."""
    p = params.side(trace.side)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {trace.output.shape}")
    if trace.steps > p.steps or trace.f.shape[1] != params.m or trace.output.shape[1] != params.n:
        raise ValueError("trace does not match these parameters")
    grads = p.zeros_like()
    grad_f = np.zeros_like(trace.f)
    grad_ref = upstream
    for t in range(trace.steps, 0, -1):
        g = trace.recon[t - 1]
        grad_d = plane_weight(t, trace.weighted) * grad_ref
        grad_e = _rho_grad(params, trace.resid_pre[t - 1], trace.planes[t], grad_d)
        grads.resid[t - 1] = grad_e.T @ (trace.f - g)
        grads.resid_bias[t - 1] = grad_e.sum(axis=0)
        grad_diff = grad_e @ p.resid[t - 1]
        grad_f += grad_diff
        grad_c = -grad_diff * (1.0 - g * g)
        grads.recon[t - 1] = grad_c.T @ trace.refined[t - 1]
        grads.recon_bias[t - 1] = grad_c.sum(axis=0)
        grad_ref = grad_ref + grad_c @ p.recon[t - 1]
    grad_a = _rho_grad(params, trace.base_pre, trace.planes[0], grad_ref)
    grads.base = grad_a.T @ trace.f
    grads.base_bias = grad_a.sum(axis=0)
    grad_f += grad_a @ p.base
    grad_h = grad_f * (1.0 - trace.f * trace.f)
    grads.encoder = np.asarray(trace.features.T @ grad_h)
    grads.encoder_bias = grad_h.sum(axis=0)
    if not params.use_bias:
        _zero_biases(grads)
    return grads


def _zero_biases(grads: SideParams) -> None:
    grads.encoder_bias[:] = 0
    grads.base_bias[:] = 0
    for arr in grads.recon_bias + grads.resid_bias:
        arr[:] = 0


def embed_texts(params: RbeModelParams, side: str, texts: list[str]) -> list[RbeEmbedding]:
    """Featurize and embed texts with the trained tower."""
    x = params.featurizer.batch(texts)
    return forward(params, side, x).embeddings()


# -- checkpoint ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIBBBBffff")


def save_checkpoint(params: RbeModelParams, path: str | Path) -> None:
    """Header followed by row-major float32 arrays, query tower then keyword tower."""
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.m,
        params.n,
        params.u,
        params.v,
        params.hash_dim,
        ESTIMATORS.index(params.estimator),
        int(params.use_residual_weights),
        int(params.use_bias),
        int(params.binarized),
        params.gamma,
        params.alpha,
        params.alpha_growth,
        0.0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for side in (params.query, params.keyword):
            for _, arr in side.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> dict:
    if len(raw) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    (magic, version, m, n, u, v, hash_dim, est, weighted, bias, binarized, gamma, alpha, growth, _) = (
        _HEADER.unpack(raw[: _HEADER.size])
    )
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if est >= len(ESTIMATORS):
        raise ValueError("checkpoint names an unknown estimator")
    return dict(
        m=m,
        n=n,
        u=u,
        v=v,
        hash_dim=hash_dim,
        estimator=ESTIMATORS[est],
        use_residual_weights=bool(weighted),
        use_bias=bool(bias),
        binarized=bool(binarized),
        gamma=float(gamma),
        alpha=float(alpha),
        alpha_growth=float(growth),
    )


def load_checkpoint(path: str | Path) -> RbeModelParams:
    raw = Path(path).read_bytes()
    meta = _parse_header(raw)
    m, n, hash_dim = meta["m"], meta["n"], meta["hash_dim"]
    offset = _HEADER.size
    shapes = {"encoder": (hash_dim, m), "encoder_bias": (m,), "base": (n, m), "base_bias": (n,)}
    sides = {}
    for name in SIDES:
        loaded = {}
        steps = meta["u"] if name == "query" else meta["v"]
        for key in _array_names(steps):
            shape = shapes.get(key) or _step_shape(key, m, n)
            size = int(np.prod(shape))
            chunk = raw[offset : offset + 4 * size]
            if len(chunk) != 4 * size:
                raise ValueError("checkpoint truncated")
            loaded[key] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
            offset += 4 * size
        sides[name] = SideParams(
            loaded["encoder"],
            loaded["encoder_bias"],
            loaded["base"],
            loaded["base_bias"],
            [loaded[f"recon{t}"] for t in range(steps)],
            [loaded[f"recon_bias{t}"] for t in range(steps)],
            [loaded[f"resid{t}"] for t in range(steps)],
            [loaded[f"resid_bias{t}"] for t in range(steps)],
        )
    if offset != len(raw):
        raise ValueError("trailing bytes after checkpoint payload")
    return RbeModelParams(query=sides["query"], keyword=sides["keyword"], **meta)


def _array_names(steps: int) -> list[str]:
    names = ["encoder", "encoder_bias", "base", "base_bias"]
    for t in range(steps):
        names += [f"recon{t}", f"recon_bias{t}", f"resid{t}", f"resid_bias{t}"]
    return names


def _step_shape(key: str, m: int, n: int) -> tuple[int, ...]:
    for prefix, shape in (("recon_bias", (m,)), ("resid_bias", (n,)), ("recon", (m, n)), ("resid", (n, m))):
        if key.startswith(prefix):
            return shape
    raise KeyError(key)

