"""Operator surrogate for the kernel solver: branch-trunk network.

The network maps m samples of the coupling estimate c_hat to the two
gain kernels evaluated at arbitrary triangle points.  A branch stack
embeds the samples into a latent vector g, a trunk stack embeds the
query point (x, xi) into f, and each output head is the weighted inner
product sum_i alpha_i g_i f_i.  Everything is float64 numpy: dense
layers, tanh activations, analytic backprop, and an adaptive-moment
optimizer, so training is reproducible bit-for-bit from (seed, config).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from arzno.kernels import KernelPair, TriMesh
from arzno.model import LinearizedParams

__all__ = [
    "ModelFormatError",
    "DeepONetModel",
    "TrainConfig",
    "KernelDataset",
    "as_kernel_dataset",
    "mesh_queries",
    "init_model",
    "forward",
    "loss_and_grads",
    "train",
    "eval_accuracy",
    "save_model",
    "load_model",
    "NeuralKernelSource",
]

_MAGIC = b"AZNO"
_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed, truncated, or mismatched model files."""


def _layer_sizes(m: int, hidden: tuple[int, ...], b: int) -> list[int]:
    return [m, *hidden, b]


def _expected_shapes(
    m: int, hidden: tuple[int, ...], b: int
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"head": (2, b)}
    for prefix, first in (("branch", m), ("trunk", 2)):
        sizes = _layer_sizes(first, hidden, b)
        for layer, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"{prefix}_w{layer}"] = (din, dout)
            shapes[f"{prefix}_b{layer}"] = (dout,)
    return shapes


@dataclass
class DeepONetModel:
    """Parameters and structure of the kernel surrogate.

    Attributes:
        m: branch input size (samples of c_hat on the mesh edge grid).
        b: latent width (number of basis pairs).
        hidden: hidden layer widths, shared by branch and trunk.
        c_scale: input normalization; the branch sees c_hat / c_scale.
        params: weight dict; keys {branch,trunk}_{w,b}{layer} and "head"
            with head[0] the Ku coefficients and head[1] the Kv ones.
        activation: fixed smooth nonlinearity of the hidden layers.
    """

    m: int
    b: int
    hidden: tuple[int, ...]
    c_scale: float
    params: dict[str, np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        if self.m < 1 or self.b < 1 or not self.hidden:
            raise ValueError("m, b must be positive and hidden non-empty")
        if self.c_scale <= 0:
            raise ValueError("c_scale must be positive")
        expected = _expected_shapes(self.m, tuple(self.hidden), self.b)
        if set(self.params) != set(expected):
            raise ValueError("parameter keys do not match the architecture")
        for key, shape in expected.items():
            arr = np.asarray(self.params[key], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"parameter {key} must have shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {key} contains non-finite values")
            self.params[key] = arr


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings: first-order adaptive-moment method."""

    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    val_split: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size, epochs must be positive")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")


@dataclass(frozen=True)
class KernelDataset:
    """Stacked training arrays on a shared mesh.

    ku and kv hold lower-triangle node values in row-major tril order,
    matching the serialized kernel records.
    """

    mesh_n: int
    c: np.ndarray
    ku: np.ndarray
    kv: np.ndarray

    def __post_init__(self) -> None:
        n_tri = self.mesh_n * (self.mesh_n + 1) // 2
        c = np.asarray(self.c, dtype=float)
        ku = np.asarray(self.ku, dtype=float)
        kv = np.asarray(self.kv, dtype=float)
        if c.ndim != 2 or ku.shape != (c.shape[0], n_tri) or kv.shape != ku.shape:
            raise ValueError("dataset arrays are inconsistent with the mesh")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "ku", ku)
        object.__setattr__(self, "kv", kv)

    def __len__(self) -> int:
        return self.c.shape[0]


def as_kernel_dataset(
    data: KernelDataset | Iterable[tuple[np.ndarray, KernelPair]],
) -> KernelDataset:
    """Stack (c_samples, KernelPair) pairs; pass a KernelDataset through."""
    if isinstance(data, KernelDataset):
        return data
    cs: list[np.ndarray] = []
    kus: list[np.ndarray] = []
    kvs: list[np.ndarray] = []
    mesh_n: int | None = None
    for c_samples, kp in data:
        if mesh_n is None:
            mesh_n = kp.mesh.n
        elif kp.mesh.n != mesh_n:
            raise ValueError("all pairs must share one mesh")
        c_samples = np.asarray(c_samples, dtype=float)
        if c_samples.shape != (mesh_n,):
            raise ValueError("c_samples must live on the mesh edge grid")
        ii, jj = np.tril_indices(mesh_n)
        cs.append(c_samples)
        kus.append(kp.ku[ii, jj])
        kvs.append(kp.kv[ii, jj])
    if mesh_n is None:
        raise ValueError("dataset is empty")
    return KernelDataset(
        mesh_n=mesh_n, c=np.stack(cs), ku=np.stack(kus), kv=np.stack(kvs)
    )


def mesh_queries(mesh: TriMesh) -> np.ndarray:
    """Triangle node coordinates (x, xi) in row-major tril order."""
    ii, jj = np.tril_indices(mesh.n)
    return np.column_stack([mesh.x[ii], mesh.x[jj]])


def init_model(
    m: int = 41,
    b: int = 32,
    hidden: tuple[int, ...] = (64, 64),
    seed: int = 0,
    c_scale: float = 0.02,
) -> DeepONetModel:
    """Fresh model with uniform Glorot weights and zero biases.

    The draw order is fixed (branch stack, trunk stack, head) so a seed
    pins every parameter byte.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for prefix, first in (("branch", m), ("trunk", 2)):
        sizes = _layer_sizes(first, tuple(hidden), b)
        for layer, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (din + dout))
            params[f"{prefix}_w{layer}"] = rng.uniform(-limit, limit, (din, dout))
            params[f"{prefix}_b{layer}"] = np.zeros(dout)
    limit = np.sqrt(6.0 / (2 * b))
    params["head"] = rng.uniform(-limit, limit, (2, b))
    return DeepONetModel(
        m=m, b=b, hidden=tuple(hidden), c_scale=c_scale, params=params
    )


def _forward_stack(
    params: dict[str, np.ndarray], prefix: str, x: np.ndarray, n_hidden: int
) -> list[np.ndarray]:
    acts = [x]
    for layer in range(n_hidden):
        z = acts[-1] @ params[f"{prefix}_w{layer}"] + params[f"{prefix}_b{layer}"]
        acts.append(np.tanh(z))
    acts.append(
        acts[-1] @ params[f"{prefix}_w{n_hidden}"] + params[f"{prefix}_b{n_hidden}"]
    )
    return acts


def _backward_stack(
    params: dict[str, np.ndarray],
    prefix: str,
    acts: list[np.ndarray],
    d_out: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    n_hidden = len(acts) - 2
    d = d_out
    for layer in range(n_hidden, -1, -1):
        grads[f"{prefix}_w{layer}"] = acts[layer].T @ d
        grads[f"{prefix}_b{layer}"] = d.sum(axis=0)
        if layer > 0:
            d = (d @ params[f"{prefix}_w{layer}"].T) * (1.0 - acts[layer] ** 2)


def _check_queries(queries: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if q.ndim != 2 or q.shape[1] != 2:
        raise ValueError("queries must be (x, xi) pairs")
    x, xi = q[:, 0], q[:, 1]
    tol = 1e-9
    if np.any(x < -tol) or np.any(x > 1 + tol) or np.any(xi < -tol):
        raise ValueError("query outside the unit triangle")
    if np.any(xi > x + tol):
        raise ValueError("query outside the unit triangle: xi must not exceed x")
    return q


def forward(
    model: DeepONetModel, c_samples: np.ndarray, queries: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (Ku, Kv) at the query points for one input function.

    Args:
        model: trained or fresh surrogate.
        c_samples: m samples of c_hat on the uniform edge grid.
        queries: (Q, 2) array of (x, xi) points inside the triangle
            0 <= xi <= x <= 1 (a single pair is also accepted).

    Returns:
        Two length-Q arrays of kernel values.
    """
    c_samples = np.asarray(c_samples, dtype=float)
    if c_samples.shape != (model.m,):
        raise ValueError(f"c_samples must have length {model.m}")
    q = _check_queries(queries)
    n_hidden = len(model.hidden)
    g = _forward_stack(
        model.params, "branch", c_samples[None, :] / model.c_scale, n_hidden
    )[-1][0]
    f = _forward_stack(model.params, "trunk", q, n_hidden)[-1]
    head = model.params["head"]
    return (f * head[0]) @ g, (f * head[1]) @ g


def loss_and_grads(
    model: DeepONetModel,
    c_batch: np.ndarray,
    yu: np.ndarray,
    yv: np.ndarray,
    queries: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over both heads and its parameter gradients.

    The trunk is evaluated once for the shared query set; predictions
    for the whole batch are formed by the latent inner products.  The
    loss is sum over heads of mean((pred - target)^2).
    """
    params = model.params
    n_hidden = len(model.hidden)
    b_acts = _forward_stack(params, "branch", c_batch / model.c_scale, n_hidden)
    t_acts = _forward_stack(params, "trunk", queries, n_hidden)
    lat_g = b_acts[-1]
    lat_f = t_acts[-1]
    head = params["head"]
    fu = lat_f * head[0]
    fv = lat_f * head[1]
    pu = lat_g @ fu.T
    pv = lat_g @ fv.T
    ru = pu - yu
    rv = pv - yv
    denom = ru.size
    loss = (np.sum(ru * ru) + np.sum(rv * rv)) / denom
    dpu = (2.0 / denom) * ru
    dpv = (2.0 / denom) * rv
    tgu = dpu.T @ lat_g
    tgv = dpv.T @ lat_g
    grads: dict[str, np.ndarray] = {
        "head": np.stack([(tgu * lat_f).sum(axis=0), (tgv * lat_f).sum(axis=0)])
    }
    _backward_stack(params, "branch", b_acts, dpu @ fu + dpv @ fv, grads)
    _backward_stack(params, "trunk", t_acts, tgu * head[0] + tgv * head[1], grads)
    return float(loss), grads


def _predict_chunked(
    model: DeepONetModel,
    c: np.ndarray,
    queries: np.ndarray,
    chunk: int = 1024,
) -> tuple[np.ndarray, np.ndarray]:
    n_hidden = len(model.hidden)
    lat_f = _forward_stack(model.params, "trunk", queries, n_hidden)[-1]
    head = model.params["head"]
    fu = lat_f * head[0]
    fv = lat_f * head[1]
    pu = np.empty((c.shape[0], queries.shape[0]))
    pv = np.empty_like(pu)
    for start in range(0, c.shape[0], chunk):
        sl = slice(start, start + chunk)
        lat_g = _forward_stack(
            model.params, "branch", c[sl] / model.c_scale, n_hidden
        )[-1]
        pu[sl] = lat_g @ fu.T
        pv[sl] = lat_g @ fv.T
    return pu, pv


def _val_metrics(
    model: DeepONetModel,
    c: np.ndarray,
    yu: np.ndarray,
    yv: np.ndarray,
    queries: np.ndarray,
) -> tuple[float, float]:
    pu, pv = _predict_chunked(model, c, queries)
    ru = pu - yu
    rv = pv - yv
    mse = float((np.sum(ru * ru) + np.sum(rv * rv)) / ru.size)
    ref = float(np.sum(yu * yu) + np.sum(yv * yv))
    rel = float(np.sqrt((np.sum(ru * ru) + np.sum(rv * rv)) / ref)) if ref > 0 else np.inf
    return mse, rel


def train(
    data: KernelDataset | Iterable[tuple[np.ndarray, KernelPair]],
    cfg: TrainConfig,
    model: DeepONetModel | None = None,
    val_data: KernelDataset | Iterable[tuple[np.ndarray, KernelPair]] | None = None,
) -> tuple[DeepONetModel, list[dict[str, float]]]:
    """Fit the surrogate by mini-batch gradient descent with Adam moments.

    Args:
        data: training pairs or stacked arrays.
        cfg: optimizer settings.
        model: model to continue training; a fresh default architecture
            is created when omitted, with c_scale set to the largest
            input magnitude in the data.
        val_data: held-out pairs scored once per epoch.  When omitted, a
            val_split fraction of data is carved off (at least one
            record, unless the dataset has a single record, which is
            then used for both roles).

    Returns:
        (best-validation model, per-epoch history).  History entries
        carry epoch, train_mse, val_mse, val_rel.
    """
    data = as_kernel_dataset(data)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        c_scale = float(np.max(np.abs(data.c)))
        if c_scale <= 0:
            c_scale = 0.02
        model = init_model(m=data.c.shape[1], seed=cfg.seed, c_scale=c_scale)
    if data.c.shape[1] != model.m:
        raise ValueError("dataset sample count does not match model.m")

    mesh = TriMesh(data.mesh_n)
    queries = mesh_queries(mesh)

    if val_data is not None:
        val = as_kernel_dataset(val_data)
        if val.mesh_n != data.mesh_n:
            raise ValueError("validation mesh differs from training mesh")
        c_tr, yu_tr, yv_tr = data.c, data.ku, data.kv
        c_va, yu_va, yv_va = val.c, val.ku, val.kv
    else:
        n_val = int(round(len(data) * cfg.val_split))
        if n_val == 0 or n_val == len(data):
            c_tr, yu_tr, yv_tr = data.c, data.ku, data.kv
            c_va, yu_va, yv_va = data.c, data.ku, data.kv
        else:
            perm = rng.permutation(len(data))
            va, tr = perm[:n_val], perm[n_val:]
            c_tr, yu_tr, yv_tr = data.c[tr], data.ku[tr], data.kv[tr]
            c_va, yu_va, yv_va = data.c[va], data.ku[va], data.kv[va]

    moments = {
        "m": {k: np.zeros_like(p) for k, p in model.params.items()},
        "v": {k: np.zeros_like(p) for k, p in model.params.items()},
    }
    step = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    history: list[dict[str, float]] = []
    best_val = np.inf
    best_params = {k: p.copy() for k, p in model.params.items()}

    n_train = c_tr.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_train)
        running = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(
                model, c_tr[idx], yu_tr[idx], yv_tr[idx], queries
            )
            step += 1
            bc1 = 1.0 - beta1**step
            bc2 = 1.0 - beta2**step
            for key, grad in grads.items():
                m_k = moments["m"][key]
                v_k = moments["v"][key]
                m_k += (1.0 - beta1) * (grad - m_k)
                v_k += (1.0 - beta2) * (grad * grad - v_k)
                model.params[key] -= cfg.lr * (m_k / bc1) / (
                    np.sqrt(v_k / bc2) + eps
                )
            running += loss * idx.size
        train_mse = running / n_train
        if not np.isfinite(train_mse):
            raise ArithmeticError(f"training diverged at epoch {epoch}")
        val_mse, val_rel = _val_metrics(model, c_va, yu_va, yv_va, queries)
        history.append(
            {
                "epoch": float(epoch),
                "train_mse": float(train_mse),
                "val_mse": val_mse,
                "val_rel": val_rel,
            }
        )
        if val_mse < best_val:
            best_val = val_mse
            best_params = {k: p.copy() for k, p in model.params.items()}
    model.params = best_params
    return model, history


def eval_accuracy(
    model: DeepONetModel,
    data: KernelDataset | Iterable[tuple[np.ndarray, KernelPair]],
) -> dict[str, float]:
    """Absolute-error report per head over a test set.

    Returns max and mean absolute node errors for Ku and Kv.
    """
    data = as_kernel_dataset(data)
    queries = mesh_queries(TriMesh(data.mesh_n))
    pu, pv = _predict_chunked(model, data.c, queries)
    err_u = np.abs(pu - data.ku)
    err_v = np.abs(pv - data.kv)
    return {
        "ku_max": float(err_u.max()),
        "ku_mean": float(err_u.mean()),
        "kv_max": float(err_v.max()),
        "kv_mean": float(err_v.mean()),
    }


def save_model(model: DeepONetModel, path: str | Path) -> None:
    """Serialize to the flat binary format (little-endian float64 blocks)."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack(
        "<IIII", _VERSION, model.m, model.b, len(model.hidden)
    )
    buf += struct.pack(f"<{len(model.hidden)}I", *model.hidden)
    buf += struct.pack("<d", model.c_scale)
    buf += struct.pack("<I", len(model.params))
    for key in sorted(model.params):
        arr = np.ascontiguousarray(model.params[key], dtype="<f8")
        name = key.encode()
        buf += struct.pack("<H", len(name))
        buf += name
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ModelFormatError("model file is truncated")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path: str | Path) -> DeepONetModel:
    """Read a model saved by save_model; validates structure strictly."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != _MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, m, b, n_hidden = reader.unpack("<IIII")
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if n_hidden == 0 or n_hidden > 64:
        raise ModelFormatError("implausible hidden layer count")
    hidden = reader.unpack(f"<{n_hidden}I")
    (c_scale,) = reader.unpack("<d")
    (n_params,) = reader.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        payload = reader.take(8 * size)
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise ModelFormatError("trailing bytes after the last parameter block")
    try:
        return DeepONetModel(
            m=m, b=b, hidden=tuple(int(h) for h in hidden),
            c_scale=c_scale, params=params,
        )
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


class NeuralKernelSource:
    """Kernel acquisition through the trained surrogate.

    The trunk basis over the mesh nodes is fixed after training, so it
    is evaluated once here; each acquisition is then a single branch
    pass plus two latent matrix-vector products.
    """

    def __init__(self, model: DeepONetModel, mesh: TriMesh, lp: LinearizedParams):
        if model.m != mesh.n:
            raise ValueError(
                "model branch size does not match the mesh edge grid"
            )
        self.model = model
        self.mesh = mesh
        self.lp = lp
        n_hidden = len(model.hidden)
        lat_f = _forward_stack(
            model.params, "trunk", mesh_queries(mesh), n_hidden
        )[-1]
        head = model.params["head"]
        # Both heads stacked into one matrix: a single latent product per
        # acquisition keeps dispatch overhead off the control loop's
        # critical path.
        self._f_all = np.ascontiguousarray(
            np.vstack([lat_f * head[0], lat_f * head[1]])
        )
        ii, jj = np.tril_indices(mesh.n)
        self._flat = ii * mesh.n + jj

    def acquire(self, c_mesh: np.ndarray) -> KernelPair:
        c_mesh = np.asarray(c_mesh, dtype=float)
        if c_mesh.shape != (self.mesh.n,):
            raise ValueError("c_mesh must live on the mesh edge grid")
        n_hidden = len(self.model.hidden)
        lat_g = _forward_stack(
            self.model.params, "branch", c_mesh / self.model.c_scale, n_hidden
        )[-1]
        pred = self._f_all @ lat_g
        n = self.mesh.n
        tri = pred.size // 2
        ku = np.zeros(n * n)
        kv = np.zeros(n * n)
        ku[self._flat] = pred[:tri]
        kv[self._flat] = pred[tri:]
        return KernelPair._trusted(
            self.mesh,
            ku.reshape(n, n),
            kv.reshape(n, n),
            self.lp.lam_n,
            self.lp.mu_n,
            self.lp.r,
        )
