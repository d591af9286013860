"""Shallow masked autoencoder used as the nonlinear trial manifold.

Architecture (``x`` is a state deviation, ``z`` the latent vector)::

    encoder:  z = W2 swish(W1 x + b1) + b2
    decoder:  g(z) = V2 swish(V1 z + c1) + c2

``V2`` is sparse with a banded sliding-window mask: output row ``i`` connects
to ``window`` consecutive hidden units around ``round(i * h_d / N)``. It is
stored as two ``(N, window)`` arrays, ``dec_w2`` (weights) and ``mask_cols``
(hidden-unit indices), so masked-out weights do not exist and stay zero by
construction.

Gradients are hand-written backpropagation for this fixed topology.
"""

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from ._binio import Reader, Writer
from .errors import ConfigError, DimensionError, FormatError, TrainingDivergedError
from .snapshots import SnapshotMatrix, reference_state

MAGIC = b"ROMAE001"
ACTIVATION = "swish"
PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def swish(a):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s


def swish_and_derivative(a):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s * (1.0 + a * (1.0 - s))


def build_mask(n_out, h_d, window):
    """Sliding-window mask as an ``(n_out, window)`` array of hidden indices.

    ``n_out`` may also be a ``GridSpec`` (its state size is used).
    """
    n_out = getattr(n_out, "n_state", n_out)
    if window < 1:
        raise ConfigError(f"mask window must be >= 1, got {window}")
    if window > h_d:
        raise DimensionError(f"mask window {window} exceeds decoder width {h_d}")
    rows = np.arange(n_out, dtype=np.int64)
    centre = (2 * rows * h_d + n_out) // (2 * n_out)  # round half up
    start = np.clip(centre - (window - 1) // 2, 0, h_d - window)
    cols = (start[:, None] + np.arange(window)).astype(np.intp)
    covered = np.zeros(h_d, dtype=bool)
    covered[cols.ravel()] = True
    if not covered.all():
        raise ConfigError(
            f"window {window} leaves {int((~covered).sum())} of {h_d} hidden units "
            f"without an output; use window >= {-(-h_d // n_out)}"
        )
    return cols


def mask_to_csr(cols):
    """Row-pointer / column-index form of a banded mask."""
    n, w = cols.shape
    return np.arange(0, n * w + 1, w, dtype=np.int64), cols.ravel().astype(np.int64)


def kaiming_init(shape, fan_in, seed, mask=None):
    """He-normal draw: i.i.d. N(0, 2/fan_in), zeroed where ``mask`` is False.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    batch_size: int = 240
    max_epochs: int = 10_000
    early_stop_patience: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0 or self.lr_decay_factor <= 1:
            raise ConfigError("initial_lr must be > 0 and lr_decay_factor > 1")
        for name in ("plateau_patience", "batch_size", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    stop_reason: str = ""
    seconds: float = 0.0

    @property
    def epochs_run(self):
        return len(self.train_loss)


@dataclass
class MaskedAutoencoder:
    enc_w1: np.ndarray  # (h_e, N)
    enc_b1: np.ndarray
    enc_w2: np.ndarray  # (n_s, h_e)
    enc_b2: np.ndarray
    dec_w1: np.ndarray  # (h_d, n_s)
    dec_b1: np.ndarray
    dec_w2: np.ndarray  # (N, window) weights on the mask
    dec_b2: np.ndarray
    mask_cols: np.ndarray  # (N, window) hidden indices
    activation: str = ACTIVATION
    ref_policy: str = "initial"
    reference: np.ndarray = None  # only for ref_policy == "fixed"
    attrs: dict = field(default_factory=dict)
    train_report: TrainReport = None

    def __post_init__(self):
        n, h_e, n_s, h_d = self.n_state, self.enc_hidden, self.latent_dim, self.dec_hidden
        expected = {
            "enc_w1": (h_e, n),
            "enc_b1": (h_e,),
            "enc_w2": (n_s, h_e),
            "enc_b2": (n_s,),
            "dec_w1": (h_d, n_s),
            "dec_b1": (h_d,),
            "dec_w2": self.mask_cols.shape,
            "dec_b2": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not n_s < n:
            raise DimensionError(f"latent dimension {n_s} must be smaller than state size {n}")
        if self.activation != ACTIVATION:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        self.mask_cols = np.ascontiguousarray(self.mask_cols, dtype=np.intp)
        if self.mask_cols.size and (self.mask_cols.min() < 0 or self.mask_cols.max() >= h_d):
            raise DimensionError("mask refers to hidden units outside the decoder")

    @property
    def n_state(self):
        return self.dec_b2.shape[0]

    @property
    def latent_dim(self):
        return self.enc_b2.shape[0]

    @property
    def enc_hidden(self):
        return self.enc_b1.shape[0]

    @property
    def dec_hidden(self):
        return self.dec_b1.shape[0]

    @property
    def window(self):
        return self.mask_cols.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def set_params(self, params):
        for name in PARAM_NAMES:
            setattr(self, name, params[name])

    def decoder_weight_dense(self):
        """Dense ``N x h_d`` view of ``V2`` with explicit zeros off the mask."""
        dense = np.zeros((self.n_state, self.dec_hidden))
        np.put_along_axis(dense, self.mask_cols, self.dec_w2, axis=1)
        return dense

    def decoder_weight_sparse(self):
        indptr, indices = mask_to_csr(self.mask_cols)
        return sp.csr_matrix(
            (self.dec_w2.ravel(), indices, indptr), shape=(self.n_state, self.dec_hidden)
        )

    def reference_state(self, grid, mu):
        return reference_state(self.ref_policy, grid, mu, self.reference)


def init_autoencoder(n_state, latent_dim, enc_hidden, dec_hidden, window, seed=0, ref_policy="initial"):
    """Kaiming-initialized model with zero biases.

    The masked layer uses its window (connections per output) as fan-in.
    """
    rng = np.random.default_rng(seed)
    cols = build_mask(n_state, dec_hidden, window)
    return MaskedAutoencoder(
        enc_w1=kaiming_init((enc_hidden, n_state), n_state, rng),
        enc_b1=np.zeros(enc_hidden),
        enc_w2=kaiming_init((latent_dim, enc_hidden), enc_hidden, rng),
        enc_b2=np.zeros(latent_dim),
        dec_w1=kaiming_init((dec_hidden, latent_dim), latent_dim, rng),
        dec_b1=np.zeros(dec_hidden),
        dec_w2=kaiming_init((n_state, window), window, rng),
        dec_b2=np.zeros(n_state),
        mask_cols=cols,
        ref_policy=ref_policy,
    )


def encode(model, x):
    """Latent coordinates of deviation(s) ``x``: shape ``(N,)`` or ``(B, N)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_state:
        raise DimensionError(f"encoder expects length {model.n_state}, got {x.shape[-1]}")
    return swish(x @ model.enc_w1.T + model.enc_b1) @ model.enc_w2.T + model.enc_b2


def _decode_batch(model, z):
    h = swish(z @ model.dec_w1.T + model.dec_b1)
    y = h[:, model.mask_cols[:, 0]] * model.dec_w2[:, 0]
    for k in range(1, model.window):
        y += h[:, model.mask_cols[:, k]] * model.dec_w2[:, k]
    return y + model.dec_b2


def decode(model, z):
    """``g(z)``; the caller adds the reference state. Batched for 2-D ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise DimensionError(f"decoder expects length {model.latent_dim}, got {z.shape[-1]}")
    if z.ndim == 2:
        return _decode_batch(model, z)
    y, _ = _kernels.masked_decode(
        np.ascontiguousarray(z), model.dec_w1, model.dec_b1, model.dec_w2, model.mask_cols, model.dec_b2
    )
    return y


def decode_with_jacobian(model, z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise DimensionError(f"decoder expects length {model.latent_dim}, got {z.shape}")
    return _kernels.masked_decode(
        z, model.dec_w1, model.dec_b1, model.dec_w2, model.mask_cols, model.dec_b2, True
    )


def decoder_jacobian(model, z):
    """``dg/dz = V2 diag(swish'(V1 z + c1)) V1``, shape ``(N, n_s)``."""
    return decode_with_jacobian(model, z)[1]


def reconstruct(model, x):
    return decode(model, encode(model, x))


# -- training -----------------------------------------------------------------


def loss_and_grads(model, x):
    """Mean-squared reconstruction loss of a ``(B, N)`` batch and its gradients."""
    p = model.params()
    cols = model.mask_cols
    b, n = x.shape

    a1 = x @ p["enc_w1"].T + p["enc_b1"]
    h1, d1 = swish_and_derivative(a1)
    z = h1 @ p["enc_w2"].T + p["enc_b2"]
    a2 = z @ p["dec_w1"].T + p["dec_b1"]
    h2, d2 = swish_and_derivative(a2)
    v2 = model.decoder_weight_sparse()
    h2t = np.ascontiguousarray(h2.T)
    y = np.asarray(v2 @ h2t).T + p["dec_b2"]

    err = y - x
    loss = float(np.mean(err * err))
    dy = err * (2.0 / (b * n))

    g = {}
    g["dec_b2"] = dy.sum(axis=0)
    dyt = np.ascontiguousarray(dy.T)
    gw2 = np.empty_like(p["dec_w2"])
    for k in range(model.window):
        gw2[:, k] = np.einsum("nb,nb->n", dyt, h2t[cols[:, k]])
    g["dec_w2"] = gw2
    da2 = np.asarray(v2.T @ dyt).T * d2
    g["dec_b1"] = da2.sum(axis=0)
    g["dec_w1"] = da2.T @ z
    dz = da2 @ p["dec_w1"]
    g["enc_b2"] = dz.sum(axis=0)
    g["enc_w2"] = dz.T @ h1
    da1 = (dz @ p["enc_w2"]) * d1
    g["enc_b1"] = da1.sum(axis=0)
    g["enc_w1"] = da1.T @ x
    return loss, g


def mse(model, x):
    """Mean-squared reconstruction error of a ``(B, N)`` batch."""
    err = reconstruct(model, x) - x
    return float(np.mean(err * err))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` stagnant epochs.

    An epoch is stagnant unless its loss beats the best so far by a relative
    margin ``threshold``.
    """

    def __init__(self, lr, patience, factor, threshold=1e-4):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.stagnant = 0

    def step(self, loss):
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.lr /= self.factor
                self.stagnant = 0
        return self.lr


def train(model, data, split, cfg, log=None):
    """Mini-batch Adam on the reconstruction MSE.

    ``data`` is an ``N x M`` array (or SnapshotMatrix) of deviations. Returns
    ``(best_model, report)`` where ``best_model`` is a copy holding the
    parameters of the epoch with the lowest validation loss. ``log`` is an
    optional ``callable(epoch, train_loss, val_loss, lr)``.
    """
    data = data.data if isinstance(data, SnapshotMatrix) else np.asarray(data, dtype=np.float64)
    if data.shape[0] != model.n_state:
        raise DimensionError(f"data has {data.shape[0]} rows, model expects {model.n_state}")
    rng = np.random.default_rng(cfg.seed)
    x_val = np.ascontiguousarray(data[:, split.validation_indices].T)
    train_idx = np.asarray(split.train_indices)

    work = copy.deepcopy(model)
    work.train_report = None
    params = {k: v.copy() for k, v in work.params().items()}
    work.set_params(params)
    adam = Adam(params)
    sched = PlateauScheduler(cfg.initial_lr, cfg.plateau_patience, cfg.lr_decay_factor)
    report = TrainReport()
    best = {k: v.copy() for k, v in params.items()}
    val_best = np.inf
    since_best = 0
    start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        lr = sched.lr
        order = rng.permutation(train_idx)
        total = 0.0
        for lo in range(0, order.shape[0], cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            x = np.ascontiguousarray(data[:, batch].T)
            loss, grads = loss_and_grads(work, x)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            adam.step(params, grads, lr)
            total += loss * batch.shape[0]
        train_loss = total / order.shape[0]
        val_loss = mse(work, x_val)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.lr.append(lr)
        if log is not None:
            log(epoch, train_loss, val_loss, lr)
        if val_loss < val_best * (1.0 - sched.threshold):
            val_best = val_loss
            report.best_epoch = epoch
            for k, v in params.items():
                best[k][...] = v
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                report.stop_reason = "early-stop"
                break
        sched.step(train_loss)
    else:
        report.stop_reason = "max-epochs"

    work.set_params(best)
    report.best_val_loss = mse(work, x_val)
    report.seconds = time.perf_counter() - start
    work.train_report = report
    return work, report


def nm_projection_error(model, traj, u_ref):
    """``max_n ||u_ref + g(E(u^n - u_ref)) - u^n|| / ||u^n||``."""
    from .pod import relative_errors

    states = traj.states
    if states.shape[1] != model.n_state:
        raise DimensionError(f"states have {states.shape[1]} entries, model expects {model.n_state}")
    approx = u_ref + reconstruct(model, states - u_ref)
    return float(np.max(relative_errors(approx, states)))


# -- checkpoint files ---------------------------------------------------------
#
# "ROMAE001"
# u64 N, h_e, n_s, h_d, nnz
# 8-byte activation tag, NUL padded
# float64 tensors in PARAM_NAMES order (row-major; dec_w2 as CSR values)
# u64 row pointers (N + 1), u64 column indices (nnz)
# u64 flag, then N float64 fixed reference state when the flag is 1
# u64 length + UTF-8 JSON attributes


def write_raw_block(w, tensors, cols, activation=ACTIVATION, reference=None, attrs=None):
    """Write one ROMAE001 block from raw arrays (encoder tensors may be empty)."""
    n_state = tensors["dec_b2"].shape[0]
    w.raw(MAGIC)
    for v in (n_state, tensors["enc_b1"].shape[0], tensors["enc_b2"].shape[0],
              tensors["dec_b1"].shape[0], cols.size):
        w.u64(v)
    w.raw(activation.encode("ascii").ljust(8, b"\0"))
    for name in PARAM_NAMES:
        w.f64_array(tensors[name].ravel())
    indptr, indices = mask_to_csr(cols)
    w.u64_array(indptr)
    w.u64_array(indices)
    if reference is not None:
        w.u64(1)
        w.f64_array(reference)
    else:
        w.u64(0)
    w.json(attrs or {})


def read_raw_block(r):
    """Inverse of :func:`write_raw_block`; returns a dict of the pieces."""
    r.magic(MAGIC)
    n = r.count("N")
    h_e = r.count("encoder width")
    n_s = r.count("latent dimension")
    h_d = r.count("decoder width")
    nnz = r.count("mask nonzeros")
    tag_pos = r.pos
    activation = bytes(r._take(8, "activation tag")).rstrip(b"\0").decode("ascii", "replace")
    if activation != ACTIVATION:
        raise FormatError(f"unsupported activation tag {activation!r}", tag_pos)
    shapes = {
        "enc_w1": (h_e, n),
        "enc_b1": (h_e,),
        "enc_w2": (n_s, h_e),
        "enc_b2": (n_s,),
        "dec_w1": (h_d, n_s),
        "dec_b1": (h_d,),
        "dec_w2": (nnz,),
        "dec_b2": (n,),
    }
    tensors = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        tensors[name] = r.f64_array(int(np.prod(shape)), name).reshape(shape)
    ptr_pos = r.pos
    indptr = r.u64_array(n + 1, "mask row pointers")
    indices = r.u64_array(nnz, "mask column indices")
    width = nnz // n if n else 0
    if n == 0 or nnz != width * n or not np.array_equal(indptr, np.arange(0, nnz + 1, width)):
        raise FormatError("mask must have the same number of entries in every row", ptr_pos)
    if nnz and indices.max() >= h_d:
        raise FormatError("mask column index out of range", ptr_pos)
    flag = r.u64("reference flag")
    reference = r.f64_array(n, "reference state") if flag else None
    attrs = r.json("attributes")
    tensors["dec_w2"] = tensors["dec_w2"].reshape(n, width)
    return {
        "tensors": tensors,
        "cols": indices.reshape(n, width).astype(np.intp),
        "activation": activation,
        "reference": reference,
        "attrs": attrs,
    }


def write_block(w, model):
    attrs = dict(model.attrs)
    attrs["ref_policy"] = model.ref_policy
    if model.train_report is not None:
        rep = model.train_report
        attrs["train"] = {
            "best_epoch": rep.best_epoch,
            "best_val_loss": rep.best_val_loss,
            "stop_reason": rep.stop_reason,
            "epochs_run": rep.epochs_run,
        }
    write_raw_block(w, model.params(), model.mask_cols, model.activation, model.reference, attrs)


def read_block(r):
    raw = read_raw_block(r)
    attrs = raw["attrs"]
    ref_policy = attrs.pop("ref_policy", "initial")
    return MaskedAutoencoder(
        **raw["tensors"], mask_cols=raw["cols"], activation=raw["activation"],
        ref_policy=ref_policy, reference=raw["reference"], attrs=attrs,
    )


def to_bytes(model):
    w = Writer()
    write_block(w, model)
    return w.getvalue()


def from_bytes(buf):
    r = Reader(buf)
    model = read_block(r)
    r.end()
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
