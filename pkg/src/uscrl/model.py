"""Representation models with norm constraints, plus a linear probe.

Two families share one forward/backward core:

* ``LinearModel``: x -> A x with caps on the spectral norm of A and on
  the (2,1)-norm of A^T (sum of Euclidean norms of A's rows).
* ``MlpModel``: composition of linear layers and 1-Lipschitz activations,
  each layer under its own spectral cap.

Constraints are enforced by multiplicative projection after every SGD
step; spectral norms come from power iteration. Backward computes the
exact gradient of the mean clipped tuple loss, including the zero
gradient on clipped tuples.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledDataset
from .errors import ConfigError, FormatError, NumericError
from .loss import LossSpec, loss_grad, loss_value, scores_from_reps

CHECKPOINT_MAGIC = b"USCRLW01"
CHECKPOINT_VERSION = 1

ACTIVATION_XI = {"relu": 1.0, "identity": 1.0}


def _apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}")


def _activation_deriv(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {kind!r}")


def spectral_norm(a: np.ndarray, tol: float = 1e-8, max_iters: int = 500) -> float:
    """Largest singular value by block power iteration on A^T A.

    A single power vector stalls when the two leading singular values
    nearly tie (the per-step change sits just above any tolerance for
    ~1/gap iterations), so we iterate an orthonormal block of up to 8
    vectors and accept the top Ritz value once its eigen-residual falls
    below tol relative, which covers exact ties as well. Raises a
    diagnostic error with the iteration count if that never happens.
    The start block is drawn from a fixed seed so results are
    reproducible run to run.
    """

    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError("spectral_norm expects a matrix")
    if not np.isfinite(a).all():
        raise NumericError("spectral_norm: non-finite entries")
    if a.size == 0 or not a.any():
        return 0.0
    n = a.shape[1]
    block = min(8, n)
    rng = np.random.default_rng(0xA5)
    v, _ = np.linalg.qr(rng.standard_normal((n, block)))
    sigma = 0.0
    for it in range(1, max_iters + 1):
        bv = a.T @ (a @ v)
        t = v.T @ bv
        evals, evecs = np.linalg.eigh((t + t.T) / 2.0)
        lam = float(evals[-1])
        if lam <= 0.0:
            # the block fell into the null space of a nonzero matrix;
            # reseed and keep iterating
            v, _ = np.linalg.qr(rng.standard_normal((n, block)))
            continue
        top = v @ evecs[:, -1]
        resid = np.linalg.norm(a.T @ (a @ top) - lam * top)
        sigma = math.sqrt(lam)
        # eigen-residual certifies |lam - lambda_1| <= resid once the block
        # has locked onto the leading subspace; a change-based stop instead
        # fires mid-drift on clustered spectra and returns a stale value
        if resid <= tol * lam:
            return sigma
        v, _ = np.linalg.qr(bv)
    raise NumericError(
        f"power iteration did not converge within {max_iters} iterations "
        f"(last estimate {sigma:.6g})")


def row_norm_sum(a: np.ndarray) -> float:
    """(2,1)-norm of A^T: sum of Euclidean norms of A's rows."""
    return float(np.linalg.norm(a, axis=1).sum())


@dataclass
class LinearModel:
    a_mat: np.ndarray          # (out_dim, in_dim)
    max_col_sum: float         # cap on ||A^T||_{2,1}
    max_spectral: float

    def __post_init__(self):
        self.a_mat = np.asarray(self.a_mat, dtype=np.float64)
        if self.a_mat.ndim != 2:
            raise ConfigError("a_mat must be a matrix")
        if self.max_col_sum <= 0 or self.max_spectral <= 0:
            raise ConfigError("norm caps must be positive")

    @property
    def in_dim(self) -> int:
        return self.a_mat.shape[1]

    @property
    def out_dim(self) -> int:
        return self.a_mat.shape[0]

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.a_mat]

    @property
    def activations(self) -> list[str]:
        return ["identity"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.a_mat.T

    def set_weights(self, ws):
        (self.a_mat,) = ws


@dataclass
class MlpModel:
    layer_weights: list        # [(d_1, d_0), (d_2, d_1), ...]
    spectral_caps: list        # per-layer cap s_l
    layer_activations: list    # per-layer activation kind

    def __post_init__(self):
        self.layer_weights = [np.asarray(w, dtype=np.float64) for w in self.layer_weights]
        L = len(self.layer_weights)
        if L == 0:
            raise ConfigError("at least one layer required")
        if len(self.spectral_caps) != L or len(self.layer_activations) != L:
            raise ConfigError("caps/activations must match layer count")
        for l in range(1, L):
            if self.layer_weights[l].shape[1] != self.layer_weights[l - 1].shape[0]:
                raise ConfigError(f"layer {l} input dim mismatch")
        for s in self.spectral_caps:
            if s <= 0:
                raise ConfigError("spectral caps must be positive")
        for kind in self.layer_activations:
            if kind not in ACTIVATION_XI:
                raise ConfigError(f"unknown activation {kind!r}")

    @property
    def depth(self) -> int:
        return len(self.layer_weights)

    @property
    def in_dim(self) -> int:
        return self.layer_weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layer_weights[-1].shape[0]

    @property
    def weights(self) -> list[np.ndarray]:
        return self.layer_weights

    @property
    def activations(self) -> list[str]:
        return self.layer_activations

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, kind in zip(self.layer_weights, self.layer_activations):
            h = _apply_activation(kind, h @ w.T)
        return h

    def set_weights(self, ws):
        self.layer_weights = list(ws)


def param_count(model) -> int:
    return int(sum(w.size for w in model.weights))


def composition_gain(model) -> float:
    """Upper bound factor on ||f(x)|| / ||x||: product of sigma_l * xi_l."""
    gain = 1.0
    for w, kind in zip(model.weights, model.activations):
        gain *= spectral_norm(w) * ACTIVATION_XI[kind]
    return gain


def make_linear(in_dim: int, out_dim: int, max_col_sum: float,
                max_spectral: float, seed: int) -> LinearModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, then projected."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(in_dim)
    a = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    model = LinearModel(a, max_col_sum=max_col_sum, max_spectral=max_spectral)
    return project(model)


def make_mlp(widths, spectral_caps, seed: int,
             activations=None) -> MlpModel:
    """widths = [in, hidden..., out]; ReLU everywhere unless overridden."""
    if len(widths) < 2:
        raise ConfigError("widths must list input and output dims")
    L = len(widths) - 1
    if activations is None:
        activations = ["relu"] * L
    if np.isscalar(spectral_caps):
        spectral_caps = [float(spectral_caps)] * L
    rng = np.random.default_rng(seed)
    ws = []
    for l in range(L):
        fan_in = widths[l]
        bound = 1.0 / math.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(widths[l + 1], fan_in)))
    model = MlpModel(ws, list(spectral_caps), list(activations))
    return project(model)


def project(model):
    """Scale weights down onto the constraint set; idempotent.

    Multiplicative scaling shrinks every norm by the same factor, so one
    pass lands exactly on (or inside) each cap.
    """

    if isinstance(model, LinearModel):
        a = model.a_mat
        sig = spectral_norm(a)
        if sig > model.max_spectral:
            a = a * (model.max_spectral / sig)
        cs = row_norm_sum(a)
        if cs > model.max_col_sum:
            a = a * (model.max_col_sum / cs)
        model.a_mat = a
        return model
    for l, (w, cap) in enumerate(zip(model.layer_weights, model.spectral_caps)):
        sig = spectral_norm(w)
        if sig > cap:
            model.layer_weights[l] = w * (cap / sig)
    return model


def _forward_cached(model, x: np.ndarray):
    """Forward pass keeping pre-activations and layer inputs for backprop."""
    h = np.asarray(x, dtype=np.float64)
    inputs, preacts = [], []
    for w, kind in zip(model.weights, model.activations):
        inputs.append(h)
        z = h @ w.T
        preacts.append(z)
        h = _apply_activation(kind, z)
    return h, inputs, preacts


def _backprop(model, inputs, preacts, grad_out):
    """Gradients of sum(grad_out * output) w.r.t. every layer weight."""
    grads = [None] * len(model.weights)
    delta = grad_out
    for l in range(len(model.weights) - 1, -1, -1):
        delta = delta * _activation_deriv(model.activations[l], preacts[l])
        grads[l] = delta.T @ inputs[l]
        if l > 0:
            delta = delta @ model.weights[l]
    return grads


def tuple_batch_backward(model, ds: LabeledDataset, anchors, positives,
                         negatives, spec: LossSpec):
    """Mean clipped loss over a tuple batch and its exact weight gradients.

    Only the unique samples referenced by the batch are pushed through
    the network; per-tuple score gradients are scattered back onto those
    rows before the single backward pass.
    """

    anchors = np.asarray(anchors, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 2:
        raise ConfigError("negatives must be (batch, k)")
    b, k = negatives.shape

    rows, inverse = np.unique(
        np.concatenate([anchors, positives, negatives.ravel()]),
        return_inverse=True)
    ia = inverse[:b]
    ip = inverse[b:2 * b]
    ineg = inverse[2 * b:].reshape(b, k)

    reps, inputs, preacts = _forward_cached(model, ds.x[rows])
    v = scores_from_reps(reps, ia, ip, ineg)
    losses = loss_value(spec, v)
    gv = loss_grad(spec, v) / b  # gradient of the batch mean

    grad_reps = np.zeros_like(reps)
    ra = reps[ia]
    diff = reps[ip][:, None, :] - reps[ineg]
    np.add.at(grad_reps, ia, np.einsum("bk,bkd->bd", gv, diff))
    np.add.at(grad_reps, ip, gv.sum(axis=1)[:, None] * ra)
    np.add.at(grad_reps, ineg.ravel(),
              (-gv[..., None] * ra[:, None, :]).reshape(b * k, -1))

    grads = _backprop(model, inputs, preacts, grad_reps)
    if not all(np.isfinite(g).all() for g in grads):
        raise NumericError("non-finite gradient in tuple batch backward")
    return grads, float(losses.mean())


@dataclass
class LinearProbe:
    w: np.ndarray  # (num_classes, d)
    b: np.ndarray  # (num_classes,)
    degenerate: bool = False

    def predict(self, reps: np.ndarray) -> np.ndarray:
        scores = reps @ self.w.T + self.b
        return scores.argmax(axis=1)

    def accuracy(self, reps: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(reps) == np.asarray(labels)).mean())


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(reps: np.ndarray, labels: np.ndarray, num_classes: int,
              epochs: int = 40, lr: float = 0.5, seed: int = 0,
              batch_size: int = 64, val_fraction: float = 0.2):
    """Softmax-regression probe on frozen representations, seeded SGD.

    Returns (probe, held-out accuracy). A single-class input yields a
    degenerate probe (constant prediction) and a warning; the reported
    accuracy is then the majority-class rate on the held-out part.
    """

    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = reps.shape[0]
    if n < 2:
        raise ConfigError("probe needs at least 2 samples")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val, train = perm[:n_val], perm[n_val:]
    if train.size == 0:
        train, val = val, val

    present = np.unique(labels[train])
    if present.size < 2:
        warnings.warn("probe training labels contain a single class; "
                      "returning a degenerate constant probe")
        w = np.zeros((num_classes, reps.shape[1]))
        bias = np.zeros(num_classes)
        bias[present[0] if present.size else 0] = 1.0
        probe = LinearProbe(w, bias, degenerate=True)
        return probe, probe.accuracy(reps[val], labels[val])

    w = np.zeros((num_classes, reps.shape[1]))
    bias = np.zeros(num_classes)
    onehot = np.eye(num_classes)
    for _ in range(epochs):
        order = rng.permutation(train.size)
        for lo in range(0, train.size, batch_size):
            idx = train[order[lo:lo + batch_size]]
            xb, yb = reps[idx], labels[idx]
            p = _softmax(xb @ w.T + bias)
            g = (p - onehot[yb]) / idx.size
            w -= lr * (g.T @ xb)
            bias -= lr * g.sum(axis=0)
    probe = LinearProbe(w, bias)
    return probe, probe.accuracy(reps[val], labels[val])


def _model_meta(model) -> dict:
    if isinstance(model, LinearModel):
        return {"family": "linear",
                "shapes": [list(model.a_mat.shape)],
                "max_col_sum": model.max_col_sum,
                "max_spectral": model.max_spectral}
    return {"family": "mlp",
            "shapes": [list(w.shape) for w in model.layer_weights],
            "spectral_caps": [float(s) for s in model.spectral_caps],
            "activations": list(model.layer_activations)}


def save_checkpoint(model, path_prefix: str) -> tuple[str, str]:
    """Write <prefix>.json (shapes, constraints) and <prefix>.bin (weights).

    The blob is little-endian float64 behind a 16-byte header: 8 magic
    bytes, uint32 format version, uint32 array count.
    """

    meta = _model_meta(model)
    meta["version"] = CHECKPOINT_VERSION
    meta["blob"] = path_prefix.rsplit("/", 1)[-1] + ".bin"
    json_path, bin_path = path_prefix + ".json", path_prefix + ".bin"
    with open(bin_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.weights)))
        for w in model.weights:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    with open(json_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return json_path, bin_path


def load_checkpoint(path_prefix: str):
    json_path, bin_path = path_prefix + ".json", path_prefix + ".bin"
    with open(json_path) as f:
        meta = json.load(f)
    shapes = [tuple(s) for s in meta["shapes"]]
    with open(bin_path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:8] != CHECKPOINT_MAGIC:
            raise FormatError("checkpoint magic: bad or truncated header")
        version, count = struct.unpack("<II", head[8:])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version: unsupported {version}")
        if count != len(shapes):
            raise FormatError(
                f"checkpoint arrays: blob has {count}, meta lists {len(shapes)}")
        ws = []
        for shape in shapes:
            need = int(np.prod(shape)) * 8
            buf = f.read(need)
            if len(buf) != need:
                raise FormatError("checkpoint payload: truncated weight data")
            ws.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
        if f.read(1):
            raise FormatError("checkpoint payload: trailing bytes")
    if meta["family"] == "linear":
        return LinearModel(ws[0], max_col_sum=meta["max_col_sum"],
                           max_spectral=meta["max_spectral"])
    return MlpModel(ws, meta["spectral_caps"], meta["activations"])
