"""From-scratch denoising autoencoder over item content vectors.

The network is a symmetric stack [V, h_1, ..., r, ..., h_1, V]: sigmoid
hidden layers, a tanh encoder output at the middle (so codes land in
(-1, 1)^r), and a sigmoid reconstruction output.  Training corrupts each
input presentation by independently zeroing coordinates with probability
`corruption`; encoding always uses the clean input.

Two objectives share the backward pass: reconstruction pretraining
(squared error to the clean input plus `delta` times the squared weight
norm) and encoder finetuning (squared error between the encoder output
and given item codes; encoder weights only, no decay).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import ContentMatrix
from .errors import ArtifactError, DimensionError, DivergenceError

_CKPT_MAGIC = b"HRDAECKP"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Plain SGD settings for one training stage."""

    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DimensionError("bad training configuration")


class DaeParams:
    """Weights, biases and fixed settings of the autoencoder."""

    __slots__ = ("layer_dims", "weights", "biases", "delta", "corruption")

    def __init__(self, layer_dims, weights, biases, delta, corruption):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 3 or len(layer_dims) % 2 == 0:
            raise DimensionError("layer_dims must be [V, ..., r, ..., V], odd length")
        if any(d < 1 for d in layer_dims):
            raise DimensionError("layer dimensions must be positive")
        if layer_dims != layer_dims[::-1]:
            raise DimensionError("layer_dims must be symmetric")
        n_layers = len(layer_dims) - 1
        if len(weights) != n_layers or len(biases) != n_layers:
            raise DimensionError("need one weight and bias block per layer")
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (layer_dims[l], layer_dims[l + 1]):
                raise DimensionError(f"weight block {l} has shape {w.shape}")
            if b.shape != (layer_dims[l + 1],):
                raise DimensionError(f"bias block {l} has shape {b.shape}")
        if not 0.0 <= corruption < 1.0:
            raise DimensionError("corruption rate must be in [0, 1)")
        if delta < 0.0:
            raise DimensionError("weight decay must be non-negative")
        self.layer_dims = layer_dims
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.delta = float(delta)
        self.corruption = float(corruption)

    @property
    def n_layers(self):
        """Number of weight layers (2L for an L-deep encoder)."""
        return len(self.layer_dims) - 1

    @property
    def encoder_depth(self):
        return self.n_layers // 2

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def code_bits(self):
        return self.layer_dims[self.encoder_depth]

    @classmethod
    def init(cls, layer_dims, delta=1e-4, corruption=0.3, seed=0):
        """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, seeded."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for l in range(len(layer_dims) - 1):
            fan_in, fan_out = layer_dims[l], layer_dims[l + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases, delta, corruption)

    def copy(self):
        return DaeParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.delta,
            self.corruption,
        )

    def check_finite(self, where):
        for w in self.weights + self.biases:
            if not np.all(np.isfinite(w)):
                raise DivergenceError(f"non-finite parameters after {where}")


def _activate(z, layer_index, encoder_depth, n_layers):
    if layer_index == encoder_depth:
        return np.tanh(z)
    # hidden layers and the reconstruction output are sigmoid; exp overflow
    # on large negative z saturates to exactly 0, which is what we want
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _activation_grad(a, layer_index, encoder_depth):
    if layer_index == encoder_depth:
        return 1.0 - a * a
    return a * (1.0 - a)


def corrupt(x, q, seed):
    """Independently zero each coordinate with probability q (seeded).

    `seed` may be an integer or a Generator; q = 0 returns a copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= q < 1.0:
        raise DimensionError("corruption rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    mask = rng.random(x.shape) >= q
    return x * mask


def _forward(params, x_in, depth):
    """Activations [a_0 .. a_depth] for (possibly corrupted) input rows."""
    acts = [np.atleast_2d(np.asarray(x_in, dtype=np.float64))]
    L = params.encoder_depth
    for l in range(depth):
        z = acts[-1] @ params.weights[l] + params.biases[l]
        acts.append(_activate(z, l + 1, L, params.n_layers))
    return acts


def encode(params, x):
    """Deterministic encoder output f = tanh(...) for clean content rows.

    Accepts a single vector (V,) or a batch (N, V); returns matching shape
    with r columns.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != params.input_dim:
        raise DimensionError(
            f"input width {x.shape[-1]} does not match V={params.input_dim}"
        )
    out = _forward(params, x, params.encoder_depth)[-1]
    return out[0] if single else out


def reconstruct(params, x):
    """Full-depth forward pass (clean input), mainly a test utility."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = _forward(params, x, params.n_layers)[-1]
    return out[0] if single else out


def _grads_reconstruction(params, x_in, x_clean):
    """Loss and gradients of mean ||x_clean - dae(x_in)||^2 + delta ||W||^2."""
    acts = _forward(params, x_in, params.n_layers)
    batch = acts[0].shape[0]
    L = params.encoder_depth
    resid = acts[-1] - np.atleast_2d(x_clean)
    loss = float((resid**2).sum()) / batch
    loss += params.delta * sum(float((w**2).sum()) for w in params.weights)
    g = (2.0 / batch) * resid * _activation_grad(acts[-1], params.n_layers, L)
    grads_w = [None] * params.n_layers
    grads_b = [None] * params.n_layers
    for l in range(params.n_layers - 1, -1, -1):
        grads_w[l] = acts[l].T @ g + 2.0 * params.delta * params.weights[l]
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ params.weights[l].T) * _activation_grad(acts[l], l, L)
    return loss, grads_w, grads_b


def _grads_encoding(params, x_in, codes):
    """Loss and encoder gradients of mean ||codes - encode(x_in)||^2."""
    L = params.encoder_depth
    acts = _forward(params, x_in, L)
    batch = acts[0].shape[0]
    resid = acts[-1] - np.atleast_2d(codes)
    loss = float((resid**2).sum()) / batch
    g = (2.0 / batch) * resid * _activation_grad(acts[-1], L, L)
    grads_w = [None] * L
    grads_b = [None] * L
    for l in range(L - 1, -1, -1):
        grads_w[l] = acts[l].T @ g
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ params.weights[l].T) * _activation_grad(acts[l], l, L)
    return loss, grads_w, grads_b


def _content_rows(content):
    if isinstance(content, ContentMatrix):
        return content.vectors
    return np.asarray(content, dtype=np.float64)


def _sgd_epochs(params, rows, targets, cfg, depth, grad_fn, stage):
    """Shared SGD loop; `targets` aligns with `rows` (clean input or codes)."""
    rng = np.random.default_rng(cfg.seed)
    losses = []
    n = rows.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x_in = corrupt(rows[idx], params.corruption, rng)
            loss, gw, gb = grad_fn(params, x_in, targets[idx])
            epoch_loss += loss * idx.size
            for l in range(depth):
                params.weights[l] -= cfg.learning_rate * gw[l]
                params.biases[l] -= cfg.learning_rate * gb[l]
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"{stage} diverged at epoch {epoch}")
        params.check_finite(f"{stage} epoch {epoch}")
        losses.append(epoch_loss)
    return losses


def pretrain(params, content, cfg):
    """Reconstruction pretraining; mutates params, returns epoch losses.

    Each presentation is corrupted independently; the target is the clean
    row.  With cfg.epochs = 0 the parameters are untouched.
    """
    rows = _content_rows(content)
    if rows.shape[1] != params.input_dim:
        raise DimensionError("content width does not match the network input")
    return _sgd_epochs(
        params, rows, rows, cfg, params.n_layers, _grads_reconstruction, "pretrain"
    )


def finetune(params, content, item_codes, cfg):
    """Pull encoder outputs toward item codes; decoder layers frozen.

    `item_codes` is a CodeMatrix or an (n_items, r) sign array.  Inputs are
    corrupted per presentation like in pretraining; there is no weight
    decay in this stage.  Mutates params, returns epoch losses.
    """
    rows = _content_rows(content)
    codes = item_codes.to_signs() if hasattr(item_codes, "to_signs") else item_codes
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape != (rows.shape[0], params.code_bits):
        raise DimensionError(
            f"item codes must have shape {(rows.shape[0], params.code_bits)}"
        )
    return _sgd_epochs(
        params, rows, codes, cfg, params.encoder_depth, _grads_encoding, "finetune"
    )


# ---------------------------------------------------------------------------
# gradient checking


def _flatten_params(params, depth):
    blocks = []
    for l in range(depth):
        blocks.append(params.weights[l].ravel())
        blocks.append(params.biases[l].ravel())
    return np.concatenate(blocks)


def _unflatten_into(params, theta, depth):
    at = 0
    for l in range(depth):
        w = params.weights[l]
        params.weights[l] = theta[at : at + w.size].reshape(w.shape)
        at += w.size
        b = params.biases[l]
        params.biases[l] = theta[at : at + b.size].reshape(b.shape)
        at += b.size


def gradient_check(params, x, target, path="full", step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Args:
        params: network, ideally tiny (hundreds of parameters).
        x: input rows as presented (already corrupted if desired).
        target: clean rows for path="full" (reconstruction loss with decay)
            or code rows for path="encoder" (finetune loss).
        path: "full" or "encoder".
        step: central-difference half step.

    Returns:
        max_p |analytic_p - numeric_p| / max(|analytic_p| + |numeric_p|, 1e-4),
        treating a pair both below 1e-10 as exact agreement.
    """
    if path == "full":
        depth, grad_fn = params.n_layers, _grads_reconstruction
    elif path == "encoder":
        depth, grad_fn = params.encoder_depth, _grads_encoding
    else:
        raise ValueError(f"unknown path {path!r}")
    work = params.copy()
    _, gw, gb = grad_fn(work, x, target)
    analytic = np.concatenate(
        [np.concatenate([gw[l].ravel(), gb[l].ravel()]) for l in range(depth)]
    )
    theta = _flatten_params(work, depth)
    numeric = np.empty_like(theta)
    for p in range(theta.size):
        bumped = theta.copy()
        bumped[p] = theta[p] + step
        _unflatten_into(work, bumped, depth)
        up = grad_fn(work, x, target)[0]
        bumped[p] = theta[p] - step
        _unflatten_into(work, bumped, depth)
        down = grad_fn(work, x, target)[0]
        numeric[p] = (up - down) / (2.0 * step)
    _unflatten_into(work, theta, depth)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-4)
    err = np.abs(analytic - numeric) / scale
    err[(np.abs(analytic) < 1e-10) & (np.abs(numeric) < 1e-10)] = 0.0
    return float(err.max())


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "HRDAECKP" | u32 version | u32 n_dims | n_dims * u32 layer dims |
# f64 delta | f64 corruption | per layer: W row-major then b, all f64.
# Everything little-endian.


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params.layer_dims)))
        fh.write(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
        fh.write(struct.pack("<dd", params.delta, params.corruption))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def checkpoint_bytes(params):
    """Checkpoint serialisation as bytes (embedded in model artifacts)."""
    import io

    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(params.layer_dims)))
    buf.write(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
    buf.write(struct.pack("<dd", params.delta, params.corruption))
    for w, b in zip(params.weights, params.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(blob):
    view = memoryview(blob)
    if bytes(view[:8]) != _CKPT_MAGIC:
        raise ArtifactError("not an autoencoder checkpoint")
    version, n_dims = struct.unpack_from("<II", view, 8)
    if version != _CKPT_VERSION:
        raise ArtifactError(f"unsupported checkpoint version {version}")
    at = 16
    dims = list(struct.unpack_from(f"<{n_dims}I", view, at))
    at += 4 * n_dims
    delta, corruption = struct.unpack_from("<dd", view, at)
    at += 16
    weights, biases = [], []
    for l in range(n_dims - 1):
        w_count = dims[l] * dims[l + 1]
        w = np.frombuffer(view, dtype="<f8", count=w_count, offset=at).reshape(
            dims[l], dims[l + 1]
        )
        at += 8 * w_count
        b = np.frombuffer(view, dtype="<f8", count=dims[l + 1], offset=at)
        at += 8 * dims[l + 1]
        weights.append(w.copy())
        biases.append(b.copy())
    if at != len(blob):
        raise ArtifactError("checkpoint has trailing or missing bytes")
    return DaeParams(dims, weights, biases, delta, corruption)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
