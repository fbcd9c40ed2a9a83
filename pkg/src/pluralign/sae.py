"""Sparse autoencoder over residual-stream vectors.

    code  = relu(W_enc h + b_enc)             (m = expansion * d entries)
    recon = W_dec code + b_dec
    loss  = mean_b ||recon - h||^2 / d  +  lambda * mean_b sum_i |code_i|

Training is full-batch gradient descent with hand-derived gradients.
Decoder columns are renormalised to unit length after every step so the L1
penalty cannot be dodged by shrinking codes and growing the decoder.
Returned parameters are float64 arrays holding float32-representable
values, so checkpoints round-trip exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .errors import CheckpointError, InvalidArgumentError

MIN_TRAINING_VECTORS = 32


@dataclass(frozen=True)
class SaeConfig:
    input_dim: int
    expansion: int = 8
    sparsity_coeff: float = 1e-3
    lr: float = 0.05
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be positive")
        if self.expansion < 1:
            raise InvalidArgumentError("expansion must be >= 1")
        if self.sparsity_coeff < 0:
            raise InvalidArgumentError("sparsity_coeff must be nonnegative")
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be positive")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be nonnegative")

    @property
    def code_dim(self) -> int:
        return self.expansion * self.input_dim


@dataclass
class SaeParams:
    enc_weight: np.ndarray  # (m, d)
    enc_bias: np.ndarray  # (m,)
    dec_weight: np.ndarray  # (d, m)
    dec_bias: np.ndarray  # (d,)

    @property
    def input_dim(self) -> int:
        return self.enc_weight.shape[1]

    @property
    def code_dim(self) -> int:
        return self.enc_weight.shape[0]

    def copy(self) -> "SaeParams":
        return SaeParams(*(a.copy() for a in self.arrays()))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.enc_weight, self.enc_bias, self.dec_weight, self.dec_bias)

    def equals(self, other: "SaeParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


PARAM_NAMES = ("enc_weight", "enc_bias", "dec_weight", "dec_bias")


def _vec(h, n: int, what: str) -> np.ndarray:
    h = np.asarray(h)
    if h.dtype != np.float32:
        h = h.astype(np.float64, copy=False)
    if h.shape[-1] != n:
        raise InvalidArgumentError(f"{what} has length {h.shape[-1]}, expected {n}")
    return h


def pre_activation(params: SaeParams, h) -> np.ndarray:
    h = _vec(h, params.input_dim, "residual")
    return h @ params.enc_weight.T + params.enc_bias


def encode(params: SaeParams, h) -> np.ndarray:
    """Rectified code for a residual vector (or a batch of them, row-wise)."""
    return np.maximum(pre_activation(params, h), 0.0)


def decode(params: SaeParams, z) -> np.ndarray:
    """Affine decoder; accepts any real code, rectified or not."""
    z = _vec(z, params.code_dim, "code")
    return z @ params.dec_weight.T + params.dec_bias


def sae_loss(params: SaeParams, batch, sparsity_coeff: float) -> tuple[float, float, float]:
    """(mse, l1, total) averaged over the batch."""
    H = np.atleast_2d(_vec(batch, params.input_dim, "batch row"))
    if H.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    Z = encode(params, H)
    R = decode(params, Z) - H
    mse = float(np.mean(np.sum(R * R, axis=1) / params.input_dim))
    l1 = float(np.mean(np.sum(np.abs(Z), axis=1)))
    return mse, l1, mse + sparsity_coeff * l1


def sae_gradients(params: SaeParams, batch, sparsity_coeff: float) -> SaeParams:
    """Analytic gradient of the total loss, packed as an SaeParams.

    The rectifier's derivative at exactly zero pre-activation is taken as 0.
    """
    H = np.atleast_2d(_vec(batch, params.input_dim, "batch row"))
    B, d = H.shape
    U = pre_activation(params, H)
    active = U > 0
    Z = np.where(active, U, 0.0)
    R = decode(params, Z) - H
    g_recon = (2.0 / (B * d)) * R  # d loss / d recon
    g_dec_w = g_recon.T @ Z
    g_dec_b = g_recon.sum(axis=0)
    mask = active.astype(R.dtype)
    g_z = g_recon @ params.dec_weight + R.dtype.type(sparsity_coeff / B) * mask
    g_u = g_z * mask
    g_enc_w = g_u.T @ H
    g_enc_b = g_u.sum(axis=0)
    return SaeParams(g_enc_w, g_enc_b, g_dec_w, g_dec_b)


def normalize_decoder(params: SaeParams) -> None:
    norms = np.linalg.norm(params.dec_weight, axis=0)
    params.dec_weight /= np.where(norms > 0, norms, 1.0)


def init_sae(config: SaeConfig) -> SaeParams:
    d, m = config.input_dim, config.code_dim
    rng = np.random.default_rng(config.seed)
    enc_w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d))
    params = SaeParams(enc_w, np.zeros(m), enc_w.T.copy(), np.zeros(d))
    normalize_decoder(params)
    return _round_f32(params)


def _round_f32(params: SaeParams) -> SaeParams:
    return SaeParams(*(a.astype(np.float32).astype(np.float64) for a in params.arrays()))


def train_sae(
    activations,
    config: SaeConfig,
    history: list | None = None,
    compute_dtype=np.float32,
) -> SaeParams:
    """Full-batch gradient descent for ``config.epochs`` steps.

    Steps run in ``compute_dtype`` (float32 by default, roughly twice as fast
    as float64 here).  If ``history`` is a list, the (mse, l1, total) loss
    before every step and after the last one is appended to it.
    """
    H = np.asarray(activations, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < MIN_TRAINING_VECTORS:
        raise InvalidArgumentError(
            f"need at least {MIN_TRAINING_VECTORS} activation vectors, got {H.shape[0] if H.ndim == 2 else 0}"
        )
    if H.shape[1] != config.input_dim:
        raise InvalidArgumentError(f"activations have width {H.shape[1]}, expected {config.input_dim}")
    params = init_sae(config)
    if config.epochs == 0:
        return params
    Hc = H.astype(compute_dtype)
    work = SaeParams(*(a.astype(compute_dtype) for a in params.arrays()))
    lr = compute_dtype(config.lr)
    for _ in range(config.epochs):
        if history is not None:
            history.append(sae_loss(work, Hc, config.sparsity_coeff))
        grads = sae_gradients(work, Hc, config.sparsity_coeff)
        for p, g in zip(work.arrays(), grads.arrays()):
            p -= lr * g.astype(compute_dtype, copy=False)
        normalize_decoder(work)
    params = SaeParams(*(a.astype(np.float64) for a in work.arrays()))
    normalize_decoder(params)
    params = _round_f32(params)
    if history is not None:
        history.append(sae_loss(params, H, config.sparsity_coeff))
    return params


def gradient_check(
    params: SaeParams,
    batch,
    sparsity_coeff: float,
    epsilon: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    grads: SaeParams | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled uniformly over all four tensors.  Encoder
    coordinates whose perturbation would push some pre-activation across the
    rectifier kink are skipped and replaced by fresh draws.  ``grads`` lets a
    caller supply (e.g. deliberately corrupted) analytic gradients.
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidArgumentError("epsilon must lie in (0, 1e-2]")
    H = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if grads is None:
        grads = sae_gradients(params, H, sparsity_coeff)
    work = params.copy()
    sizes = [a.size for a in work.arrays()]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    U = pre_activation(params, H)
    abs_h = np.abs(H)

    def near_kink(t: int, flat: int) -> bool:
        if t == 0:
            i, j = divmod(flat, params.input_dim)
            return bool(np.any(np.abs(U[:, i]) <= 2 * epsilon * abs_h[:, j]))
        if t == 1:
            return bool(np.any(np.abs(U[:, flat]) <= 2 * epsilon))
        return False

    def loss_total():
        return sae_loss(work, H, sparsity_coeff)[2]

    checked, worst, attempts = 0, 0.0, 0
    while checked < n_coords:
        attempts += 1
        if attempts > 100 * n_coords:
            raise InvalidArgumentError("could not find enough coordinates away from the kink")
        g = int(rng.integers(offsets[-1]))
        t = int(np.searchsorted(offsets, g, side="right") - 1)
        flat = g - offsets[t]
        if near_kink(t, flat):
            continue
        arr = work.arrays()[t].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + epsilon
        up = loss_total()
        arr[flat] = orig - epsilon
        down = loss_total()
        arr[flat] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads.arrays()[t].reshape(-1)[flat]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return worst


def sparsity_fraction(params: SaeParams, batch) -> float:
    """Fraction of code entries exactly zero over ``batch``."""
    return float(np.mean(encode(params, np.atleast_2d(batch)) == 0.0))


# --- checkpoints ------------------------------------------------------------


def save_sae(params: SaeParams, config: SaeConfig, path, layer: int | None = None) -> str:
    header = {"kind": "sae", "config": asdict(config), "layer": layer}
    tensors = dict(zip(PARAM_NAMES, params.arrays()))
    return checkpoint.write(path, checkpoint.SAE_MAGIC, header, tensors)


def load_sae(path) -> tuple[SaeParams, SaeConfig, dict]:
    header, tensors = checkpoint.read(path, checkpoint.SAE_MAGIC)
    if list(tensors) != list(PARAM_NAMES):
        raise CheckpointError("SAE checkpoint has unexpected tensors")
    try:
        config = SaeConfig(**header["config"])
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise CheckpointError(f"bad SAE header: {exc}") from exc
    params = SaeParams(*(tensors[n].astype(np.float64) for n in PARAM_NAMES))
    if params.input_dim != config.input_dim or params.code_dim != config.code_dim:
        raise CheckpointError("SAE tensor shapes disagree with the header config")
    return params, config, header


def params_checksum(params: SaeParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
