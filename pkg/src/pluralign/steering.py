"""Steering vectors in SAE code space.

A steering vector for annotator a is the mean, over N contrastive pairs, of
``encode(f_l(x | c_a)) - encode(f_l(x))`` where f_l is the post-block
residual at the prompt's last token.  At inference the residual h at that
position becomes

    h + decode(encode(h) + scale * s) - decode(encode(h))

which leaves the SAE's reconstruction error in place, so scale 0 is an exact
no-op.  The shifted code is not re-rectified.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .numerics import softmax
from .sae import SaeParams, decode, encode
from .tinylm import (
    InterventionSpec,
    PositionPolicy,
    TinyLM,
    final_logits_batch,
    forward,
    forward_with_intervention,
)

VECTOR_FILE_VERSION = 1


@dataclass(frozen=True)
class ContrastivePair:
    with_feedback: tuple[int, ...]
    without_feedback: tuple[int, ...]
    annotator_id: str

    def __post_init__(self):
        if not self.with_feedback or not self.without_feedback:
            raise InvalidArgumentError("contrastive pair sequences must be non-empty")


@dataclass(frozen=True)
class SteeringVector:
    annotator_id: str
    layer: int
    vector: np.ndarray
    n_pairs: int
    sae_checksum: str = ""

    def __post_init__(self):
        if self.n_pairs < 1:
            raise InvalidArgumentError("n_pairs must be >= 1")
        if not np.all(np.isfinite(self.vector)):
            raise InvalidArgumentError("steering vector has non-finite entries")


def capture_activation(model: TinyLM, x, layer: int) -> np.ndarray:
    """Post-block residual at ``layer`` for the last token of ``x``."""
    _, caps = forward(model, x, [layer])
    return caps[-1].vector


def pair_differences(model: TinyLM, sae: SaeParams, pairs: Sequence[ContrastivePair], layer: int) -> np.ndarray:
    """Per-pair code differences, shape (N, m)."""
    _check_dims(model, sae)
    return np.stack(
        [
            encode(sae, capture_activation(model, p.with_feedback, layer))
            - encode(sae, capture_activation(model, p.without_feedback, layer))
            for p in pairs
        ]
    )


def extract_steering_vector(
    model: TinyLM,
    sae: SaeParams,
    pairs: Sequence[ContrastivePair],
    layer: int,
    sae_checksum: str = "",
) -> SteeringVector:
    if not pairs:
        raise InvalidArgumentError("no contrastive pairs")
    ids = {p.annotator_id for p in pairs}
    if len(ids) != 1:
        raise InvalidArgumentError(f"pairs mix annotators: {sorted(ids)}")
    diffs = pair_differences(model, sae, pairs, layer)
    return SteeringVector(ids.pop(), layer, diffs.sum(axis=0) / len(pairs), len(pairs), sae_checksum)


def _check_dims(model: TinyLM, sae: SaeParams) -> None:
    if sae.input_dim != model.config.d_model:
        raise InvalidArgumentError(
            f"SAE input_dim {sae.input_dim} does not match d_model {model.config.d_model}"
        )


def steering_spec(
    sae: SaeParams,
    sv: SteeringVector,
    scale: float,
    position_policy: PositionPolicy = PositionPolicy.LAST_POSITION,
) -> InterventionSpec:
    if sv.vector.shape != (sae.code_dim,):
        raise InvalidArgumentError(
            f"steering vector length {sv.vector.shape} does not match SAE code dim {sae.code_dim}"
        )
    shift = float(scale) * sv.vector

    def delta(h: np.ndarray) -> np.ndarray:
        z = encode(sae, h)
        return h + (decode(sae, z + shift) - decode(sae, z))

    return InterventionSpec(sv.layer, delta, PositionPolicy(position_policy), vectorized=True)


def steer_forward(
    model: TinyLM,
    sae: SaeParams,
    sv: SteeringVector,
    scale: float,
    x,
    position_policy: PositionPolicy = PositionPolicy.LAST_POSITION,
) -> np.ndarray:
    """Final-position logits with the steering vector added at ``sv.layer``."""
    _check_dims(model, sae)
    logits = forward_with_intervention(model, x, steering_spec(sae, sv, scale, position_policy))
    return logits[-1]


def steered_distribution(model, sae, sv, scale, x, temperature: float = 1.0) -> np.ndarray:
    return softmax(steer_forward(model, sae, sv, scale, x), temperature)


def steered_logits_batch(
    model: TinyLM,
    sae: SaeParams,
    sv: SteeringVector,
    scale: float,
    sequences: Sequence[Sequence[int]],
) -> np.ndarray:
    """Final-position steered logits for many prompts at once, shape (B, V)."""
    _check_dims(model, sae)
    return final_logits_batch(model, sequences, steering_spec(sae, sv, scale))


# --- persistence ------------------------------------------------------------


def dumps_vector(sv: SteeringVector) -> str:
    payload = {
        "version": VECTOR_FILE_VERSION,
        "annotator_id": sv.annotator_id,
        "layer": int(sv.layer),
        "n_pairs": int(sv.n_pairs),
        "sae_checksum": sv.sae_checksum,
        "vector": [float(v) for v in sv.vector],
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def loads_vector(text: str) -> SteeringVector:
    try:
        d = json.loads(text)
        return SteeringVector(
            annotator_id=str(d["annotator_id"]),
            layer=int(d["layer"]),
            vector=np.array(d["vector"], dtype=np.float64),
            n_pairs=int(d["n_pairs"]),
            sae_checksum=str(d.get("sae_checksum", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed steering vector file: {exc}") from exc


def save_vector(sv: SteeringVector, path) -> None:
    Path(path).write_text(dumps_vector(sv), encoding="utf-8")


def load_vector(path) -> SteeringVector:
    return loads_vector(Path(path).read_text(encoding="utf-8"))
