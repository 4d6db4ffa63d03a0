"""Categorical-latent autoencoder trained with Gumbel-Softmax samples.

The encoder maps an image to num_vars * cat_dim logits; during training
each latent variable is relaxed to a point on the simplex via the
Gumbel-Softmax reparameterization, the decoder reconstructs the image
from the concatenated relaxations, and the loss is reconstruction BCE
plus a weighted KL of each latent posterior against the uniform
categorical.  After training, codes are discretized per variable by
argmax (lowest index on ties).

Everything is plain numpy with hand-written reverse-mode gradients;
they are verified against central finite differences in the tests.
"""

from __future__ import annotations

import binascii
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TrainingDivergedError

ACTIVATIONS = ("identity", "relu", "sigmoid")


@dataclass
class Layer:
    weights: np.ndarray  # [fan_in, fan_out]
    biases: np.ndarray  # [fan_out]
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise ValueError("layer weight/bias shapes disagree")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise ValueError("layer parameters must be finite")


class MlpNetwork:
    """Dense feed-forward network; layers own their parameters."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise ValueError("adjacent layer dimensions disagree")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    def num_parameters(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Batched forward pass; `cache` collects (input, pre-activation)
        pairs for the backward pass."""
        a = x
        for layer in self.layers:
            z = a @ layer.weights + layer.biases
            if cache is not None:
                cache.append((a, z))
            a = _activate(z, layer.activation)
        return a

    def backward(self, cache: list, delta: np.ndarray,
                 delta_is_preactivation: bool = False):
        """Gradient of a scalar loss given d loss / d output.

        With `delta_is_preactivation` the incoming delta is taken with
        respect to the final layer's pre-activation (the stable
        BCE-from-logits path folds the sigmoid in already).  Returns
        ([(dW, db) per layer], d loss / d input).
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        skip_activation = delta_is_preactivation
        for layer, (a_in, z) in zip(reversed(self.layers), reversed(cache)):
            if not skip_activation:
                delta = delta * _activate_grad(z, layer.activation)
            skip_activation = False
            grads.append((a_in.T @ delta, delta.sum(axis=0)))
            delta = delta @ layer.weights.T
        grads.reverse()
        return grads, delta


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng) -> MlpNetwork:
    """He-scaled random init; dims has one more entry than activations."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need len(dims) == len(activations) + 1")
    rng = np.random.default_rng(rng)
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpNetwork(layers)


@dataclass(frozen=True)
class LatentSpec:
    num_vars: int
    cat_dim: int

    def __post_init__(self):
        if self.num_vars < 1 or self.cat_dim < 2:
            raise ValueError("need num_vars >= 1 and cat_dim >= 2")

    @property
    def flat_dim(self) -> int:
        return self.num_vars * self.cat_dim


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 30
    temperature_start: float = 1.0
    temperature_end: float = 0.5
    anneal_schedule: str = "exponential"
    kl_weight: float = 0.1
    rng_seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.temperature_start <= 0 or self.temperature_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.temperature_end > self.temperature_start:
            raise ValueError("temperature must not rise during annealing")
        if self.anneal_schedule not in ("exponential", "linear", "constant"):
            raise ValueError(f"unknown schedule {self.anneal_schedule!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad optimizer settings")

    def temperature_at(self, epoch: int) -> float:
        if self.anneal_schedule == "constant" or self.epochs <= 1:
            return self.temperature_start
        frac = epoch / (self.epochs - 1)
        if self.anneal_schedule == "linear":
            return self.temperature_start + frac * (
                self.temperature_end - self.temperature_start
            )
        ratio = self.temperature_end / self.temperature_start
        return self.temperature_start * ratio ** frac


def encode_logits(encoder: MlpNetwork, x: np.ndarray, lspec: LatentSpec) -> np.ndarray:
    """Forward the encoder; logits reshaped to [num_vars, cat_dim]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (encoder.input_dim,):
        raise ValueError(f"input shape {x.shape} != ({encoder.input_dim},)")
    if x.min() < -1e-9 or x.max() > 1 + 1e-9:
        raise ValueError("pixel values must lie in [0, 1]")
    if encoder.output_dim != lspec.flat_dim:
        raise ValueError("encoder output does not match the latent spec")
    out = encoder.forward(x[None, :])[0]
    return out.reshape(lspec.num_vars, lspec.cat_dim)


def _gumbel(rng, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax_sample(logits: np.ndarray, temperature: float, rng) -> np.ndarray:
    """One relaxed categorical sample: softmax((logits + gumbel) / tau)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(rng)
    logits = np.asarray(logits, dtype=np.float64)
    return _softmax((logits + _gumbel(rng, logits.shape)) / temperature)


def _bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-example sum of binary cross-entropy, from pre-sigmoid logits.

    softplus(l) - x*l is exact and never overflows for large |l|.
    """
    softplus = np.logaddexp(0.0, logits)
    return (softplus - targets * logits).sum(axis=1)


def elbo_loss(encoder: MlpNetwork, decoder: MlpNetwork, batch: np.ndarray,
              lspec: LatentSpec, temperature: float, kl_weight: float, rng):
    """Loss and gradients for one minibatch.

    loss = mean_B [ BCE(x, decode(gumbel_softmax(logits))) +
                    kl_weight * sum_vars KL(softmax(logits) || uniform) ]

    Gradients flow through the reparameterized samples.  The decoder's
    final layer must be a sigmoid; its pre-activations feed the stable
    BCE.  Returns (loss, {"encoder": [(dW, db)], "decoder": [...]}).
    """
    rng = np.random.default_rng(rng)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty [B, pixels] matrix")
    if decoder.layers[-1].activation != "sigmoid":
        raise ValueError("decoder must end in a sigmoid layer")
    B = batch.shape[0]
    V, K = lspec.num_vars, lspec.cat_dim

    enc_cache: list = []
    logits = encoder.forward(batch, cache=enc_cache).reshape(B, V, K)

    g = _gumbel(rng, logits.shape)
    y = _softmax((logits + g) / temperature)  # [B, V, K]

    dec_cache: list = []
    decoder.forward(y.reshape(B, V * K), cache=dec_cache)
    recon_logits = dec_cache[-1][1]  # pre-sigmoid
    bce = _bce_from_logits(recon_logits, batch)

    q = _softmax(logits)
    kl_terms = (q * (np.log(np.clip(q, 1e-300, None)) + math.log(K))).sum(axis=2)
    kl = kl_terms.sum(axis=1)

    loss = float((bce + kl_weight * kl).mean())
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} in a batch step")

    # backward: BCE wrt decoder pre-sigmoid logits
    delta_out = (_sigmoid(recon_logits) - batch) / B
    dec_grads, dy = decoder.backward(dec_cache, delta_out,
                                     delta_is_preactivation=True)
    dy = dy.reshape(B, V, K)

    # softmax jacobian for the sample path
    ds = y * (dy - (dy * y).sum(axis=2, keepdims=True))
    dlogits = ds / temperature

    # KL path: d KL / d logit = q * (log q + log K - kl_term)
    a = np.log(np.clip(q, 1e-300, None)) + math.log(K)
    dlogits += (kl_weight / B) * q * (a - kl_terms[:, :, None])

    enc_grads, _ = encoder.backward(enc_cache, dlogits.reshape(B, V * K))
    return loss, {"encoder": enc_grads, "decoder": dec_grads}


def _stream(seed: int, *path: int):
    return np.random.default_rng(np.random.SeedSequence((seed,) + path))


def train(encoder: MlpNetwork, decoder: MlpNetwork, images: np.ndarray,
          lspec: LatentSpec, config: TrainConfig,
          validation: np.ndarray | None = None):
    """Minibatch SGD with momentum over the ELBO loss.

    The temperature follows the annealing schedule per epoch; every
    random draw comes from a counter-based stream keyed by (seed, epoch,
    batch), so runs are bitwise reproducible.  Training aborts when the
    epoch loss exceeds 10x the first epoch's or turns non-finite.
    Returns (encoder, decoder, curve) with one curve entry per epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != encoder.input_dim:
        raise ValueError(f"images must be [N, {encoder.input_dim}]")
    velocity = {
        "encoder": [(np.zeros_like(l.weights), np.zeros_like(l.biases))
                    for l in encoder.layers],
        "decoder": [(np.zeros_like(l.weights), np.zeros_like(l.biases))
                    for l in decoder.layers],
    }
    nets = {"encoder": encoder, "decoder": decoder}
    curve: list[dict] = []
    initial_loss = None

    for epoch in range(config.epochs):
        tau = config.temperature_at(epoch)
        order = _stream(config.rng_seed, epoch).permutation(len(images))
        total, weight = 0.0, 0
        for b, start in enumerate(range(0, len(images), config.batch_size)):
            batch = images[order[start:start + config.batch_size]]
            loss, grads = elbo_loss(
                encoder, decoder, batch, lspec, tau, config.kl_weight,
                rng=_stream(config.rng_seed, epoch, b, 0),
            )
            total += loss * len(batch)
            weight += len(batch)
            for name, net in nets.items():
                for layer, (vw, vb), (dw, db) in zip(
                        net.layers, velocity[name], grads[name]):
                    vw *= config.momentum
                    vw += dw
                    vb *= config.momentum
                    vb += db
                    layer.weights -= config.learning_rate * vw
                    layer.biases -= config.learning_rate * vb
        train_loss = total / weight
        entry = {"epoch": epoch, "train_loss": train_loss, "temperature": tau}
        if validation is not None:
            vloss, _ = elbo_loss(
                encoder, decoder, np.asarray(validation, dtype=np.float64),
                lspec, tau, config.kl_weight,
                rng=_stream(config.rng_seed, epoch, 0, 1),
            )
            entry["valid_loss"] = vloss
        curve.append(entry)
        if initial_loss is None:
            initial_loss = train_loss
        if not math.isfinite(train_loss) or train_loss > 10 * abs(initial_loss):
            raise TrainingDivergedError(
                f"epoch {epoch} loss {train_loss:.4f} exceeds 10x the initial "
                f"{initial_loss:.4f}; lower the learning rate"
            )
    return encoder, decoder, curve


def encode_hard(encoder: MlpNetwork, x: np.ndarray, lspec: LatentSpec) -> np.ndarray:
    """Discretize: per latent variable, one-hot of the argmax logit
    (lowest index wins ties).  Returns uint8 [num_vars, cat_dim]."""
    logits = encode_logits(encoder, x, lspec)
    out = np.zeros((lspec.num_vars, lspec.cat_dim), dtype=np.uint8)
    out[np.arange(lspec.num_vars), logits.argmax(axis=1)] = 1
    return out


def encode_hard_batch(encoder: MlpNetwork, images: np.ndarray,
                      lspec: LatentSpec) -> np.ndarray:
    """Vectorized encode_hard; returns uint8 [N, num_vars, cat_dim]."""
    images = np.asarray(images, dtype=np.float64)
    logits = encoder.forward(images).reshape(len(images), lspec.num_vars, lspec.cat_dim)
    out = np.zeros_like(logits, dtype=np.uint8)
    n, v = np.indices(logits.shape[:2])
    out[n, v, logits.argmax(axis=2)] = 1
    return out


def decode(decoder: MlpNetwork, fl_assignment: np.ndarray) -> np.ndarray:
    """Forward one flat latent vector through the decoder; output in (0,1)."""
    x = np.asarray(fl_assignment, dtype=np.float64)
    if x.shape != (decoder.input_dim,):
        raise ValueError(f"latent shape {x.shape} != ({decoder.input_dim},)")
    return decoder.forward(x[None, :])[0]


# -- checkpoint format ------------------------------------------------------------

_MAGIC = b"LLAE"
_VERSION = 1
_ACT_TAGS = {"identity": 0, "relu": 1, "sigmoid": 2}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


def save_network(net: MlpNetwork, path) -> None:
    """Binary checkpoint: magic, version, layer table, float64 params, CRC32."""
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<II", _VERSION, len(net.layers))
    for layer in net.layers:
        body += struct.pack(
            "<IIB",
            layer.weights.shape[0],
            layer.weights.shape[1],
            _ACT_TAGS[layer.activation],
        )
    for layer in net.layers:
        body += layer.weights.astype("<f8").tobytes()
        body += layer.biases.astype("<f8").tobytes()
    body += struct.pack("<I", binascii.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_network(path) -> MlpNetwork:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if binascii.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError("checkpoint CRC mismatch; file corrupted")
    version, num_layers = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    shapes = []
    for _ in range(num_layers):
        fan_in, fan_out, tag = struct.unpack_from("<IIB", blob, offset)
        offset += 9
        if tag not in _TAG_ACTS:
            raise ValueError(f"unknown activation tag {tag}")
        shapes.append((fan_in, fan_out, _TAG_ACTS[tag]))
    layers = []
    for fan_in, fan_out, act in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        layers.append(Layer(w.reshape(fan_in, fan_out).copy(), b.copy(), act))
    if offset != len(blob) - 4:
        raise ValueError("checkpoint length disagrees with its layer table")
    return MlpNetwork(layers)
