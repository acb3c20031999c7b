"""Small deterministic feed-forward encoder with exact forward/backward.

The encoder maps raw input vectors to unit-norm embeddings: a ReLU stack
over the hidden dims, a projection head (a single affine layer, or a
two-layer MLP head), then l2 normalization. Everything runs in float64
with hand-written backward passes so gradients are exact and runs are
bitwise reproducible; no framework autodiff is involved.

Weight convention: layer weights are (fan_in, fan_out), applied as
``x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, DimensionMismatch, ShapeMismatch, TruncatedFile, ZeroVector
from .numeric import ZERO_NORM_THRESHOLD

PARAM_MAGIC = b"CO2PARAM"
PARAM_VERSION = 1

HEAD_KINDS = ("linear", "mlp")
ACTIVATION_KINDS = ("relu",)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    embed_dim: int
    head: str = "mlp"
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if not self.input_dim >= self.embed_dim >= 1:
            raise ValueError(
                f"need input_dim >= embed_dim >= 1, got {self.input_dim} and {self.embed_dim}"
            )
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(f"activation must be one of {ACTIVATION_KINDS}")

    def layer_dims(self) -> list[tuple[int, int, bool]]:
        """(fan_in, fan_out, relu_after) per affine layer, in forward order."""
        dims = []
        prev = self.input_dim
        for h in self.hidden_dims:
            dims.append((prev, h, True))
            prev = h
        if self.head == "mlp":
            dims.append((prev, prev, True))
        dims.append((prev, self.embed_dim, False))
        return dims


@dataclass
class EncoderParams:
    """Per-layer weights/biases plus the config that gives them meaning."""

    config: EncoderConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in layer-major order (W then b per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, flat: np.ndarray) -> "EncoderParams":
        """New params with the same structure, values taken from flat."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.to_flat().size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, expected {self.to_flat().size}")
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[offset : offset + w.size].reshape(w.shape).copy())
            offset += w.size
            biases.append(flat[offset : offset + b.size].copy())
            offset += b.size
        return EncoderParams(config=self.config, weights=weights, biases=biases)


@dataclass
class EncoderGrads:
    """Gradient arrays mirroring EncoderParams' layer structure."""

    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_params(cfg: EncoderConfig) -> EncoderParams:
    """Xavier-uniform weights, zero biases, deterministic in init_seed."""
    rng = np.random.Generator(np.random.PCG64(cfg.init_seed))
    weights, biases = [], []
    for fan_in, fan_out, _ in cfg.layer_dims():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(config=cfg, weights=weights, biases=biases)


def zero_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )


def _forward_cached(params: EncoderParams, x: np.ndarray):
    """Run the stack on a (N, D) batch; keep activations for backward."""
    layer_dims = params.config.layer_dims()
    inputs = []  # activation entering each affine layer
    pre_acts = []  # affine output before any ReLU
    h = x
    for (w, b, (_, _, relu_after)) in zip(params.weights, params.biases, layer_dims):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if relu_after else z
    return h, inputs, pre_acts


def forward_batch(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Encode a (N, D) batch into (N, d) unit-norm embeddings."""
    x = np.asarray(x, dtype=np.float64)
    z, _, _ = _forward_cached(params, x)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < ZERO_NORM_THRESHOLD):
        raise ZeroVector("encoder produced a numerically zero pre-normalization output")
    return z / norms[:, None]


def forward(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Encode one input vector into a unit-norm embedding."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.config.input_dim,):
        raise ShapeMismatch(f"expected input of shape ({params.config.input_dim},), got {x.shape}")
    return forward_batch(params, x[None, :])[0]


def backward_batch(
    params: EncoderParams, x: np.ndarray, upstream: np.ndarray
) -> EncoderGrads:
    """Gradients of sum_i (upstream_i . embedding_i) wrt every parameter.

    upstream is (N, d), taken with respect to the normalized embeddings.
    The normalization Jacobian (I - y y^T)/||z|| is applied first, then the
    head and ReLU stack are walked in reverse.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    z, inputs, pre_acts = _forward_cached(params, x)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < ZERO_NORM_THRESHOLD):
        raise ZeroVector("encoder produced a numerically zero pre-normalization output")
    y = z / norms[:, None]
    radial = np.einsum("nd,nd->n", y, upstream)
    delta = (upstream - radial[:, None] * y) / norms[:, None]

    grads = zero_grads(params)
    layer_dims = params.config.layer_dims()
    for idx in range(len(params.weights) - 1, -1, -1):
        _, _, relu_after = layer_dims[idx]
        if relu_after:
            delta = delta * (pre_acts[idx] > 0.0)
        grads.weights[idx] = inputs[idx].T @ delta
        grads.biases[idx] = np.sum(delta, axis=0)
        if idx > 0:
            delta = delta @ params.weights[idx].T
    return grads


def backward(params: EncoderParams, x: np.ndarray, upstream: np.ndarray) -> EncoderGrads:
    """Single-vector backward: gradient of (upstream . embedding)."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.config.embed_dim,):
        raise ShapeMismatch(
            f"expected upstream of shape ({params.config.embed_dim},), got {upstream.shape}"
        )
    return backward_batch(params, x[None, :], upstream[None, :])


# ---------------------------------------------------------------------------
# Binary parameter container
# ---------------------------------------------------------------------------


def serialize_params(params: EncoderParams) -> bytes:
    """Encode params into the CO2PARAM container (bit-exact round trip)."""
    cfg = params.config
    head = struct.pack(
        "<H", PARAM_VERSION
    ) + struct.pack(
        "<III", cfg.input_dim, cfg.embed_dim, len(cfg.hidden_dims)
    ) + struct.pack(
        f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims
    ) + struct.pack(
        "<BBQ", HEAD_KINDS.index(cfg.head), ACTIVATION_KINDS.index(cfg.activation), cfg.init_seed
    )
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return PARAM_MAGIC + head + payload


def deserialize_params(blob: bytes) -> EncoderParams:
    """Decode a CO2PARAM container produced by serialize_params."""
    if blob[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise BadMagic("not a CO2PARAM container")
    view = memoryview(blob)[len(PARAM_MAGIC) :]

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise TruncatedFile("parameter container ends mid-field")
        chunk, view = view[:n], view[n:]
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != PARAM_VERSION:
        raise DimensionMismatch(f"unsupported parameter container version {version}")
    input_dim, embed_dim, num_hidden = struct.unpack("<III", take(12))
    hidden_dims = struct.unpack(f"<{num_hidden}I", take(4 * num_hidden))
    head_idx, act_idx, init_seed = struct.unpack("<BBQ", take(10))
    try:
        cfg = EncoderConfig(
            input_dim=input_dim,
            hidden_dims=hidden_dims,
            embed_dim=embed_dim,
            head=HEAD_KINDS[head_idx],
            activation=ACTIVATION_KINDS[act_idx],
            init_seed=init_seed,
        )
    except (IndexError, ValueError) as exc:
        raise DimensionMismatch(f"invalid encoder config in container: {exc}") from exc

    weights, biases = [], []
    for fan_in, fan_out, _ in cfg.layer_dims():
        w_bytes = take(8 * fan_in * fan_out)
        b_bytes = take(8 * fan_out)
        weights.append(np.frombuffer(w_bytes, dtype="<f8").reshape(fan_in, fan_out).copy())
        biases.append(np.frombuffer(b_bytes, dtype="<f8").copy())
    if len(view) != 0:
        raise DimensionMismatch(f"{len(view)} trailing bytes after parameter payload")
    return EncoderParams(config=cfg, weights=weights, biases=biases)


def save_params(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())
