"""Deterministic trainable embedding model.

A compact network maps either a feature vector or a single-channel
image patch to an L2-normalized embedding vector, with a linear head
on top of the embedding that predicts the characteristic scores.
Feature inputs go through a small perceptron; image patches go through
three stride-2 convolution blocks, global max pooling and a dense
layer. Everything is plain numpy with handwritten forward and backward
passes, so initialization and training are bit-reproducible from the
seed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError, NormalizationError, SchemaError
from .ratings import DEFAULT_SCHEMA, CharacteristicSchema, RatingVector

CHECKPOINT_MAGIC = b"MREv1"

FEATURE_INPUT = "feature_vector"
PATCH_INPUT = "image_patch"

_CONV_KERNEL = 3
_CONV_STRIDE = 2
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the seed that fully determines initialization."""

    input_kind: str
    input_dim: int | None = None
    patch_size: int = 128
    embedding_dim: int = 128
    hidden: tuple[int, ...] = (64, 64)
    rating_dim: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.input_kind not in (FEATURE_INPUT, PATCH_INPUT):
            raise ConfigError(f"unknown input kind: {self.input_kind!r}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.input_kind == FEATURE_INPUT:
            if not self.input_dim or self.input_dim < 1:
                raise ConfigError("feature input needs a positive input_dim")
        else:
            if self.patch_size < 4:
                raise ConfigError(f"patch_size too small: {self.patch_size}")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"invalid hidden spec: {self.hidden}")
        if self.rating_dim < 1:
            raise ConfigError(f"rating_dim must be positive, got {self.rating_dim}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def for_features(cls, input_dim: int, embedding_dim: int = 128,
                     hidden: tuple[int, ...] = (64, 64), seed: int = 0, **kw):
        return cls(FEATURE_INPUT, input_dim=input_dim, embedding_dim=embedding_dim,
                   hidden=hidden, seed=seed, **kw)

    @classmethod
    def for_patches(cls, patch_size: int = 128, embedding_dim: int = 128,
                    channels: tuple[int, ...] = (16, 32, 64), seed: int = 0, **kw):
        return cls(PATCH_INPUT, patch_size=patch_size, embedding_dim=embedding_dim,
                   hidden=channels, seed=seed, **kw)


class EmbeddingModel:
    """Parameter container with explicit forward/backward passes.

    ``params`` is an ordered mapping; its insertion order is the
    declaration order used by the checkpoint format.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.param_names:
            digest.update(name.encode())
            digest.update(self.params[name].tobytes())
        return digest.hexdigest()

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = params[k].copy()

    # -- forward ---------------------------------------------------------

    def embed_batch(self, inputs: np.ndarray, want_cache: bool = False):
        """Map a batch of inputs to unit-norm embeddings."""
        x = np.asarray(inputs, dtype=float)
        cfg = self.config
        cache: dict = {}
        if cfg.input_kind == FEATURE_INPUT:
            if x.ndim != 2 or x.shape[1] != cfg.input_dim:
                raise SchemaError(
                    f"expected (batch, {cfg.input_dim}) features, got {x.shape}"
                )
            h = x
            hidden_cache = []
            for i in range(len(cfg.hidden)):
                pre = h @ self.params[f"dense{i}_w"] + self.params[f"dense{i}_b"]
                hidden_cache.append((h, pre))
                h = np.maximum(pre, 0.0)
        else:
            if x.ndim != 3 or x.shape[1:] != (cfg.patch_size, cfg.patch_size):
                raise SchemaError(
                    f"expected (batch, {cfg.patch_size}, {cfg.patch_size}) "
                    f"patches, got {x.shape}"
                )
            h4 = x[:, :, :, None]
            conv_cache = []
            for i in range(len(cfg.hidden)):
                out, cc = _conv_forward(
                    h4, self.params[f"conv{i}_k"], self.params[f"conv{i}_b"]
                )
                pre = out
                h4 = np.maximum(pre, 0.0)
                conv_cache.append((cc, pre))
            b, oh, ow, c = h4.shape
            flat = h4.reshape(b, oh * ow, c)
            pool_idx = np.argmax(flat, axis=1)
            h = np.take_along_axis(flat, pool_idx[:, None, :], axis=1)[:, 0, :]
            hidden_cache = []
            cache["conv"] = conv_cache
            cache["pool"] = (flat.shape, pool_idx)
        z = h @ self.params["embed_w"] + self.params["embed_b"]
        norms = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
        if np.any(norms < _NORM_EPS):
            bad = int(np.argmax(norms[:, 0] < _NORM_EPS))
            raise NormalizationError(
                f"pre-normalization embedding {bad} has near-zero norm"
            )
        emb = z / norms
        if not want_cache:
            return emb
        cache.update(hidden=hidden_cache, pre_embed=h, norms=norms, emb=emb)
        return emb, cache

    def rating_batch(self, embeddings: np.ndarray) -> np.ndarray:
        """Linear score head on a batch of embeddings."""
        e = np.asarray(embeddings, dtype=float)
        return e @ self.params["head_w"] + self.params["head_b"]

    # -- backward --------------------------------------------------------

    def backward(self, cache: dict, grad_embedding: np.ndarray | None = None,
                 grad_rating: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter.

        ``grad_embedding`` is the loss gradient at the normalized
        embedding, ``grad_rating`` the gradient at the score-head output;
        either may be omitted.
        """
        emb = cache["emb"]
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        d_emb = np.zeros_like(emb)
        if grad_embedding is not None:
            d_emb = d_emb + grad_embedding
        if grad_rating is not None:
            grads["head_w"] = emb.T @ grad_rating
            grads["head_b"] = grad_rating.sum(axis=0)
            d_emb = d_emb + grad_rating @ self.params["head_w"].T
        norms = cache["norms"]
        dz = (d_emb - emb * np.sum(emb * d_emb, axis=1, keepdims=True)) / norms
        h = cache["pre_embed"]
        grads["embed_w"] = h.T @ dz
        grads["embed_b"] = dz.sum(axis=0)
        dh = dz @ self.params["embed_w"].T
        if self.config.input_kind == FEATURE_INPUT:
            for i in reversed(range(len(self.config.hidden))):
                h_in, pre = cache["hidden"][i]
                da = dh * (pre > 0.0)
                grads[f"dense{i}_w"] = h_in.T @ da
                grads[f"dense{i}_b"] = da.sum(axis=0)
                dh = da @ self.params[f"dense{i}_w"].T
        else:
            flat_shape, pool_idx = cache["pool"]
            dflat = np.zeros(flat_shape)
            np.put_along_axis(dflat, pool_idx[:, None, :], dh[:, None, :], axis=1)
            b, _, c = flat_shape
            side = int(round(np.sqrt(flat_shape[1])))
            d4 = dflat.reshape(b, side, side, c)
            for i in reversed(range(len(self.config.hidden))):
                cc, pre = cache["conv"][i]
                d4 = d4 * (pre > 0.0)
                dk, db, d4 = _conv_backward(
                    d4, cc, self.params[f"conv{i}_k"]
                )
                grads[f"conv{i}_k"] = dk
                grads[f"conv{i}_b"] = db
        return grads

    def apply_gradients(self, grads: dict[str, np.ndarray], learning_rate: float) -> None:
        for name in self.param_names:
            self.params[name] -= learning_rate * grads[name]


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """3x3 stride-2 convolution, padding 1, channels-last."""
    k = _CONV_KERNEL
    b, h, w, cin = x.shape
    cout = kernel.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, ::_CONV_STRIDE, ::_CONV_STRIDE]
    oh, ow = windows.shape[1], windows.shape[2]
    cols = windows.reshape(b, oh * ow, cin * k * k)
    w_flat = kernel.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = cols @ w_flat + bias
    cache = (cols, (b, h, w, cin), (oh, ow))
    return out.reshape(b, oh, ow, cout), cache


def _conv_backward(d_out: np.ndarray, cache, kernel: np.ndarray):
    k = _CONV_KERNEL
    cols, (b, h, w, cin), (oh, ow) = cache
    cout = kernel.shape[-1]
    d_flat = d_out.reshape(b, oh * ow, cout)
    d_bias = d_flat.sum(axis=(0, 1))
    d_wflat = np.einsum("bpc,bpo->co", cols, d_flat)
    d_kernel = d_wflat.reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
    w_flat = kernel.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    d_cols = d_flat @ w_flat.T
    d_win = d_cols.reshape(b, oh, ow, cin, k, k)
    d_xp = np.zeros((b, h + 2, w + 2, cin))
    for kh in range(k):
        for kw in range(k):
            d_xp[:, kh:kh + _CONV_STRIDE * oh:_CONV_STRIDE,
                 kw:kw + _CONV_STRIDE * ow:_CONV_STRIDE, :] += d_win[:, :, :, :, kh, kw]
    return d_kernel, d_bias, d_xp[:, 1:h + 1, 1:w + 1, :]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    scale = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape)


def init_model(config: ModelConfig) -> EmbeddingModel:
    """Seeded fan-in-scaled uniform initialization; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    if config.input_kind == FEATURE_INPUT:
        fan = config.input_dim
        for i, width in enumerate(config.hidden):
            params[f"dense{i}_w"] = _uniform(rng, fan, (fan, width))
            params[f"dense{i}_b"] = np.zeros(width)
            fan = width
    else:
        cin = 1
        for i, channels in enumerate(config.hidden):
            fan = cin * _CONV_KERNEL * _CONV_KERNEL
            params[f"conv{i}_k"] = _uniform(
                rng, fan, (_CONV_KERNEL, _CONV_KERNEL, cin, channels)
            )
            params[f"conv{i}_b"] = np.zeros(channels)
            cin = channels
        fan = cin
    params["embed_w"] = _uniform(rng, fan, (fan, config.embedding_dim))
    params["embed_b"] = np.zeros(config.embedding_dim)
    params["head_w"] = _uniform(rng, config.embedding_dim,
                                (config.embedding_dim, config.rating_dim))
    params["head_b"] = np.zeros(config.rating_dim)
    return EmbeddingModel(config, params)


def forward(model: EmbeddingModel, single_input: np.ndarray) -> np.ndarray:
    """Embed one input; returns a unit-norm vector."""
    x = np.asarray(single_input, dtype=float)
    return model.embed_batch(x[None, ...])[0]


def rating_head(model: EmbeddingModel, embedding: np.ndarray) -> np.ndarray:
    """Predicted score vector(s) for one embedding or a batch of them."""
    e = np.asarray(embedding, dtype=float)
    if e.ndim == 1:
        return model.rating_batch(e[None, :])[0]
    return model.rating_batch(e)


def predict_ratings(model: EmbeddingModel, inputs: np.ndarray,
                    schema: CharacteristicSchema = DEFAULT_SCHEMA) -> list[RatingVector]:
    """Predict scores for a batch of inputs, clamped to the schema ranges.

    Clamping happens only here, at reporting time; training losses see
    the raw head output.
    """
    emb = model.embed_batch(np.asarray(inputs, dtype=float))
    raw = model.rating_batch(emb)
    lows = np.array([r[0] for r in schema.ranges])
    highs = np.array([r[1] for r in schema.ranges])
    clamped = np.clip(raw, lows, highs)
    return [RatingVector(row, schema) for row in clamped]


def embedding_distance_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between embedding rows, exactly symmetric."""
    e = np.asarray(embeddings, dtype=float)
    gram = e @ e.T
    gram = 0.5 * (gram + gram.T)
    sq = np.sum(e * e, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def distance_matrix_backward(grad_dm: np.ndarray, embeddings: np.ndarray,
                             dm: np.ndarray) -> np.ndarray:
    """Backward pass of the pairwise-distance layer.

    Coincident embeddings (zero distance) get a zero gradient, the
    subgradient choice that keeps updates finite.
    """
    g = grad_dm + grad_dm.T
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dm > 1e-12, g / dm, 0.0)
    return w.sum(axis=1, keepdims=True) * embeddings - w @ embeddings


# -- checkpoint io ---------------------------------------------------------


def save_checkpoint(model: EmbeddingModel, path) -> None:
    """Write magic, length-prefixed config text, then float32 tensors."""
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for name in model.param_names:
            fh.write(model.params[name].astype("<f4").tobytes())


def load_checkpoint(path) -> EmbeddingModel:
    """Rebuild a model from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    try:
        raw = json.loads(blob[offset:offset + cfg_len].decode("utf-8"))
        raw["hidden"] = tuple(raw["hidden"])
        config = ModelConfig(**raw)
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"{path}: bad checkpoint config: {exc}") from exc
    offset += cfg_len
    model = init_model(config)
    for name in model.param_names:
        shape = model.params[name].shape
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor {name}")
        tensor = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)),
                               offset=offset).astype(float).reshape(shape)
        model.params[name] = tensor
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return model
