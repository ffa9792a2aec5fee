"""The two-branch network: image encoder with a conditional prior and
classifier head, text encoder with a variational posterior and its own head.

Only the image branch is used at prediction time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .distributions import DiagonalGaussian
from .tensor import Tensor, ShapeError, concat, dropout, embed_mean, relu, tanh

TEXT_PREFIXES = ("text_emb", "text_enc.", "posterior.", "text_head.")

# dropout layer ids, part of the per-call seed (base_seed, layer_id, step)
_DROP_PRIOR = (1, 2)
_DROP_POSTERIOR = (3, 4)
_DROP_IMAGE_HEAD = 5
_DROP_TEXT_HEAD = 6


@dataclass
class ModelConfig:
    input_dim: int = 16
    vocab: int = 256
    embed_dim: int = 32
    feature_dim: int = 64
    latent_dim: int = 32
    n_classes: int = 6
    hidden_dim: int = 64
    dropout: float = 0.5
    activation: str = "relu"

    def __post_init__(self):
        for f in fields(self):
            if f.type == "int" and getattr(self, f.name) < 1:
                raise ValueError(f"ModelConfig.{f.name} must be >= 1, got {getattr(self, f.name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ModelConfig.dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"ModelConfig.activation must be relu or tanh, got {self.activation!r}")

    def param_shapes(self):
        D, V, E, F = self.input_dim, self.vocab, self.embed_dim, self.feature_dim
        L, K, H = self.latent_dim, self.n_classes, self.hidden_dim
        shapes = {
            "image_enc.W": (D, F),
            "image_enc.b": (F,),
            "text_emb": (V, E),
            "text_enc.W": (E, F),
            "text_enc.b": (F,),
        }
        for net in ("prior", "posterior"):
            shapes.update({
                f"{net}.W1": (F, H), f"{net}.b1": (H,),
                f"{net}.W2": (H, H), f"{net}.b2": (H,),
                f"{net}.W3": (H, 2 * L), f"{net}.b3": (2 * L,),
            })
        shapes.update({
            "image_head.W1": (F + L, H), "image_head.b1": (H,),
            "image_head.W2": (H, K), "image_head.b2": (K,),
            "text_head.W1": (L, H), "text_head.b1": (H,),
            "text_head.W2": (H, K), "text_head.b2": (K,),
        })
        return shapes


# final projections start at zero: N(0, I) latents and 0.5 probabilities
ZERO_INIT = ("prior.W3", "posterior.W3", "image_head.W2", "text_head.W2")


class VkdModel:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def text_parameter_names(self):
        return [n for n in self.params if n.startswith(TEXT_PREFIXES)]

    def state(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            if self.params[n].shape != arr.shape:
                raise ShapeError(f"load_state[{n}]", self.params[n].shape, arr.shape)
            self.params[n].data = np.array(arr, dtype=np.float64)

    def copy(self):
        return VkdModel(self.config, {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()})

    def __getitem__(self, name):
        return self.params[name]

    def __repr__(self):
        return f"VkdModel({asdict(self.config)})"


def init_params(config, seed):
    """Glorot-uniform hidden weights, zero biases, zero final projections."""
    rng = np.random.default_rng([seed, 17])
    params = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 1 or name in ZERO_INIT:
            arr = np.zeros(shape)
        elif name == "text_emb":
            arr = rng.standard_normal(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return VkdModel(config, params)


def _act(model, x):
    return relu(x) if model.config.activation == "relu" else tanh(x)


def _linear(model, x, prefix, suffix=""):
    return x @ model.params[f"{prefix}.W{suffix}"] + model.params[f"{prefix}.b{suffix}"]


def _drop_seed(key, layer_id):
    base, step = key
    return (base, layer_id, step)


def _gaussian_net(model, feature, net, layer_ids, train, key):
    rate = model.config.dropout
    h = _act(model, _linear(model, feature, net, "1"))
    h = dropout(h, rate, train, _drop_seed(key, layer_ids[0]))
    h = _act(model, _linear(model, h, net, "2"))
    h = dropout(h, rate, train, _drop_seed(key, layer_ids[1]))
    out = _linear(model, h, net, "3")
    L = model.config.latent_dim
    return DiagonalGaussian(out[:, :L], out[:, L:])


def image_features(model, x_image):
    x_image = np.asarray(x_image, dtype=np.float64)
    D = model.config.input_dim
    if x_image.ndim != 2 or x_image.shape[1] != D:
        raise ShapeError("encode_image", (None, D), x_image.shape)
    return _act(model, _linear(model, Tensor(x_image), "image_enc"))


def encode_image(model, x_image, train=False, key=(0, 0)):
    """Image feature and the conditional prior p(z_I | x_I) for a batch."""
    feature = image_features(model, x_image)
    prior = _gaussian_net(model, feature, "prior", _DROP_PRIOR, train, key)
    return feature, prior


def check_tokens(model, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError("encode_text", (None, None), tokens.shape)
    V = model.config.vocab
    bad = np.argwhere((tokens < 0) | (tokens >= V))
    if bad.size:
        r, c = bad[0]
        raise ValueError(f"encode_text: token {int(tokens[r, c])} at row {r}, position {c} is outside [0, {V})")
    return tokens.astype(np.int64)


def encode_text(model, tokens, train=False, key=(0, 0)):
    """Variational posterior q(z_T | x_T) from padded token ids (0 = padding)."""
    tokens = check_tokens(model, tokens)
    pooled = embed_mean(model.params["text_emb"], tokens)
    feature = _act(model, _linear(model, pooled, "text_enc"))
    return _gaussian_net(model, feature, "posterior", _DROP_POSTERIOR, train, key)


def _head(model, x, prefix, layer_id, train, key):
    h = _act(model, _linear(model, x, prefix, "1"))
    h = dropout(h, model.config.dropout, train, _drop_seed(key, layer_id))
    return _linear(model, h, prefix, "2")


def classify_image_branch(model, feature, z_image, train=False, key=(0, 0)):
    """Logits of p(y | x_I, z_I) from the concatenated image feature and latent."""
    if z_image.shape[-1] != model.config.latent_dim:
        raise ShapeError("classify_image_branch", (model.config.latent_dim,), z_image.shape)
    if feature.shape[-1] != model.config.feature_dim or feature.shape[0] != z_image.shape[0]:
        raise ShapeError("classify_image_branch", feature.shape, z_image.shape)
    return _head(model, concat([feature, z_image], axis=-1), "image_head", _DROP_IMAGE_HEAD, train, key)


def classify_text_branch(model, z_text, train=False, key=(0, 0)):
    """Logits of q(y | z_T)."""
    if z_text.shape[-1] != model.config.latent_dim:
        raise ShapeError("classify_text_branch", (model.config.latent_dim,), z_text.shape)
    return _head(model, z_text, "text_head", _DROP_TEXT_HEAD, train, key)
