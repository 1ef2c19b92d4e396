"""Asymmetric tabular autoencoder.

Per-feature multiplicative input weights feed a scalar-to-token feature
tokenizer; a learned summary token is prepended and the sequence runs through
pre-norm transformer blocks.  The bottleneck embedding is a projection of the
summary token's final state.  Decoding is a single sigmoid layer; two small
heads (a 2-layer MLP used during pretraining and a linear fine-tune head)
map the bottleneck to class logits.

All parameters are float64; initialization draws from a caller-provided
numpy generator so builds are reproducible independent of torch's RNG.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1
PARAMETER_GROUPS = (
    "input_weights",
    "tokenizer",
    "encoder",
    "decoder",
    "classifier",
    "finetune_head",
)


class EncodingFault(RuntimeError):
    """Non-finite activations inside the encoder; carries the layer index."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite activations after encoder layer {layer}")
        self.layer = layer


@dataclass
class ModelConfig:
    n_features: int
    token_dim: int = 16
    n_layers: int = 3
    n_heads: int = 2
    ff_dim: int | None = None
    z_dim: int | None = None
    mlp_hidden: int | None = None
    n_classes: int = 2

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be positive")
        if self.ff_dim is None:
            self.ff_dim = 4 * self.token_dim
        if self.z_dim is None:
            self.z_dim = max(1, self.n_features // 2)
        if self.mlp_hidden is None:
            self.mlp_hidden = self.z_dim
        if self.token_dim % self.n_heads != 0:
            raise ValueError(
                f"token_dim {self.token_dim} must be divisible by n_heads {self.n_heads}"
            )
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")


class FeatureTokenizer(nn.Module):
    """Map each scalar feature to a token via a per-feature affine map plus a
    column embedding, and prepend a learned summary token."""

    def __init__(self, n_features: int, token_dim: int):
        super().__init__()
        shape = (n_features, token_dim)
        self.scale = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.bias = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.column_embeddings = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.summary_token = nn.Parameter(torch.empty(token_dim, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = x.unsqueeze(-1) * self.scale + self.bias + self.column_embeddings
        summary = self.summary_token.expand(x.shape[0], 1, -1)
        return torch.cat([summary, tokens], dim=1)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        kw = {"dtype": torch.float64}
        self.query = nn.Linear(dim, dim, **kw)
        self.key = nn.Linear(dim, dim, **kw)
        self.value = nn.Linear(dim, dim, **kw)
        self.output = nn.Linear(dim, dim, **kw)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, t, d = h.shape

        def heads(x):
            return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(h)), heads(self.key(h)), heads(self.value(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mixed = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, t, d)
        return self.output(mixed)


class TransformerBlock(nn.Module):
    """Pre-norm block: attention and feed-forward sublayers, both residual."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        kw = {"dtype": torch.float64}
        self.attn_norm = nn.LayerNorm(dim, **kw)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.ff_norm = nn.LayerNorm(dim, **kw)
        self.ff_in = nn.Linear(dim, ff_dim, **kw)
        self.ff_out = nn.Linear(ff_dim, dim, **kw)
        self.activation = nn.GELU()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.attn_norm(h))
        return h + self.ff_out(self.activation(self.ff_in(self.ff_norm(h))))


class TabularAutoencoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        kw = {"dtype": torch.float64}
        self.input_weights = nn.Parameter(
            torch.ones(config.n_features, dtype=torch.float64)
        )
        self.tokenizer = FeatureTokenizer(config.n_features, config.token_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.token_dim, config.n_heads, config.ff_dim)
            for _ in range(config.n_layers)
        )
        self.projection = nn.Linear(config.token_dim, config.z_dim, **kw)
        self.decoder = nn.Linear(config.z_dim, config.n_features, **kw)
        self.classifier_hidden = nn.Linear(config.z_dim, config.mlp_hidden, **kw)
        self.classifier_out = nn.Linear(config.mlp_hidden, config.n_classes, **kw)
        self.finetune_head = nn.Linear(config.z_dim, config.n_classes, **kw)
        self.activation = nn.GELU()

    def apply_input_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise product with the per-feature weight vector."""
        if x.shape[-1] != self.config.n_features:
            raise ValueError(
                f"expected {self.config.n_features} features, got {x.shape[-1]}"
            )
        return x * self.input_weights

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Corrupted, weighted batch (B, M) -> bottleneck embeddings (B, z_dim)."""
        h = self.tokenizer(x)
        if not torch.isfinite(h).all():
            raise EncodingFault(0)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if not torch.isfinite(h).all():
                raise EncodingFault(i + 1)
        return self.projection(h[:, 0])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """One-layer sigmoid reconstruction; every output in (0, 1)."""
        return torch.sigmoid(self.decoder(z))

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.classifier_out(self.activation(self.classifier_hidden(z)))

    def finetune_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.finetune_head(z)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Uncorrupted forward: input weights, then encoder."""
        return self.encode(self.apply_input_weights(x))


def parameter_group(name: str) -> str:
    if name == "input_weights":
        return "input_weights"
    prefix = name.split(".", 1)[0]
    if prefix == "tokenizer":
        return "tokenizer"
    if prefix in ("blocks", "projection"):
        return "encoder"
    if prefix == "decoder":
        return "decoder"
    if prefix in ("classifier_hidden", "classifier_out"):
        return "classifier"
    if prefix == "finetune_head":
        return "finetune_head"
    raise KeyError(f"parameter {name!r} belongs to no known group")


def init_parameters(model: TabularAutoencoder, rng: np.random.Generator) -> None:
    """Deterministic initialization from a numpy stream.

    Linear weights draw uniform(+-1/sqrt(fan_in)); tokenizer tensors draw
    uniform(+-1/sqrt(token_dim)); layer-norm gains and the input weights
    start at one; every bias starts at zero.  Tensors are filled in
    registration order, so a given seed always yields the same model.
    """
    token_bound = 1.0 / math.sqrt(model.config.token_dim)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name == "input_weights":
                param.fill_(1.0)
            elif name.startswith("tokenizer."):
                values = rng.uniform(-token_bound, token_bound, size=param.shape)
                param.copy_(torch.from_numpy(values))
            elif "norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                bound = 1.0 / math.sqrt(param.shape[1])
                values = rng.uniform(-bound, bound, size=param.shape)
                param.copy_(torch.from_numpy(values))


def build_model(config: ModelConfig, seed_or_rng) -> TabularAutoencoder:
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    model = TabularAutoencoder(config)
    init_parameters(model, rng)
    return model


_zero_norm_events = 0


def zero_norm_events() -> int:
    """Count of zero vectors passed through l2_normalize unchanged."""
    return _zero_norm_events


def l2_normalize(z: torch.Tensor) -> torch.Tensor:
    """Scale rows to unit L2 norm; zero rows pass through with a warning."""
    global _zero_norm_events
    squeeze = z.ndim == 1
    if squeeze:
        z = z.unsqueeze(0)
    sumsq = (z * z).sum(dim=-1, keepdim=True)
    n_zero = int((sumsq == 0).sum())
    if n_zero:
        _zero_norm_events += n_zero
        warnings.warn(
            f"{n_zero} zero vector(s) left unnormalized", stacklevel=2
        )
    # clamp keeps the sqrt backward finite when a row collapses to zero
    out = z / sumsq.clamp_min(1e-24).sqrt()
    return out.squeeze(0) if squeeze else out


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(blob: dict) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(blob["data"]), dtype="<f8")
    return data.reshape(blob["shape"]).astype(np.float64)


@dataclass
class Checkpoint:
    """Versioned model container with bit-exact float64 payloads.

    Beyond the model itself it carries the optimizer accumulators and the
    training RNG stream states, so an interrupted run resumes on the exact
    trajectory it would have followed.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    preprocessor_hash: str = ""
    rmsprop: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    train_meta: dict | None = None

    @classmethod
    def from_model(
        cls,
        model: TabularAutoencoder,
        step: int = 0,
        preprocessor_hash: str = "",
        rmsprop: dict[str, torch.Tensor] | None = None,
        rng_state: dict | None = None,
        train_meta: dict | None = None,
    ) -> "Checkpoint":
        params = {
            name: p.detach().numpy().copy() for name, p in model.named_parameters()
        }
        acc = {
            name: t.detach().numpy().copy() for name, t in (rmsprop or {}).items()
        }
        return cls(
            config=model.config,
            params=params,
            step=step,
            preprocessor_hash=preprocessor_hash,
            rmsprop=acc,
            rng_state=rng_state,
            train_meta=train_meta,
        )

    def build_model(self) -> TabularAutoencoder:
        model = TabularAutoencoder(self.config)
        names = {name for name, _ in model.named_parameters()}
        if names != set(self.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        with torch.no_grad():
            for name, param in model.named_parameters():
                stored = self.params[name]
                if tuple(stored.shape) != tuple(param.shape):
                    raise ValueError(f"shape mismatch for parameter {name!r}")
                param.copy_(torch.from_numpy(stored))
        return model

    def to_json_bytes(self) -> bytes:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(self.config),
            "step": self.step,
            "preprocessor_hash": self.preprocessor_hash,
            "params": {k: _encode_array(v) for k, v in sorted(self.params.items())},
            "rmsprop": {k: _encode_array(v) for k, v in sorted(self.rmsprop.items())},
            "rng_state": self.rng_state,
            "train_meta": self.train_meta,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_json_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            payload = json.loads(fh.read())
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version!r}")
        return cls(
            config=ModelConfig(**payload["config"]),
            params={k: _decode_array(v) for k, v in payload["params"].items()},
            step=int(payload["step"]),
            preprocessor_hash=payload["preprocessor_hash"],
            rmsprop={k: _decode_array(v) for k, v in payload["rmsprop"].items()},
            rng_state=payload.get("rng_state"),
            train_meta=payload.get("train_meta"),
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json_bytes()).hexdigest()
