"""Multi-concept token transformer.

Token flow through the encoder:

* ``patch_layers`` self-attention blocks over the patch tokens only;
* ``text_layers`` cross-attention blocks where text concept tokens query the
  (now fixed) patch tokens;
* ``visual_layers`` cross-attention blocks where visual concept tokens query
  the patch tokens.

The output sequence is ``[visual | text | patch]`` followed by a final layer
norm. Visual and text logits are the channel mean of their tokens; patch
logits come from a small conv + global pooling head over the patch grid.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor, ops
from .autodiff.ops import POOL_KINDS

VARIANTS = ("baseline", "token-fusion", "text-guided", "hybrid")
CONCEPT_NAMES = ("light_brown", "dark_brown", "black", "blue_gray", "red", "white")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    num_concepts: int = 6
    embed_dim: int = 128
    heads: int = 4
    depth: int = 10
    patch_layers: int = 6
    text_layers: int = 2
    visual_layers: int = 2
    mlp_ratio: float = 4.0
    variant: str = "hybrid"
    pooling: str = "gmp"
    gwrp_decay: float = 0.9
    cam_kernel: int = 3
    cam_padding: str = "zeros"
    layer_scale_init: float = 1e-4
    text_dim: int = 1024
    freeze_text_tokens: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.patch_layers + self.text_layers + self.visual_layers != self.depth:
            raise ValueError(
                f"patch_layers + text_layers + visual_layers must equal depth "
                f"({self.patch_layers}+{self.text_layers}+{self.visual_layers} != {self.depth})")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pooling not in POOL_KINDS:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOL_KINDS}")
        if not 0.0 < self.gwrp_decay <= 1.0:
            raise ValueError(f"gwrp_decay must lie in (0, 1], got {self.gwrp_decay}")
        if self.cam_kernel < 1 or self.cam_kernel % 2 == 0:
            raise ValueError(f"cam_kernel must be a positive odd integer, got {self.cam_kernel}")
        if self.cam_padding not in ops.PAD_MODES:
            raise ValueError(f"unknown cam_padding {self.cam_padding!r}; expected one of {ops.PAD_MODES}")
        if self.num_concepts < 1 or self.visual_layers < 1:
            raise ValueError("need at least one concept and one visual concept layer")
        if self.uses_text_stage and self.text_layers < 1:
            raise ValueError(f"variant {self.variant!r} needs text_layers >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def uses_text_stage(self) -> bool:
        return self.variant in ("text-guided", "hybrid")

    @property
    def fuses_text(self) -> bool:
        return self.variant in ("token-fusion", "hybrid")

    @property
    def needs_text_bank(self) -> bool:
        return self.variant != "baseline"

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(self.num_concepts, self.num_patches, self.uses_text_stage)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TokenLayout:
    """Index ranges of the encoder output sequence."""

    num_concepts: int
    num_patches: int
    has_text: bool = True

    @property
    def visual(self) -> slice:
        return slice(0, self.num_concepts)

    @property
    def text(self) -> slice:
        c = self.num_concepts
        return slice(c, 2 * c) if self.has_text else slice(c, c)

    @property
    def patch(self) -> slice:
        start = self.text.stop
        return slice(start, start + self.num_patches)

    @property
    def length(self) -> int:
        return self.patch.stop


# -- text concept bank -------------------------------------------------------------

@dataclass
class TextConceptBank:
    """Frozen text embeddings plus their projection into token space."""

    embeddings: np.ndarray
    projection: np.ndarray
    descriptions: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def tokens(self) -> np.ndarray:
        return self.embeddings @ self.projection

    @property
    def num_concepts(self) -> int:
        return self.embeddings.shape[0]


def read_embedding_file(path, num_concepts: int | None = None, text_dim: int | None = None) -> np.ndarray:
    """Read ``C D_k`` header followed by C rows of D_k floats."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty embedding file")
    try:
        c, dk = (int(t) for t in lines[0].split())
        rows = np.array([[float(t) for t in ln.split()] for ln in lines[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed embedding file ({exc})") from exc
    if rows.shape[0] != c:
        raise ValueError(f"{path}: header declares {c} rows, found {rows.shape[0]}")
    if rows.ndim != 2 or rows.shape[1] != dk:
        raise ValueError(f"{path}: header declares dimension {dk}, rows have {rows.shape[1:]}")
    if num_concepts is not None and c != num_concepts:
        raise ValueError(f"{path}: {c} embedding rows but the model has {num_concepts} concepts")
    if text_dim is not None and dk != text_dim:
        raise ValueError(f"{path}: embedding dimension {dk} != configured text_dim {text_dim}")
    return rows


def write_embedding_file(path, embeddings: np.ndarray) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    c, dk = embeddings.shape
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in embeddings)
    Path(path).write_text(f"{c} {dk}\n{body}\n")


def pseudo_text_embeddings(num_concepts: int, text_dim: int, seed: int = 0) -> np.ndarray:
    """Orthonormal stand-in embeddings (Gram-Schmidt of Gaussian rows)."""
    if text_dim < num_concepts:
        raise ValueError(f"text_dim {text_dim} < num_concepts {num_concepts}")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((num_concepts, text_dim))
    out = np.zeros_like(rows)
    for i, r in enumerate(rows):
        for j in range(i):
            r = r - (r @ out[j]) * out[j]
        out[i] = r / np.linalg.norm(r)
    return out


def build_text_bank(
    source=None,
    *,
    num_concepts: int,
    text_dim: int,
    embed_dim: int,
    seed: int = 0,
    projection: str | np.ndarray = "normal",
    init_std: float = 0.02,
    descriptions: Optional[list[str]] = None,
) -> TextConceptBank:
    """Load embeddings from ``source`` (a file path) or synthesize them.

    ``projection`` is ``"normal"`` (truncated normal, std ``init_std``),
    ``"identity"`` (requires ``text_dim == embed_dim``) or an explicit array.
    """
    if source is None:
        emb = pseudo_text_embeddings(num_concepts, text_dim, seed)
        provenance = {"source": "pseudo", "seed": int(seed)}
    else:
        emb = read_embedding_file(source, num_concepts, text_dim)
        provenance = {"source": "file", "path": str(source)}
    if isinstance(projection, np.ndarray):
        wp = np.asarray(projection, dtype=np.float64)
        if wp.shape != (text_dim, embed_dim):
            raise ValueError(f"projection shape {wp.shape} != {(text_dim, embed_dim)}")
    elif projection == "identity":
        if text_dim != embed_dim:
            raise ValueError("identity projection needs text_dim == embed_dim")
        wp = np.eye(text_dim)
    elif projection == "normal":
        wp = trunc_normal(np.random.default_rng([seed, 1]), (text_dim, embed_dim), init_std)
    else:
        raise ValueError(f"unknown projection init {projection!r}")
    if descriptions is None:
        names = CONCEPT_NAMES if num_concepts == len(CONCEPT_NAMES) else [f"concept_{i}" for i in range(num_concepts)]
        descriptions = [n.replace("_", "-") for n in names]
    return TextConceptBank(emb, wp, list(descriptions), provenance)


# -- layers -----------------------------------------------------------------------------

def trunc_normal(rng, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class _Init:
    def __init__(self, rng, std: float, dtype):
        self.rng, self.std, self.dtype = rng, std, dtype

    def weight(self, *shape) -> Tensor:
        return ad.parameter(trunc_normal(self.rng, shape, self.std), dtype=self.dtype)

    def zeros(self, *shape) -> Tensor:
        return ad.parameter(np.zeros(shape), dtype=self.dtype)

    def const(self, value: float, *shape) -> Tensor:
        return ad.parameter(np.full(shape, value), dtype=self.dtype)


class LayerNorm(Module):
    def __init__(self, dim: int, init: _Init, eps: float):
        self.weight = init.const(1.0, dim)
        self.bias = init.zeros(dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, din: int, dout: int, init: _Init):
        self.weight = init.weight(din, dout)
        self.bias = init.zeros(dout)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, init: _Init):
        self.fc1 = Linear(dim, hidden, init)
        self.fc2 = Linear(hidden, dim, init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ops.transpose(ops.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class Attention(Module):
    """Multi-head attention; queries and keys/values may come from different token sets."""

    def __init__(self, dim: int, heads: int, init: _Init):
        self.q = Linear(dim, dim, init)
        self.k = Linear(dim, dim, init)
        self.v = Linear(dim, dim, init)
        self.proj = Linear(dim, dim, init)
        self.heads = heads

    def __call__(self, queries: Tensor, context: Tensor) -> tuple[Tensor, np.ndarray]:
        h = self.heads
        q = _split_heads(self.q(queries), h)
        k = _split_heads(self.k(context), h)
        v = _split_heads(self.v(context), h)
        out, attn = ops.attention(q, k, v)
        return self.proj(_merge_heads(out)), attn


class SelfAttentionBlock(Module):
    """Pre-norm transformer block with per-channel residual scaling."""

    def __init__(self, cfg: ModelConfig, init: _Init):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, init, cfg.ln_eps)
        self.attn = Attention(d, cfg.heads, init)
        self.gamma1 = init.const(cfg.layer_scale_init, d)
        self.norm2 = LayerNorm(d, init, cfg.ln_eps)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio), init)
        self.gamma2 = init.const(cfg.layer_scale_init, d)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        y = self.norm1(x)
        a, attn = self.attn(y, y)
        x = x + self.gamma1 * a
        x = x + self.gamma2 * self.mlp(self.norm2(x))
        return x, attn


class ConceptAttentionBlock(Module):
    """Concept tokens attend to patch tokens; only the concept tokens change."""

    def __init__(self, cfg: ModelConfig, init: _Init):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, init, cfg.ln_eps)
        self.attn = Attention(d, cfg.heads, init)
        self.gamma1 = init.const(cfg.layer_scale_init, d)
        self.norm2 = LayerNorm(d, init, cfg.ln_eps)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio), init)
        self.gamma2 = init.const(cfg.layer_scale_init, d)

    def __call__(self, tokens: Tensor, patches: Tensor) -> tuple[Tensor, np.ndarray]:
        a, attn = self.attn(self.norm1(tokens), self.norm1(patches))
        tokens = tokens + self.gamma1 * a
        tokens = tokens + self.gamma2 * self.mlp(self.norm2(tokens))
        return tokens, attn


class CamHead(Module):
    """Reshape patch tokens to the grid, convolve to C channels, pool to logits."""

    def __init__(self, cfg: ModelConfig, init: _Init):
        k = cfg.cam_kernel
        self.weight = init.weight(k, k, cfg.embed_dim, cfg.num_concepts)
        self.bias = init.zeros(cfg.num_concepts)
        self.grid = cfg.grid
        self.pooling = cfg.pooling
        self.decay = cfg.gwrp_decay
        self.padding = cfg.cam_padding

    def __call__(self, patch_tokens: Tensor) -> tuple[Tensor, Tensor]:
        *lead, m, d = patch_tokens.shape
        if m != self.grid ** 2:
            raise ValueError(f"expected {self.grid ** 2} patch tokens, got {m}")
        fmap = ops.reshape(patch_tokens, (*lead, self.grid, self.grid, d))
        cam = ops.conv2d(fmap, self.weight, self.bias, pad_mode=self.padding)
        return cam, ops.pool(cam, self.pooling, self.decay)


# -- model --------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Attention weights captured during one forward pass.

    ``patch`` holds (B, heads, M, M) arrays, ``text`` and ``visual`` hold
    (B, heads, C, M) concept-to-patch arrays, one entry per layer.
    """

    patch: list = field(default_factory=list)
    text: list = field(default_factory=list)
    visual: list = field(default_factory=list)


@dataclass
class ConceptScores:
    visual: Tensor
    patch: Tensor
    text: Optional[Tensor] = None

    def branches(self) -> list[Tensor]:
        out = [self.visual, self.patch]
        if self.text is not None:
            out.append(self.text)
        return out

    def mean_logits(self) -> Tensor:
        br = self.branches()
        total = br[0]
        for b in br[1:]:
            total = total + b
        return total * (1.0 / len(br))

    def probabilities(self) -> np.ndarray:
        return predict(self)


def predict(scores: ConceptScores) -> np.ndarray:
    """Sigmoid of the arithmetic mean of the available branch logits."""
    logits = np.mean([b.data for b in scores.branches()], axis=0)
    return ops._sigmoid(np.asarray(logits))


@dataclass
class ForwardOutput:
    scores: ConceptScores
    tokens: Tensor
    cam: Tensor
    trace: Optional[AttentionTrace]
    visual_layer_tokens: list


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, M, patch*patch*3), patches in row-major grid order."""
    b, h, w, c = images.shape
    n_h, n_w = h // patch, w // patch
    x = images.reshape(b, n_h, patch, n_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n_h * n_w, patch * patch * c)


class ConceptTokenTransformer(Module):
    def __init__(self, cfg: ModelConfig, text_bank: TextConceptBank | None = None, dtype=None):
        self.config = cfg
        dtype = ad.get_default_dtype() if dtype is None else np.dtype(dtype)
        init = _Init(np.random.default_rng(cfg.seed), cfg.init_std, dtype)
        d, c, m = cfg.embed_dim, cfg.num_concepts, cfg.num_patches
        pdim = cfg.patch_size ** 2 * 3

        self.patch_proj = Linear(pdim, d, init)
        self.pos_embed = init.weight(m, d)
        self.visual_tokens = init.weight(c, d)
        self.patch_blocks = [SelfAttentionBlock(cfg, init) for _ in range(cfg.patch_layers)]
        self.text_blocks = (
            [ConceptAttentionBlock(cfg, init) for _ in range(cfg.text_layers)]
            if cfg.uses_text_stage else [])
        self.visual_blocks = [ConceptAttentionBlock(cfg, init) for _ in range(cfg.visual_layers)]
        self.norm = LayerNorm(d, init, cfg.ln_eps)
        self.cam_head = CamHead(cfg, init)

        self.text_bank = text_bank
        self.text_embeddings = None
        self.text_projection = None
        self.text_tokens = None
        if cfg.needs_text_bank:
            if text_bank is None:
                raise ValueError(f"variant {cfg.variant!r} needs a TextConceptBank")
            if text_bank.num_concepts != c:
                raise ValueError(f"text bank has {text_bank.num_concepts} rows, model has {c} concepts")
            if text_bank.projection.shape != (cfg.text_dim, d):
                raise ValueError(
                    f"text projection shape {text_bank.projection.shape} != {(cfg.text_dim, d)}")
            self.text_embeddings = Tensor(text_bank.embeddings, dtype=dtype)
            if cfg.freeze_text_tokens:
                self.text_tokens = Tensor(text_bank.tokens, dtype=dtype)
            else:
                self.text_projection = ad.parameter(text_bank.projection, dtype=dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.pos_embed.data.dtype

    def concept_text_tokens(self) -> Tensor | None:
        if self.text_tokens is not None:
            return self.text_tokens
        if self.text_projection is not None:
            return ops.matmul(self.text_embeddings, self.text_projection)
        return None

    def patch_embed(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
        patches = Tensor(patchify(images.astype(self.dtype, copy=False), cfg.patch_size), dtype=self.dtype)
        return self.patch_proj(patches) + self.pos_embed

    def forward(self, images: np.ndarray, record_trace: bool = False) -> ForwardOutput:
        cfg = self.config
        x = self.patch_embed(images)
        b = x.shape[0]
        trace = AttentionTrace() if record_trace else None

        for blk in self.patch_blocks:
            x, attn = blk(x)
            if trace is not None:
                trace.patch.append(attn)

        t_tc = self.concept_text_tokens()
        text = None
        if cfg.uses_text_stage:
            text = ops.broadcast_to(t_tc, (b, *t_tc.shape))
            for blk in self.text_blocks:
                text, attn = blk(text, x)
                if trace is not None:
                    trace.text.append(attn)

        vis = self.visual_tokens
        if cfg.fuses_text:
            vis = vis + t_tc
        vis = ops.broadcast_to(vis, (b, *vis.shape))
        layer_tokens = []
        for blk in self.visual_blocks:
            vis, attn = blk(vis, x)
            layer_tokens.append(vis)
            if trace is not None:
                trace.visual.append(attn)

        parts = [vis, text, x] if text is not None else [vis, x]
        out = self.norm(ops.concat(parts, axis=1))
        lay = cfg.layout
        y_vc = ops.mean(out[:, lay.visual], axis=-1)
        y_tc = ops.mean(out[:, lay.text], axis=-1) if text is not None else None
        cam, y_p = self.cam_head(out[:, lay.patch])
        scores = ConceptScores(visual=y_vc, patch=y_p, text=y_tc)
        return ForwardOutput(scores, out, cam, trace, layer_tokens)

    __call__ = forward

    def infer(self, images: np.ndarray, batch_size: int = 64, record_trace: bool = True):
        """Gradient-free forward over ``images`` in chunks; yields ForwardOutput per chunk."""
        images = np.asarray(images)
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                yield self.forward(images[start:start + batch_size], record_trace=record_trace)

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        chunks = [predict(o.scores) for o in self.infer(images, batch_size, record_trace=False)]
        if not chunks:
            return np.zeros((0, self.config.num_concepts), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

