"""Patch-transformer classifier and masked autoencoder built on the autodiff core.

Both models share the same ingredients: images are cut into non-overlapping
square patches, linearly embedded, tagged with learned positional embeddings,
and processed by pre-norm transformer blocks (multi-head self-attention + MLP,
GELU, layer norm). The autoencoder additionally masks a random subset of
patches, encodes only the visible ones, and decodes the full token sequence
(mask tokens inserted at hidden positions) back to pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the patch decomposition of an image."""

    height: int
    width: int
    patch: int
    channels: int = 1

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"image {self.height}x{self.width} is not divisible by "
                             f"patch size {self.patch}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class MaskPattern:
    """Binary per-patch visibility vector: 1 = visible, 0 = masked."""

    bits: np.ndarray
    ratio: float

    @property
    def n_masked(self) -> int:
        return int((self.bits == 0).sum())

    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 1)

    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)


def sample_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskPattern:
    """Mask exactly round(ratio * n_patches) patches, chosen uniformly.

    ratio 0 keeps everything visible; ratio >= 1 would hide every patch and
    is rejected.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1), got {ratio}")
    n = grid.n_patches
    k = int(round(ratio * n))
    bits = np.ones(n, dtype=np.uint8)
    if k:
        bits[rng.choice(n, size=k, replace=False)] = 0
    return MaskPattern(bits=bits, ratio=ratio)


def sample_masks(grid: PatchGrid, ratio: float, rng: np.random.Generator,
                 count: int) -> list[MaskPattern]:
    return [sample_mask(grid, ratio, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# patch rearrangement


def _patch_axes(grid: PatchGrid, batch: int):
    gh, gw = grid.height // grid.patch, grid.width // grid.patch
    return (batch, gh, grid.patch, gw, grid.patch, grid.channels)


def patchify(x, grid: PatchGrid):
    """Rearrange (H, W, C) or (B, H, W, C) pixels into (…, n_patches, P*P*C).

    Pure reindexing, so it is exactly invertible (see :func:`unpatchify`) and
    differentiable when given a Tensor.
    """
    is_tensor = isinstance(x, Tensor)
    shape = x.shape
    squeeze = False
    if len(shape) == 3:
        squeeze = True
        shape = (1,) + shape
    if len(shape) != 4 or shape[1:] != (grid.height, grid.width, grid.channels):
        raise ad.ShapeError(f"patchify: expected image shape "
                            f"({grid.height}, {grid.width}, {grid.channels}), got {x.shape}")
    b = shape[0]
    mid = _patch_axes(grid, b)
    if is_tensor:
        out = ad.reshape(x, mid)
        out = ad.transpose(out, (0, 1, 3, 2, 4, 5))
        out = ad.reshape(out, (b, grid.n_patches, grid.patch_dim))
        if squeeze:
            out = ad.reshape(out, (grid.n_patches, grid.patch_dim))
        return out
    arr = np.asarray(x).reshape(mid).transpose(0, 1, 3, 2, 4, 5)
    arr = arr.reshape(b, grid.n_patches, grid.patch_dim)
    return arr[0] if squeeze else arr


def unpatchify(patches, grid: PatchGrid):
    """Inverse of :func:`patchify` (numpy arrays only)."""
    arr = np.asarray(patches)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.shape[1:] != (grid.n_patches, grid.patch_dim):
        raise ad.ShapeError(f"unpatchify: expected (…, {grid.n_patches}, {grid.patch_dim}), "
                            f"got {patches.shape}")
    b = arr.shape[0]
    gh, gw = grid.height // grid.patch, grid.width // grid.patch
    arr = arr.reshape(b, gh, gw, grid.patch, grid.patch, grid.channels)
    arr = arr.transpose(0, 1, 3, 2, 4, 5).reshape(b, grid.height, grid.width, grid.channels)
    return arr[0] if squeeze else arr


# ---------------------------------------------------------------------------
# transformer building blocks


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class TransformerBlock:
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        hidden = int(dim * mlp_ratio)
        t = lambda a: Tensor(a, requires_grad=True)
        self.ln1_g = t(np.ones(dim))
        self.ln1_b = t(np.zeros(dim))
        self.wq = t(_linear_init(rng, dim, dim))
        self.bq = t(np.zeros(dim))
        self.wk = t(_linear_init(rng, dim, dim))
        self.bk = t(np.zeros(dim))
        self.wv = t(_linear_init(rng, dim, dim))
        self.bv = t(np.zeros(dim))
        self.wo = t(_linear_init(rng, dim, dim))
        self.bo = t(np.zeros(dim))
        self.ln2_g = t(np.ones(dim))
        self.ln2_b = t(np.zeros(dim))
        self.w1 = t(_linear_init(rng, dim, hidden))
        self.b1 = t(np.zeros(hidden))
        self.w2 = t(_linear_init(rng, hidden, dim))
        self.b2 = t(np.zeros(dim))

    def params(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
                self.w1, self.b1, self.w2, self.b2]

    def _attend(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, self.dim // self.heads

        def split(z):
            return ad.transpose(ad.reshape(z, (b, n, h, dh)), (0, 2, 1, 3))

        q = split(ad.add(ad.matmul(x, self.wq), self.bq))
        k = split(ad.add(ad.matmul(x, self.wk), self.bk))
        v = split(ad.add(ad.matmul(x, self.wv), self.bv))
        att = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
        att = ad.softmax(att)
        out = ad.matmul(att, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return ad.add(ad.matmul(out, self.wo), self.bo)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self._attend(ad.layer_norm(x, self.ln1_g, self.ln1_b)))
        h = ad.layer_norm(x, self.ln2_g, self.ln2_b)
        h = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, self.w1), self.b1)), self.w2), self.b2)
        return ad.add(x, h)


def _named_block_params(prefix: str, block: TransformerBlock):
    names = ["ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
             "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"]
    return [(f"{prefix}.{n}", getattr(block, n)) for n in names]


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ClassifierConfig:
    image_hw: tuple = (28, 28)
    patch: int = 4
    channels: int = 1
    classes: int = 10
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_hw[0], self.image_hw[1], self.patch, self.channels)


class ClassifierModel:
    """Tiny ViT: patch embed + positional embed + blocks + mean pool + head.

    ``classify`` returns raw logits; ties in the argmax resolve to the lowest
    class index (numpy convention), so predictions are deterministic.
    """

    kind = "classifier"

    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        self.cfg = cfg
        grid = cfg.grid
        rng = np.random.default_rng(seed)
        t = lambda a: Tensor(a, requires_grad=True)
        self.embed_w = t(_linear_init(rng, grid.patch_dim, cfg.embed_dim))
        self.embed_b = t(np.zeros(cfg.embed_dim))
        self.pos = t(rng.normal(0.0, 0.02, size=(grid.n_patches, cfg.embed_dim)))
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.ln_g = t(np.ones(cfg.embed_dim))
        self.ln_b = t(np.zeros(cfg.embed_dim))
        self.head_w = t(_linear_init(rng, cfg.embed_dim, cfg.classes))
        self.head_b = t(np.zeros(cfg.classes))

    def param_items(self):
        items = [("embed_w", self.embed_w), ("embed_b", self.embed_b), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            items += _named_block_params(f"block{i}", blk)
        items += [("ln_g", self.ln_g), ("ln_b", self.ln_b),
                  ("head_w", self.head_w), ("head_b", self.head_b)]
        return items

    def parameters(self):
        return [p for _, p in self.param_items()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        """Logits for a batch of images (B, H, W, C) -> (B, K)."""
        tokens = patchify(x, self.cfg.grid)
        tokens = ad.add(ad.add(ad.matmul(tokens, self.embed_w), self.embed_b), self.pos)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = ad.layer_norm(tokens, self.ln_g, self.ln_b)
        pooled = ad.mean_axis(tokens, axis=1)
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)


def classify(images, model: ClassifierModel) -> np.ndarray:
    """Raw logits as a plain array; accepts one image or a batch."""
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    logits = model.forward(Tensor(arr)).data
    return logits[0] if single else logits


def predict_labels(images, model: ClassifierModel) -> np.ndarray:
    logits = classify(images, model)
    if logits.ndim == 1:
        return np.argmax(logits)
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# masked autoencoder


@dataclass(frozen=True)
class MAEConfig:
    image_hw: tuple = (28, 28)
    patch: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.75

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_hw[0], self.image_hw[1], self.patch, self.channels)


class MAEModel:
    """Masked autoencoder: encoder over visible patches, decoder over all.

    The encoder receives only the visible tokens; hidden positions re-enter
    as a learned mask token before decoding, and the head predicts pixels for
    every patch.
    """

    kind = "mae"

    def __init__(self, cfg: MAEConfig, seed: int = 0):
        self.cfg = cfg
        grid = cfg.grid
        rng = np.random.default_rng(seed)
        t = lambda a: Tensor(a, requires_grad=True)
        self.embed_w = t(_linear_init(rng, grid.patch_dim, cfg.embed_dim))
        self.embed_b = t(np.zeros(cfg.embed_dim))
        self.pos = t(rng.normal(0.0, 0.02, size=(grid.n_patches, cfg.embed_dim)))
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.enc_ln_g = t(np.ones(cfg.embed_dim))
        self.enc_ln_b = t(np.zeros(cfg.embed_dim))
        self.dec_embed_w = t(_linear_init(rng, cfg.embed_dim, cfg.decoder_dim))
        self.dec_embed_b = t(np.zeros(cfg.decoder_dim))
        self.mask_token = t(rng.normal(0.0, 0.02, size=cfg.decoder_dim))
        self.dec_pos = t(rng.normal(0.0, 0.02, size=(grid.n_patches, cfg.decoder_dim)))
        self.dec_blocks = [TransformerBlock(cfg.decoder_dim, cfg.decoder_heads,
                                            cfg.mlp_ratio, rng)
                           for _ in range(cfg.decoder_depth)]
        self.dec_ln_g = t(np.ones(cfg.decoder_dim))
        self.dec_ln_b = t(np.zeros(cfg.decoder_dim))
        self.head_w = t(_linear_init(rng, cfg.decoder_dim, grid.patch_dim))
        self.head_b = t(np.zeros(grid.patch_dim))

    def param_items(self):
        items = [("embed_w", self.embed_w), ("embed_b", self.embed_b), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            items += _named_block_params(f"enc{i}", blk)
        items += [("enc_ln_g", self.enc_ln_g), ("enc_ln_b", self.enc_ln_b),
                  ("dec_embed_w", self.dec_embed_w), ("dec_embed_b", self.dec_embed_b),
                  ("mask_token", self.mask_token), ("dec_pos", self.dec_pos)]
        for i, blk in enumerate(self.dec_blocks):
            items += _named_block_params(f"dec{i}", blk)
        items += [("dec_ln_g", self.dec_ln_g), ("dec_ln_b", self.dec_ln_b),
                  ("head_w", self.head_w), ("head_b", self.head_b)]
        return items

    def parameters(self):
        return [p for _, p in self.param_items()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def reconstruct(self, x: Tensor, masks: list[MaskPattern]) -> Tensor:
        """Predicted patches (B, n_patches, P*P*C) for a batch and its masks.

        All masks in the batch must hide the same number of patches (always
        true for masks drawn at one ratio).
        """
        grid = self.cfg.grid
        b = x.shape[0]
        if len(masks) != b:
            raise ValueError(f"got {len(masks)} masks for a batch of {b}")
        n_vis = {int(m.bits.sum()) for m in masks}
        if len(n_vis) != 1:
            raise ValueError("masks in one batch must share the visible-patch count")
        n_vis = n_vis.pop()
        if n_vis == 0:
            raise ValueError("at least one patch must stay visible")

        bits = np.stack([m.bits for m in masks])                      # (B, n)
        vis_idx = np.stack([m.visible_idx() for m in masks])          # (B, n_vis)
        # position of each patch inside the visible list (0 where masked;
        # those entries are overwritten by the mask token below)
        rank = np.zeros((b, grid.n_patches), dtype=np.int64)
        rows = np.arange(b)[:, None]
        rank[rows, vis_idx] = np.arange(n_vis)[None, :]

        tokens = patchify(x, grid)
        tokens = ad.add(ad.add(ad.matmul(tokens, self.embed_w), self.embed_b), self.pos)
        vis = ad.gather_rows(tokens, vis_idx)
        for blk in self.blocks:
            vis = blk(vis)
        vis = ad.layer_norm(vis, self.enc_ln_g, self.enc_ln_b)

        dec = ad.add(ad.matmul(vis, self.dec_embed_w), self.dec_embed_b)
        scattered = ad.gather_rows(dec, rank)                         # (B, n, Dd)
        filler = ad.add(Tensor(np.zeros(scattered.shape)), self.mask_token)
        toks = ad.where(bits[:, :, None] == 1, scattered, filler)
        toks = ad.add(toks, self.dec_pos)
        for blk in self.dec_blocks:
            toks = blk(toks)
        toks = ad.layer_norm(toks, self.dec_ln_g, self.dec_ln_b)
        return ad.add(ad.matmul(toks, self.head_w), self.head_b)


def masked_mse(pred: Tensor, target: Tensor, masks: list[MaskPattern]) -> Tensor:
    """Mean squared error over masked-patch pixels only.

    Zero by convention when no patch is masked, so ratio sweeps down to 0
    stay total.
    """
    if pred.shape != target.shape:
        raise ad.ShapeError(f"masked_mse: shapes differ, {pred.shape} vs {target.shape}")
    bits = np.stack([m.bits for m in masks])
    hidden = (bits == 0)[:, :, None]
    n_hidden_pix = int((bits == 0).sum()) * pred.shape[-1]
    if n_hidden_pix == 0:
        return Tensor(0.0)
    diff = ad.sub(pred, target)
    sq = ad.mul(diff, diff)
    kept = ad.where(hidden, sq, 0.0)
    return ad.mul(ad.tensor_sum(kept), 1.0 / n_hidden_pix)


def mae_loss(x, masks, model: MAEModel) -> Tensor:
    """Reconstruction loss of a batch (or single image) under given masks.

    The target patches come from the same input tensor, so gradients w.r.t.
    the image flow through both the masked target and the visible encoder
    input.
    """
    single = isinstance(masks, MaskPattern)
    if single:
        masks = [masks]
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if xt.ndim == 3:
        xt = ad.reshape(xt, (1,) + xt.shape)
    target = patchify(xt, model.cfg.grid)
    pred = model.reconstruct(xt, masks)
    return masked_mse(pred, target, masks)


def per_image_masked_losses(pred: np.ndarray, target: np.ndarray,
                            masks: list[MaskPattern]) -> np.ndarray:
    """Per-image masked-pixel MSE from already-computed reconstructions."""
    bits = np.stack([m.bits for m in masks])
    hidden = (bits == 0)[:, :, None]
    sq = (pred - target) ** 2
    denom = hidden.sum(axis=(1, 2)) * pred.shape[-1]
    out = np.zeros(pred.shape[0])
    nz = denom > 0
    out[nz] = (sq * hidden).sum(axis=(1, 2))[nz] / denom[nz]
    return out
