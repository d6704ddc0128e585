"""Tiny pre-norm encoder-decoder transformer with parallel adapter slots.

Adapters sit only at FFN sub-layers. The encoder carries one task-shared
adapter per layer (owned by the backbone, zero-initialized); decoder adapters
are supplied per call because they are generated per task. With every adapter
zero the stack computes exactly what the adapter-free backbone computes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError

NEG_MASK = -1e30  # additive attention mask value; large but overflow-safe


@dataclass
class ModelConfig:
    d: int
    n_heads: int
    d_ff: int
    enc_layers: int
    dec_layers: int
    bottleneck: int          # adapter inner width, far below d
    vocab_size: int
    max_len: int
    dropout: float = 0.0
    literal_blocks: bool = False  # FFN block residual is LN(x) instead of x
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not (1 <= self.bottleneck < self.d):
            raise ConfigError(f"bottleneck={self.bottleneck} must satisfy 1 <= b < d={self.d}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")


@dataclass
class AdapterParams:
    """Bottleneck adapter: down-project d->b, ReLU, up-project b->d.

    Note the shape convention: ``down_w`` is [b, d] and acts on the right as
    x @ down_w.T; ``up_w`` is [d, b]. Parameter count is 2*d*b + b + d.
    """

    down_w: Tensor  # [b, d]
    up_w: Tensor    # [d, b]
    down_b: Tensor  # [b]
    up_b: Tensor    # [d]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}down_w": self.down_w, f"{prefix}up_w": self.up_w,
                f"{prefix}down_b": self.down_b, f"{prefix}up_b": self.up_b}

    def n_params(self) -> int:
        return (self.down_w.size + self.up_w.size + self.down_b.size + self.up_b.size)


def zero_adapter(d: int, b: int, requires_grad: bool = True) -> AdapterParams:
    return AdapterParams(
        down_w=Tensor(np.zeros((b, d)), requires_grad=requires_grad),
        up_w=Tensor(np.zeros((d, b)), requires_grad=requires_grad),
        down_b=Tensor(np.zeros(b), requires_grad=requires_grad),
        up_b=Tensor(np.zeros(d), requires_grad=requires_grad),
    )


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{n}": getattr(self, n)
                for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


@dataclass
class FFNParams:
    w1: Tensor  # [d, d_ff]
    b1: Tensor
    w2: Tensor  # [d_ff, d]
    b2: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}gain": self.gain, f"{prefix}bias": self.bias}


@dataclass
class EncoderLayerParams:
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ffn: LayerNormParams
    ffn: FFNParams
    adapter: AdapterParams  # task-shared, one per encoder layer

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        out.update(self.ln_attn.named_parameters(f"{prefix}ln_attn."))
        out.update(self.attn.named_parameters(f"{prefix}attn."))
        out.update(self.ln_ffn.named_parameters(f"{prefix}ln_ffn."))
        out.update(self.ffn.named_parameters(f"{prefix}ffn."))
        out.update(self.adapter.named_parameters(f"{prefix}adapter."))
        return out


@dataclass
class DecoderLayerParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    ln_cross: LayerNormParams
    cross_attn: AttentionParams
    ln_ffn: LayerNormParams
    ffn: FFNParams

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        out.update(self.ln_self.named_parameters(f"{prefix}ln_self."))
        out.update(self.self_attn.named_parameters(f"{prefix}self_attn."))
        out.update(self.ln_cross.named_parameters(f"{prefix}ln_cross."))
        out.update(self.cross_attn.named_parameters(f"{prefix}cross_attn."))
        out.update(self.ln_ffn.named_parameters(f"{prefix}ln_ffn."))
        out.update(self.ffn.named_parameters(f"{prefix}ffn."))
        return out


@dataclass
class BackboneParams:
    embed: Tensor                      # [V, d]
    enc: list[EncoderLayerParams]
    dec: list[DecoderLayerParams]
    enc_final_ln: LayerNormParams
    dec_final_ln: LayerNormParams
    head_w: Tensor                     # [d, V]
    head_b: Tensor                     # [V]
    pos: np.ndarray = field(repr=False, default=None)  # constant sinusoid table

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, layer in enumerate(self.enc):
            out.update(layer.named_parameters(f"enc.{i}."))
        for i, layer in enumerate(self.dec):
            out.update(layer.named_parameters(f"dec.{i}."))
        out.update(self.enc_final_ln.named_parameters("enc_final_ln."))
        out.update(self.dec_final_ln.named_parameters("dec_final_ln."))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def adapter_parameter_names(self) -> set[str]:
        return {name for name in self.named_parameters() if ".adapter." in name}

    def freeze(self) -> None:
        """Freeze everything except the task-shared encoder adapters."""
        adapters = self.adapter_parameter_names()
        for name, p in self.named_parameters().items():
            if name not in adapters:
                p.requires_grad = False


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    i = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def _attention_params(rng: np.random.Generator, d: int) -> AttentionParams:
    def lin():
        return Tensor(_xavier(rng, d, d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True)

    wq, bq = lin()
    wk, bk = lin()
    wv, bv = lin()
    wo, bo = lin()
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo)


def _ffn_params(rng: np.random.Generator, d: int, d_ff: int) -> FFNParams:
    return FFNParams(
        w1=Tensor(_xavier(rng, d, d_ff), requires_grad=True),
        b1=Tensor(np.zeros(d_ff), requires_grad=True),
        w2=Tensor(_xavier(rng, d_ff, d), requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
    )


def _ln_params(d: int) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(d), requires_grad=True),
                           Tensor(np.zeros(d), requires_grad=True))


def build_backbone(cfg: ModelConfig, rng: np.random.Generator) -> BackboneParams:
    d = cfg.d
    enc = [EncoderLayerParams(_ln_params(d), _attention_params(rng, d),
                              _ln_params(d), _ffn_params(rng, d, cfg.d_ff),
                              zero_adapter(d, cfg.bottleneck))
           for _ in range(cfg.enc_layers)]
    dec = [DecoderLayerParams(_ln_params(d), _attention_params(rng, d),
                              _ln_params(d), _attention_params(rng, d),
                              _ln_params(d), _ffn_params(rng, d, cfg.d_ff))
           for _ in range(cfg.dec_layers)]
    return BackboneParams(
        embed=Tensor(rng.normal(0.0, 0.5, size=(cfg.vocab_size, d)), requires_grad=True),
        enc=enc,
        dec=dec,
        enc_final_ln=_ln_params(d),
        dec_final_ln=_ln_params(d),
        head_w=Tensor(_xavier(rng, d, cfg.vocab_size), requires_grad=True),
        head_b=Tensor(np.zeros(cfg.vocab_size), requires_grad=True),
        pos=sinusoid_table(cfg.max_len, d),
    )


# ---------------------------------------------------------------------------
# forward blocks
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b). Leading dims are flattened internally."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.matmul(flat, w)
    if b is not None:
        out = ad.add_rowvec(out, b)
    return ad.reshape(out, lead + (w.shape[1],))


def adapter_forward(x: Tensor, p: AdapterParams, mode: str = "parallel_branch") -> Tensor:
    """Bottleneck adapter on the last dim of x.

    ``parallel_branch`` returns only up(relu(down(x))) with biases; the
    residual belongs to the enclosing block. ``sequential`` adds x back,
    so zero weights give the identity map exactly.
    """
    if mode not in ("sequential", "parallel_branch"):
        raise ContractError(f"unknown adapter mode {mode!r}")
    if x.shape[-1] != p.down_w.shape[1]:
        raise DimensionError(f"adapter width {p.down_w.shape[1]} but input {x.shape}")
    h = ad.relu(linear(x, ad.transpose2d(p.down_w), p.down_b))
    branch = linear(h, ad.transpose2d(p.up_w), p.up_b)
    return ad.add(branch, x) if mode == "sequential" else branch


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    return linear(ad.relu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def ffn_block_forward(x: Tensor, ln: LayerNormParams, ffn: FFNParams,
                      adapter=None, literal: bool = False, ln_eps: float = 1e-5) -> Tensor:
    """Pre-norm FFN block with an optional parallel adapter branch.

    ``adapter`` is an AdapterParams, a callable mapping the normalized input
    to a branch tensor, or None to skip the branch entirely. ``literal``
    swaps the residual stream from x to LN(x).
    """
    xn = ad.layer_norm(x, ln.gain, ln.bias, ln_eps)
    out = ad.add(xn if literal else x, ffn_forward(xn, ffn))
    if adapter is not None:
        branch = adapter(xn) if callable(adapter) else adapter_forward(xn, adapter)
        out = ad.add(out, branch)
    return out


def attention_block_forward(x: Tensor, ln: LayerNormParams, p: AttentionParams,
                            n_heads: int, mask: np.ndarray | None,
                            kv: Tensor | None = None, ln_eps: float = 1e-5) -> Tensor:
    """Pre-norm multi-head attention block with residual.

    ``kv`` switches to cross-attention (keys/values from the encoder output,
    already normalized by the encoder's final LN). ``mask`` is a constant
    additive array broadcastable to [B, H, T_q, T_k].
    """
    b, t_q, d = x.shape
    dh = d // n_heads
    xn = ad.layer_norm(x, ln.gain, ln.bias, ln_eps)
    src = kv if kv is not None else xn
    t_k = src.shape[1]

    def heads(t: Tensor, length: int) -> Tensor:
        return ad.permute(ad.reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(xn, p.wq, p.bq), t_q)
    k = heads(linear(src, p.wk, p.bk), t_k)
    v = heads(linear(src, p.wv, p.bv), t_k)
    scores = ad.scale(ad.bmm(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.add_constant(scores, mask)
    ctx = ad.bmm(ad.softmax_lastdim(scores), v)
    merged = ad.reshape(ad.permute(ctx, (0, 2, 1, 3)), (b, t_q, d))
    return ad.add(x, linear(merged, p.wo, p.bo))


def padding_attention_mask(input_mask: np.ndarray) -> np.ndarray:
    """[B, T] validity mask -> additive [B, 1, 1, T] key mask."""
    return (1.0 - input_mask)[:, None, None, :] * NEG_MASK


def causal_attention_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_MASK), k=1)[None, None, :, :]


def _check_tokens(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if ids.max(initial=0) >= cfg.vocab_size:
        raise IndexError(f"token id {int(ids.max())} outside vocab of {cfg.vocab_size}")
    if ids.shape[1] > cfg.max_len:
        ids = ids[:, :cfg.max_len]  # truncate, never grow
    return ids


def embed_tokens(ids: np.ndarray, backbone: BackboneParams, cfg: ModelConfig) -> Tensor:
    ids = _check_tokens(ids, cfg)
    x = ad.take_rows(backbone.embed, ids)
    return ad.add_constant(x, backbone.pos[None, :ids.shape[1], :])


def encode(input_ids: np.ndarray, input_mask: np.ndarray, backbone: BackboneParams,
           cfg: ModelConfig, use_adapters: bool = True) -> Tensor:
    """Encoder stack; the task-shared adapter rides every FFN block."""
    input_ids = _check_tokens(input_ids, cfg)
    input_mask = input_mask[:, :input_ids.shape[1]]
    x = embed_tokens(input_ids, backbone, cfg)
    mask = padding_attention_mask(input_mask)
    for layer in backbone.enc:
        x = attention_block_forward(x, layer.ln_attn, layer.attn, cfg.n_heads, mask,
                                    ln_eps=cfg.ln_eps)
        x = ffn_block_forward(x, layer.ln_ffn, layer.ffn,
                              adapter=layer.adapter if use_adapters else None,
                              literal=cfg.literal_blocks, ln_eps=cfg.ln_eps)
    return ad.layer_norm(x, backbone.enc_final_ln.gain, backbone.enc_final_ln.bias, cfg.ln_eps)


def mean_pool(hidden: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Per-example mean of hidden states over unmasked positions only."""
    if hidden.shape[:2] != pad_mask.shape:
        raise DimensionError(f"mean_pool: hidden {hidden.shape} vs mask {pad_mask.shape}")
    counts = pad_mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("mean_pool: a row has no unmasked positions")
    masked = ad.mul_constant(hidden, pad_mask[:, :, None])
    summed = ad.sum_axis(masked, axis=1)
    return ad.mul_constant(summed, (1.0 / counts)[:, None])


def decode(encoder_out: Tensor, encoder_mask: np.ndarray, target_in_ids: np.ndarray,
           backbone: BackboneParams, cfg: ModelConfig, decoder_adapters) -> Tensor:
    """Teacher-forced decoder pass; layer m uses decoder_adapters[m].

    ``decoder_adapters`` is a list of length dec_layers whose entries are
    AdapterParams, callables on the normalized FFN input, or None.
    """
    if decoder_adapters is not None and len(decoder_adapters) != cfg.dec_layers:
        raise ContractError(
            f"expected {cfg.dec_layers} decoder adapters, got {len(decoder_adapters)}")
    target_in_ids = _check_tokens(target_in_ids, cfg)
    x = embed_tokens(target_in_ids, backbone, cfg)
    self_mask = causal_attention_mask(target_in_ids.shape[1])
    cross_mask = padding_attention_mask(encoder_mask)
    for m, layer in enumerate(backbone.dec):
        x = attention_block_forward(x, layer.ln_self, layer.self_attn, cfg.n_heads,
                                    self_mask, ln_eps=cfg.ln_eps)
        x = attention_block_forward(x, layer.ln_cross, layer.cross_attn, cfg.n_heads,
                                    cross_mask, kv=encoder_out, ln_eps=cfg.ln_eps)
        x = ffn_block_forward(x, layer.ln_ffn, layer.ffn,
                              adapter=None if decoder_adapters is None else decoder_adapters[m],
                              literal=cfg.literal_blocks, ln_eps=cfg.ln_eps)
    x = ad.layer_norm(x, backbone.dec_final_ln.gain, backbone.dec_final_ln.bias, cfg.ln_eps)
    return linear(x, backbone.head_w, backbone.head_b)
