"""Instance retriever, prototype bank, contrastive losses, and adapter generation.

The retriever maps mean-pooled encoder states into a small retrieval space
where an InfoNCE loss clusters same-task instances and a prototypical loss
pulls each task's trainable prototype to the center of its cluster. A
two-stage hypernetwork (mixing projection, then generator) turns a
(prototype, layer embedding) pair into one adapter's weights. New tasks are
served by retrieving the nearest prototype under cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DimensionError
from .model import AdapterParams, BackboneParams, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class RetrieverParams:
    """Two biasless linear layers with a ReLU between: z = w2 @ relu(w1 @ h)."""

    w1: Tensor  # [d_r, d]
    w2: Tensor  # [d_r, d_r]

    def named_parameters(self, prefix: str = "retriever.") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}w2": self.w2}


@dataclass
class PrototypeBank:
    """Trainable task prototypes plus decoder layer embeddings."""

    prototypes: Tensor | None    # [tau, z_dim]; None in the no-prototype ablation
    layer_embed: Tensor          # [dec_layers, d_r]
    task_names: list[str]

    def named_parameters(self, prefix: str = "bank.") -> dict[str, Tensor]:
        out = {}
        if self.prototypes is not None:
            out[f"{prefix}prototypes"] = self.prototypes
        out[f"{prefix}layer_embed"] = self.layer_embed
        return out

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)


@dataclass
class HyperNetParams:
    """Biasless two-stage generator of adapter weights."""

    mix_w: Tensor  # [d_h, z_dim + d_r], projects concat(prototype, layer embedding)
    gen_w: Tensor  # [2*d*b + b + d, d_h]

    def named_parameters(self, prefix: str = "hyper.") -> dict[str, Tensor]:
        return {f"{prefix}mix_w": self.mix_w, f"{prefix}gen_w": self.gen_w}


@dataclass
class ContrastiveBatch:
    """Retrieval vectors with task identities; index sets derive from these."""

    z: Tensor                 # [N, z_dim]
    task_ids: np.ndarray      # [N] int

    def __post_init__(self):
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        if self.z.shape[0] != self.task_ids.shape[0]:
            raise DimensionError(
                f"{self.z.shape[0]} vectors but {self.task_ids.shape[0]} task ids")

    def counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.task_ids, return_counts=True)
        return {int(t): int(c) for t, c in zip(ids, counts)}


def retrieve_vector(h: Tensor, r: RetrieverParams) -> Tensor:
    """Project pooled encoder states [B, d] into retrieval space [B, d_r]."""
    if h.shape[-1] != r.w1.shape[1]:
        raise DimensionError(f"retriever expects width {r.w1.shape[1]}, got {h.shape}")
    inner = ad.relu(ad.matmul(h, ad.transpose2d(r.w1)))
    return ad.matmul(inner, ad.transpose2d(r.w2))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors as a differentiable scalar."""
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_similarity on vectors, got {a.shape} and {b.shape}")
    c = ad.cosine_rows(ad.reshape(a, (1, -1)), ad.reshape(b, (1, -1)))
    return ad.reshape(c, ())


def info_nce_loss(cb: ContrastiveBatch, temperature: float = 1.0,
                  positive_in_denominator: bool = True) -> Tensor:
    """In-batch InfoNCE over retrieval vectors, averaged per task.

    For each anchor, every same-task vector is a positive and every
    other-task vector is a negative. Each (anchor, positive) term uses a
    denominator of that positive plus all negatives, so the loss is
    non-negative; ``positive_in_denominator=False`` switches to a
    negatives-only denominator for ablation. Tasks with a single in-batch
    sample have no positives and are skipped.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    n = cb.z.shape[0]
    counts = cb.counts()
    if len(counts) < 2:
        raise ContractError("contrastive batch needs at least two tasks")

    same = cb.task_ids[:, None] == cb.task_ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    n_i = np.array([counts[int(t)] for t in cb.task_ids])

    contributing_tasks = sorted(t for t, c in counts.items() if c >= 2)
    skipped = sorted(t for t, c in counts.items() if c == 1)
    if skipped:
        log.debug("info_nce: skipping single-sample tasks %s", skipped)
    if not contributing_tasks:
        log.debug("info_nce: no task has two in-batch samples; loss is 0")
        return Tensor(0.0)

    s = ad.scale(ad.cosine_rows(cb.z, cb.z), 1.0 / temperature)
    # Row-wise constant shift over the entries that can appear in any term.
    relevant = pos_mask | neg_mask
    shift = np.where(relevant, s.data, -np.inf).max(axis=1)
    e = ad.exp(ad.add_colvec(s, Tensor(-shift)))
    neg_sum = ad.sum_axis(ad.mul_constant(e, neg_mask.astype(np.float64)), axis=1)
    den = ad.add_colvec(e, neg_sum) if positive_in_denominator \
        else ad.add_colvec(ad.mul_constant(e, np.zeros((n, n))), neg_sum)
    log_den = ad.add_colvec(ad.log(den), Tensor(shift))

    # weight matrix: 1/(N_i - 1) on every (anchor, positive) pair
    w = np.where(pos_mask, 1.0 / np.maximum(n_i - 1, 1)[:, None], 0.0)
    per_pair = ad.sub(s, log_den)
    total = ad.sum_all(ad.mul_constant(per_pair, w))
    return ad.scale(total, -1.0 / len(contributing_tasks))


def prototype_loss(cb: ContrastiveBatch, bank: PrototypeBank, temperature: float = 1.0,
                   positive_in_denominator: bool = True) -> Tensor:
    """Pull each task's prototype toward its instances' retrieval vectors.

    Softmax over all prototypes per sample (negatives-only denominator behind
    the ablation switch); sample terms are weighted by 1/max(N_i - 1, 1) and
    averaged over the tasks present in the batch.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if bank.prototypes is None:
        raise ContractError("prototype_loss needs a prototype bank")
    tau = bank.prototypes.shape[0]
    if tau < 2:
        raise ContractError("prototype loss needs at least two prototypes")
    counts = cb.counts()
    if max(counts) >= tau:
        raise ContractError(f"task id {max(counts)} outside bank of {tau} prototypes")

    s = ad.scale(ad.cosine_rows(cb.z, bank.prototypes), 1.0 / temperature)
    n = cb.z.shape[0]
    own = np.zeros((n, tau))
    own[np.arange(n), cb.task_ids] = 1.0

    den_mask = np.ones((n, tau)) if positive_in_denominator else 1.0 - own
    shift = np.where(den_mask > 0, s.data, -np.inf).max(axis=1)
    e = ad.exp(ad.add_colvec(s, Tensor(-shift)))
    den = ad.sum_axis(ad.mul_constant(e, den_mask), axis=1)
    log_den = ad.add(ad.log(den), Tensor(shift))

    own_score = ad.sum_axis(ad.mul_constant(s, own), axis=1)
    per_sample = ad.sub(own_score, log_den)
    n_i = np.array([counts[int(t)] for t in cb.task_ids])
    w = 1.0 / np.maximum(n_i - 1, 1)
    total = ad.sum_all(ad.mul_constant(per_sample, w))
    return ad.scale(total, -1.0 / len(counts))


def total_loss(l_plm: Tensor, l_ir: Tensor, l_pro: Tensor, lam: float) -> Tensor:
    """Task cross-entropy plus the weighted contrastive terms."""
    if lam < 0:
        raise ContractError("balancing factor must be non-negative")
    return ad.add(l_plm, ad.scale(ad.add(l_ir, l_pro), lam))


# ---------------------------------------------------------------------------
# adapter generation
# ---------------------------------------------------------------------------

def _flat_sections(cfg: ModelConfig) -> list[int]:
    d, b = cfg.d, cfg.bottleneck
    # Flat layout, fixed: up_w (d*b) | down_w (b*d) | down_b (b) | up_b (d).
    return [d * b, b * d, b, d]


def generate_adapter(k: Tensor, e: Tensor, hyper: HyperNetParams,
                     cfg: ModelConfig) -> AdapterParams:
    """Generate one adapter from a task embedding and a layer embedding."""
    if k.ndim != 1 or e.ndim != 1:
        raise DimensionError("generate_adapter takes vector embeddings")
    if k.shape[0] + e.shape[0] != hyper.mix_w.shape[1]:
        raise DimensionError(
            f"mix input {k.shape[0]}+{e.shape[0]} != {hyper.mix_w.shape[1]}")
    col = ad.reshape(ad.concat([k, e], axis=0), (-1, 1))
    mixed = ad.matmul(hyper.mix_w, col)          # [d_h, 1]
    flat = ad.matmul(hyper.gen_w, mixed)         # [P, 1]
    d, b = cfg.d, cfg.bottleneck
    sizes = _flat_sections(cfg)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    up_w = ad.reshape(ad.narrow(flat, 0, int(offs[0]), sizes[0]), (d, b))
    down_w = ad.reshape(ad.narrow(flat, 0, int(offs[1]), sizes[1]), (b, d))
    down_b = ad.reshape(ad.narrow(flat, 0, int(offs[2]), sizes[2]), (b,))
    up_b = ad.reshape(ad.narrow(flat, 0, int(offs[3]), sizes[3]), (d,))
    return AdapterParams(down_w=down_w, up_w=up_w, down_b=down_b, up_b=up_b)


def generate_all_decoder_adapters(task_index: int, bank: PrototypeBank,
                                  hyper: HyperNetParams, cfg: ModelConfig) -> list[AdapterParams]:
    """One generated adapter per decoder layer for the given task."""
    if bank.prototypes is None:
        raise ContractError("no prototype bank to generate from")
    if not (0 <= task_index < bank.prototypes.shape[0]):
        raise IndexError(f"task index {task_index} outside bank of {bank.prototypes.shape[0]}")
    k = ad.reshape(ad.narrow(bank.prototypes, 0, task_index, 1), (-1,))
    out = []
    for m in range(cfg.dec_layers):
        e = ad.reshape(ad.narrow(bank.layer_embed, 0, m, 1), (-1,))
        out.append(generate_adapter(k, e, hyper, cfg))
    return out


def generate_adapter_stack(ks: Tensor, layer_index: int, bank: PrototypeBank,
                           hyper: HyperNetParams, cfg: ModelConfig):
    """Per-example adapters for one decoder layer, batched.

    ``ks`` is [B, z_dim] conditioning embeddings (one per example). Returns
    stacked arrays (up_w [B,d,b], down_w [B,b,d], down_b [B,b], up_b [B,d]).
    """
    bsz = ks.shape[0]
    e_rows = ad.take_rows(bank.layer_embed, np.full(bsz, layer_index, dtype=np.int64))
    inputs = ad.concat([ks, e_rows], axis=1)                  # [B, z_dim + d_r]
    mixed = ad.matmul(inputs, ad.transpose2d(hyper.mix_w))    # [B, d_h]
    flat = ad.matmul(mixed, ad.transpose2d(hyper.gen_w))      # [B, P]
    d, b = cfg.d, cfg.bottleneck
    sizes = _flat_sections(cfg)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    up_w = ad.reshape(ad.narrow(flat, 1, int(offs[0]), sizes[0]), (bsz, d, b))
    down_w = ad.reshape(ad.narrow(flat, 1, int(offs[1]), sizes[1]), (bsz, b, d))
    down_b = ad.reshape(ad.narrow(flat, 1, int(offs[2]), sizes[2]), (bsz, b))
    up_b = ad.reshape(ad.narrow(flat, 1, int(offs[3]), sizes[3]), (bsz, d))
    return up_w, down_w, down_b, up_b


def stacked_adapter_branch(stack):
    """Callable applying per-example adapters to the normalized block input."""
    up_w, down_w, down_b, up_b = stack

    def branch(xn: Tensor) -> Tensor:
        h = ad.add_rowvec_per_batch(ad.bmm(xn, ad.permute(down_w, (0, 2, 1))), down_b)
        return ad.add_rowvec_per_batch(ad.bmm(ad.relu(h), ad.permute(up_w, (0, 2, 1))), up_b)

    return branch


# ---------------------------------------------------------------------------
# retrieval and accounting
# ---------------------------------------------------------------------------

def match_prototype(support_z, bank: PrototypeBank) -> tuple[int, np.ndarray]:
    """Nearest prototype by mean cosine score over a support set.

    Returns (argmax index, full score vector); ties resolve to the lowest
    index. Zero-norm support vectors are skipped with a warning.
    """
    if bank.prototypes is None:
        raise ContractError("no prototype bank to match against")
    z = support_z.data if isinstance(support_z, Tensor) else np.asarray(support_z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DegenerateInputError("support must be a non-empty [k, z_dim] array")
    norms = np.linalg.norm(z, axis=1)
    keep = norms > 0.0
    if not np.all(keep):
        log.warning("match_prototype: skipping %d zero-norm support vectors",
                    int((~keep).sum()))
    z = z[keep]
    if z.shape[0] == 0:
        raise DegenerateInputError("every support vector had zero norm")
    protos = bank.prototypes.data
    pn = np.linalg.norm(protos, axis=1)
    if np.any(pn == 0.0):
        raise DegenerateInputError("prototype bank contains a zero-norm row")
    cos = (z / np.linalg.norm(z, axis=1, keepdims=True)) @ (protos / pn[:, None]).T
    scores = cos.mean(axis=0)
    return int(np.argmax(scores)), scores


@dataclass
class ParamReport:
    retriever: int
    embeddings: int
    projection: int
    hypernet: int
    shared_adapters: int

    @property
    def total(self) -> int:
        return (self.retriever + self.embeddings + self.projection
                + self.hypernet + self.shared_adapters)

    def as_dict(self) -> dict[str, int]:
        return {"retriever": self.retriever, "embeddings": self.embeddings,
                "projection": self.projection, "hypernet": self.hypernet,
                "shared_adapters": self.shared_adapters, "total": self.total}


def count_parameters(cfg: ModelConfig, retrieval_dim: int, hyper_dim: int,
                     num_tasks: int) -> ParamReport:
    """Closed-form trainable-parameter budget for the full system."""
    if min(retrieval_dim, hyper_dim, num_tasks) < 1:
        raise ContractError("dimensions must be positive")
    d, b = cfg.d, cfg.bottleneck
    per_adapter = 2 * d * b + b + d
    return ParamReport(
        retriever=d * retrieval_dim + retrieval_dim ** 2,
        embeddings=(num_tasks + cfg.dec_layers) * retrieval_dim,
        projection=2 * retrieval_dim * hyper_dim,
        hypernet=hyper_dim * per_adapter,
        shared_adapters=cfg.enc_layers * per_adapter,
    )


# ---------------------------------------------------------------------------
# assembled system
# ---------------------------------------------------------------------------

@dataclass
class PHASystem:
    """Frozen backbone plus every trainable piece of the adapter machinery."""

    cfg: ModelConfig
    backbone: BackboneParams
    retriever: RetrieverParams | None
    bank: PrototypeBank
    hyper: HyperNetParams
    retrieval_dim: int
    hyper_dim: int
    no_prototype: bool = False
    no_retriever: bool = False

    @property
    def z_dim(self) -> int:
        return self.cfg.d if self.no_retriever else self.retrieval_dim

    def trainable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.retriever is not None:
            out.update(self.retriever.named_parameters())
        out.update(self.bank.named_parameters())
        out.update(self.hyper.named_parameters())
        for i, layer in enumerate(self.backbone.enc):
            out.update(layer.adapter.named_parameters(f"enc.{i}.adapter."))
        return out

    def census(self) -> int:
        """Count of requires_grad parameters outside the frozen backbone."""
        total = 0
        seen = {id(p) for p in self.trainable_parameters().values()}
        for p in self.trainable_parameters().values():
            if p.requires_grad:
                total += p.size
        for name, p in self.backbone.named_parameters().items():
            if p.requires_grad and id(p) not in seen:
                total += p.size
        return total


def build_system(cfg: ModelConfig, backbone: BackboneParams, task_names: list[str],
                 retrieval_dim: int, hyper_dim: int, rng: np.random.Generator,
                 no_prototype: bool = False, no_retriever: bool = False,
                 hyper_out_init: str = "zero") -> PHASystem:
    """Wire retriever, bank, and hypernetwork around a (frozen) backbone.

    ``hyper_out_init`` is "zero" for training (the model starts exactly at the
    frozen backbone) or "random" for gradient-checking, where zero output
    weights would hide entire paths.
    """
    z_dim = cfg.d if no_retriever else retrieval_dim
    retriever = None
    if not no_retriever:
        retriever = RetrieverParams(
            w1=Tensor(_xavier(rng, retrieval_dim, cfg.d), requires_grad=True),
            w2=Tensor(_xavier(rng, retrieval_dim, retrieval_dim), requires_grad=True),
        )
    prototypes = None
    if not no_prototype:
        prototypes = Tensor(rng.normal(0.0, 0.02, size=(len(task_names), z_dim)),
                            requires_grad=True)
    bank = PrototypeBank(
        prototypes=prototypes,
        layer_embed=Tensor(rng.normal(0.0, 0.02, size=(cfg.dec_layers, retrieval_dim)),
                           requires_grad=True),
        task_names=list(task_names),
    )
    per_adapter = 2 * cfg.d * cfg.bottleneck + cfg.bottleneck + cfg.d
    if hyper_out_init == "zero":
        gen = np.zeros((per_adapter, hyper_dim))
    elif hyper_out_init == "random":
        gen = _xavier(rng, per_adapter, hyper_dim)
    elif hyper_out_init == "train":
        # Generated adapters must be exactly zero at step 0 (the model starts
        # at the frozen backbone), but a fully zero head is a permanent saddle:
        # with dead ReLUs the down-projection rows never receive gradient. So
        # only the up-projection and output-bias rows start at zero.
        d, b = cfg.d, cfg.bottleneck
        gen = np.zeros((per_adapter, hyper_dim))
        down_rows = slice(d * b, d * b + b * d + b)  # down_w and down_b rows
        gen[down_rows] = rng.normal(0.0, 1.0 / np.sqrt(hyper_dim),
                                    size=(b * d + b, hyper_dim))
    else:
        raise ContractError(f"unknown hyper_out_init {hyper_out_init!r}")
    hyper = HyperNetParams(
        mix_w=Tensor(_xavier(rng, hyper_dim, z_dim + retrieval_dim), requires_grad=True),
        gen_w=Tensor(gen, requires_grad=True),
    )
    return PHASystem(cfg=cfg, backbone=backbone, retriever=retriever, bank=bank,
                     hyper=hyper, retrieval_dim=retrieval_dim, hyper_dim=hyper_dim,
                     no_prototype=no_prototype, no_retriever=no_retriever)


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    std = np.sqrt(2.0 / (rows + cols))
    return rng.normal(0.0, std, size=(rows, cols))
