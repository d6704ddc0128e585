"""Optimization, backbone pre-training, multi-task training, and transfer.

The training loop is single-owner and sequential. With a fixed seed and one
compute thread, metrics and checkpoints are byte-identical across reruns;
no wall-clock data is ever written into run outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grad
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import PretrainConfig, RunConfig, TrainConfig
from .errors import ConfigError, ContractError, TrainingDivergedError
from .mechanism import (
    ContrastiveBatch,
    PHASystem,
    build_system,
    generate_adapter,
    generate_adapter_stack,
    generate_all_decoder_adapters,
    info_nce_loss,
    match_prototype,
    prototype_loss,
    retrieve_vector,
    stacked_adapter_branch,
    total_loss,
)
from .model import BackboneParams, ModelConfig, build_backbone, decode, encode, mean_pool
from .tasks import (
    BOS,
    CharTokenizer,
    DEFAULT_ALPHABET,
    EOS,
    Example,
    PAD,
    TaskBatch,
    generate_examples,
    pad_batch,
    sample_multitask_batch,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optimizer(params: dict[str, Tensor], weight_decay: float = 0.01) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        weight_decay=weight_decay,
    )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over the warmup, then linear peak -> 0."""
    if not (0 <= step <= cfg.total_steps):
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / max(cfg.warmup_steps, 1)
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        # decay is applied to the incoming parameter, separately from the step
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items()}


# ---------------------------------------------------------------------------
# loss composition for one mixed batch
# ---------------------------------------------------------------------------

def _split_targets(target_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher forcing: decoder input drops the last column, labels drop BOS."""
    return target_ids[:, :-1], target_ids[:, 1:]


def conditioning_vectors(system: PHASystem, enc_out: Tensor, input_mask: np.ndarray,
                         tcfg: TrainConfig) -> Tensor:
    """Mean-pool, optionally detach, and project into retrieval space."""
    h = mean_pool(enc_out, input_mask)
    if tcfg.stop_grad_h:
        h = h.detach()
    if system.no_retriever:
        return h
    return retrieve_vector(h, system.retriever)


def _contrastive_view(z: Tensor, task_ids: np.ndarray) -> ContrastiveBatch | None:
    """Drop zero-norm retrieval vectors; cosine is undefined for them.

    A dead instance (the retriever ReLU can fully collapse for one example
    mid-training) still contributes to the task loss, just not to the
    contrastive terms this step. Returns None if nothing usable remains.
    """
    norms = np.linalg.norm(z.data, axis=1)
    keep = np.nonzero(norms > 0.0)[0]
    if keep.size == z.shape[0]:
        return ContrastiveBatch(z, task_ids)
    log.warning("dropping %d zero-norm retrieval vectors from the contrastive batch",
                z.shape[0] - keep.size)
    if keep.size == 0:
        return None
    return ContrastiveBatch(ad.take_rows(z, keep), task_ids[keep])


def compute_step_losses(system: PHASystem, batch: TaskBatch, tcfg: TrainConfig):
    """Forward pass of one training step; returns the four loss tensors."""
    cfg = system.cfg
    enc_out = encode(batch.input_ids, batch.input_mask, system.backbone, cfg)
    z = conditioning_vectors(system, enc_out, batch.input_mask, tcfg)
    cb = _contrastive_view(z, batch.task_ids)

    keep_pos = not tcfg.literal_negatives_only
    l_ir = Tensor(0.0)
    l_pro = Tensor(0.0)
    if cb is not None:
        # no_retriever replaces the projection with the identity (z = h); the
        # training objective itself is unchanged, so the instance loss still
        # applies to whatever the retrieval vectors are.
        if len(cb.counts()) >= 2:
            l_ir = info_nce_loss(cb, tcfg.temperature, positive_in_denominator=keep_pos)
        if not system.no_prototype:
            l_pro = prototype_loss(cb, system.bank, tcfg.temperature,
                                   positive_in_denominator=keep_pos)

    dec_in, labels = _split_targets(batch.target_ids)
    if system.no_prototype:
        # instance-conditioned: each example gets adapters from its own vector
        adapters = [stacked_adapter_branch(
            generate_adapter_stack(z, m, system.bank, system.hyper, cfg))
            for m in range(cfg.dec_layers)]
        logits = decode(enc_out, batch.input_mask, dec_in, system.backbone, cfg, adapters)
        flat = ad.reshape(logits, (-1, cfg.vocab_size))
        l_plm = ad.softmax_cross_entropy(flat, labels.reshape(-1), ignore_index=PAD)
    else:
        # group the batch by task and decode each group with its adapters
        total_tokens = int((labels != PAD).sum())
        l_plm = None
        for task in sorted(set(int(t) for t in batch.task_ids)):
            rows = np.nonzero(batch.task_ids == task)[0]
            adapters = generate_all_decoder_adapters(task, system.bank, system.hyper, cfg)
            group_enc = ad.take_rows(enc_out, rows)
            logits = decode(group_enc, batch.input_mask[rows], dec_in[rows],
                            system.backbone, cfg, adapters)
            flat = ad.reshape(logits, (-1, cfg.vocab_size))
            group_labels = labels[rows].reshape(-1)
            ce = ad.softmax_cross_entropy(flat, group_labels, ignore_index=PAD)
            weighted = ad.scale(ce, int((group_labels != PAD).sum()) / total_tokens)
            l_plm = weighted if l_plm is None else ad.add(l_plm, weighted)

    l_total = total_loss(l_plm, l_ir, l_pro, tcfg.lambda_weight)
    return l_plm, l_ir, l_pro, l_total


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def greedy_decode(enc_out: Tensor, enc_mask: np.ndarray, backbone: BackboneParams,
                  cfg: ModelConfig, adapters, max_steps: int) -> np.ndarray:
    b = enc_out.shape[0]
    ys = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_steps):
        logits = decode(enc_out, enc_mask, ys, backbone, cfg, adapters)
        nxt = logits.data[:, -1, :].argmax(axis=1).astype(np.int64)
        nxt[done] = PAD
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    return ys[:, 1:]


def _adapters_for_eval(system: PHASystem, z: Tensor | None,
                       task_index: int | None, embedding: Tensor | None):
    cfg = system.cfg
    if system.no_prototype:
        return [stacked_adapter_branch(
            generate_adapter_stack(z, m, system.bank, system.hyper, cfg))
            for m in range(cfg.dec_layers)]
    if embedding is not None:
        rows = [ad.reshape(ad.narrow(system.bank.layer_embed, 0, m, 1), (-1,))
                for m in range(cfg.dec_layers)]
        return [generate_adapter(embedding, e, system.hyper, cfg) for e in rows]
    if task_index is None:
        raise ContractError("evaluation needs a task index or an embedding")
    return generate_all_decoder_adapters(task_index, system.bank, system.hyper, cfg)


def evaluate(system: PHASystem, examples: list[Example], task_index: int | None = None,
             embedding: Tensor | None = None, batch_size: int = 64,
             tcfg: TrainConfig | None = None) -> dict:
    """Greedy-decoding metrics: sequence exact match, token accuracy, mean loss.

    Examples are processed in a canonical sorted order, so the metrics do not
    depend on how the dataset happens to be ordered.
    """
    cfg = system.cfg
    ordered = sorted(examples, key=lambda e: (e.input_ids, e.target_ids))
    tok = CharTokenizer(DEFAULT_ALPHABET)
    seq_hits: list[float] = []
    losses: list[float] = []
    tok_correct = 0
    tok_total = 0
    tcfg = tcfg or TrainConfig()
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start:start + batch_size]
        batch = pad_batch(chunk, cfg.max_len)
        enc_out = encode(batch.input_ids, batch.input_mask, system.backbone, cfg)
        z = None
        if system.no_prototype:
            z = conditioning_vectors(system, enc_out, batch.input_mask, tcfg)
        adapters = _adapters_for_eval(system, z, task_index, embedding)

        dec_in, labels = _split_targets(batch.target_ids)
        logits = decode(enc_out, batch.input_mask, dec_in, system.backbone, cfg, adapters)
        # per-example numeric metrics straight from the logits
        ld = logits.data
        m = ld.max(axis=-1, keepdims=True)
        logp = ld - m - np.log(np.exp(ld - m).sum(axis=-1, keepdims=True))
        valid = labels != PAD
        picked = np.take_along_axis(logp, labels[:, :, None], axis=2)[:, :, 0]
        for i in range(len(chunk)):
            n_tok = int(valid[i].sum())
            losses.append(float(-picked[i][valid[i]].sum() / n_tok))
        pred_tok = ld.argmax(axis=-1)
        tok_correct += int((pred_tok[valid] == labels[valid]).sum())
        tok_total += int(valid.sum())

        preds = greedy_decode(enc_out, batch.input_mask, system.backbone, cfg,
                              adapters, max_steps=labels.shape[1] + 2)
        for i, ex in enumerate(chunk):
            seq_hits.append(1.0 if tok.detokenize(preds[i]) == ex.target_text else 0.0)
    n = len(ordered)
    return {
        "sequence_accuracy": math.fsum(seq_hits) / n,
        "token_accuracy": tok_correct / tok_total,
        "mean_loss": math.fsum(losses) / n,
        "n": n,
    }


# ---------------------------------------------------------------------------
# stage 0: backbone pre-training on a denoised copy stream
# ---------------------------------------------------------------------------

def _denoise_example(rng: np.random.Generator, pcfg: PretrainConfig,
                     tok: CharTokenizer, noise_rate: float) -> Example:
    n = int(rng.integers(pcfg.min_len, pcfg.max_len + 1))
    chars = rng.choice(list(DEFAULT_ALPHABET), size=n)
    clean = "".join(chars)
    noisy = [c if rng.random() >= noise_rate else str(rng.choice(list(DEFAULT_ALPHABET)))
             for c in clean]
    return Example(input_ids=tuple(tok.tokenize("".join(noisy))),
                   target_ids=tuple(tok.tokenize(clean)),
                   task_id=0, input_text="".join(noisy), target_text=clean)


def _backbone_subset(backbone: BackboneParams, trainable_only: bool) -> dict[str, Tensor]:
    adapters = backbone.adapter_parameter_names()
    return {name: p for name, p in backbone.named_parameters().items()
            if not trainable_only or name not in adapters}


def pretrain_backbone(cfg: ModelConfig, pcfg: PretrainConfig, seed: int,
                      progress: bool = False) -> tuple[BackboneParams, dict]:
    """Train the backbone on noisy copy until it is competent, then freeze it.

    Encoder adapters stay zero and untouched. Raises ContractError if the
    backbone cannot even reach 0.5 sequence accuracy by the step cap, since
    nothing downstream is meaningful then.
    """
    rng = np.random.default_rng(seed)
    tok = CharTokenizer(DEFAULT_ALPHABET)
    backbone = build_backbone(cfg, rng)
    params = _backbone_subset(backbone, trainable_only=True)
    state = init_optimizer(params, weight_decay=0.01)
    schedule = TrainConfig(total_steps=pcfg.steps, warmup_steps=pcfg.warmup_steps,
                           peak_lr=pcfg.peak_lr)
    # Substitution noise on random strings is unrecoverable, so the held-out
    # stream is clean copy; noise is a training-time augmentation only.
    eval_rng = np.random.default_rng(seed + 1)
    heldout = [_denoise_example(eval_rng, pcfg, tok, noise_rate=0.0)
               for _ in range(pcfg.eval_n)]

    def heldout_accuracy() -> float:
        hits = 0
        for start in range(0, len(heldout), 64):
            chunk = heldout[start:start + 64]
            batch = pad_batch(chunk, cfg.max_len)
            enc_out = encode(batch.input_ids, batch.input_mask, backbone, cfg,
                             use_adapters=False)
            preds = greedy_decode(enc_out, batch.input_mask, backbone, cfg, None,
                                  max_steps=batch.target_ids.shape[1] + 2)
            hits += sum(1 for i, ex in enumerate(chunk)
                        if tok.detokenize(preds[i]) == ex.target_text)
        return hits / len(heldout)

    accuracy = 0.0
    steps_run = 0
    for step in range(pcfg.steps):
        batch = pad_batch([_denoise_example(rng, pcfg, tok, pcfg.noise_rate)
                           for _ in range(pcfg.batch_size)], cfg.max_len)
        dec_in, labels = _split_targets(batch.target_ids)
        with Tape():
            enc_out = encode(batch.input_ids, batch.input_mask, backbone, cfg,
                             use_adapters=False)
            logits = decode(enc_out, batch.input_mask, dec_in, backbone, cfg, None)
            loss = ad.softmax_cross_entropy(
                ad.reshape(logits, (-1, cfg.vocab_size)), labels.reshape(-1),
                ignore_index=PAD)
            zero_grad(params.values())
            backward(loss)
        adamw_step(params, collect_grads(params), state, lr_at(step, schedule))
        steps_run = step + 1
        if (step + 1) % pcfg.eval_every == 0 or step + 1 == pcfg.steps:
            accuracy = heldout_accuracy()
            if progress:
                log.info("pretrain step %d loss %.4f accuracy %.3f",
                         step + 1, float(loss.data), accuracy)
            if accuracy >= pcfg.target_accuracy:
                break
    if accuracy < 0.5:
        raise ContractError(
            f"backbone reached only {accuracy:.3f} sequence accuracy after "
            f"{steps_run} steps; the configuration is too small or broken")
    backbone.freeze()
    return backbone, {"accuracy": accuracy, "steps": steps_run}


def save_backbone_checkpoint(path, backbone: BackboneParams, cfg: ModelConfig,
                             info: dict) -> None:
    meta = {"kind": "backbone", "model": _model_meta(cfg), "pretrain": info}
    save_checkpoint(path, {f"backbone.{k}": v
                           for k, v in backbone.named_parameters().items()}, meta)


def load_backbone_checkpoint(path, cfg: ModelConfig) -> BackboneParams:
    meta, stored = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise ConfigError(f"{path} is not a backbone checkpoint")
    if meta["model"] != _model_meta(cfg):
        raise ConfigError("backbone checkpoint was built for a different model config")
    backbone = build_backbone(cfg, np.random.default_rng(0))
    restore_into(backbone.named_parameters(), stored, prefix="backbone.")
    backbone.freeze()
    return backbone


def _model_meta(cfg: ModelConfig) -> dict:
    return {"d": cfg.d, "n_heads": cfg.n_heads, "d_ff": cfg.d_ff,
            "enc_layers": cfg.enc_layers, "dec_layers": cfg.dec_layers,
            "bottleneck": cfg.bottleneck, "vocab_size": cfg.vocab_size,
            "max_len": cfg.max_len, "literal_blocks": cfg.literal_blocks}


# ---------------------------------------------------------------------------
# multi-task training
# ---------------------------------------------------------------------------

def build_datasets(run: RunConfig) -> tuple[list[list[Example]], list[list[Example]]]:
    tok = CharTokenizer(DEFAULT_ALPHABET)
    train_sets, eval_sets = [], []
    for task_id, entry in enumerate(run.tasks):
        spec = entry.spec()
        full = generate_examples(spec, entry.n_train + entry.n_eval, task_id, tok)
        train_sets.append(full[:entry.n_train])
        eval_sets.append(full[entry.n_train:])
    return train_sets, eval_sets


def build_run_system(run: RunConfig, backbone: BackboneParams) -> PHASystem:
    rng = np.random.default_rng(run.seed + 1000)
    system = build_system(
        run.model_config(), backbone, run.task_names(),
        retrieval_dim=run.model.retrieval_dim, hyper_dim=run.model.hyper_dim,
        rng=rng,
        no_prototype=run.train.no_prototype, no_retriever=run.train.no_retriever,
        hyper_out_init="train")
    # Shared encoder adapters start with zero output but live down projections,
    # for the same saddle reason as the hypernet head.
    cfg = system.cfg
    for layer in backbone.enc:
        std = np.sqrt(2.0 / (cfg.d + cfg.bottleneck))
        layer.adapter.down_w.data[...] = rng.normal(0.0, std,
                                                    size=layer.adapter.down_w.shape)
    return system


def _system_params_for_checkpoint(system: PHASystem) -> dict[str, Tensor]:
    out = {f"backbone.{k}": v for k, v in system.backbone.named_parameters().items()}
    if system.retriever is not None:
        out.update(system.retriever.named_parameters())
    out.update(system.bank.named_parameters())
    out.update(system.hyper.named_parameters())
    return out


def save_system_checkpoint(path, system: PHASystem, run: RunConfig,
                           optim: OptimizerState | None, step: int) -> None:
    params: dict[str, Tensor | np.ndarray] = dict(_system_params_for_checkpoint(system))
    if optim is not None:
        for name, arr in optim.m.items():
            params[f"optim.m.{name}"] = arr
        for name, arr in optim.v.items():
            params[f"optim.v.{name}"] = arr
    meta = {"kind": "system", "step": step, "run_config": run.to_dict(),
            "optim_step": 0 if optim is None else optim.step}
    save_checkpoint(path, params, meta)


def load_system_checkpoint(path) -> tuple[PHASystem, RunConfig, dict]:
    from .config import parse_run_config

    meta, stored = load_checkpoint(path)
    if meta.get("kind") != "system":
        raise ConfigError(f"{path} is not a system checkpoint")
    run = parse_run_config(meta["run_config"])
    backbone = build_backbone(run.model_config(), np.random.default_rng(0))
    system = build_run_system(run, backbone)
    restore_into(backbone.named_parameters(), stored, prefix="backbone.")
    backbone.freeze()
    extra = {}
    if system.retriever is not None:
        extra.update(system.retriever.named_parameters())
    extra.update(system.bank.named_parameters())
    extra.update(system.hyper.named_parameters())
    restore_into(extra, stored)
    return system, run, meta


def train_multitask(system: PHASystem, run: RunConfig, out_dir) -> dict:
    """Multi-task loop; writes metrics.jsonl, checkpoints, and summary.json."""
    tcfg = run.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    train_sets, eval_sets = build_datasets(run)
    if len(train_sets) < 2:
        raise ContractError("multi-task training needs at least two tasks")
    params = system.trainable_parameters()
    optim = init_optimizer(params, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(run.seed)
    cfg = system.cfg
    last_ckpt: str | None = None

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        for step in range(tcfg.total_steps):
            batch = sample_multitask_batch(train_sets, tcfg.batch_size, rng, cfg.max_len)
            lr = lr_at(step, tcfg)
            with Tape():
                l_plm, l_ir, l_pro, l_total = compute_step_losses(system, batch, tcfg)
                if not np.isfinite(l_total.data):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}", last_checkpoint=last_ckpt)
                zero_grad(params.values())
                backward(l_total)
            grads = collect_grads(params)
            if tcfg.grad_clip is not None:
                clip_gradients(grads, tcfg.grad_clip)
            adamw_step(params, grads, optim, lr)
            metrics.write(json.dumps({
                "step": step, "lr": lr, "l_plm": float(l_plm.data),
                "l_ir": float(l_ir.data), "l_pro": float(l_pro.data),
                "l_total": float(l_total.data)}) + "\n")

            if (step + 1) % tcfg.eval_every == 0:
                for task_id, name in enumerate(run.task_names()):
                    res = evaluate(system, eval_sets[task_id], task_index=task_id,
                                   tcfg=tcfg)
                    metrics.write(json.dumps({
                        "step": step, "task": name,
                        "accuracy": res["sequence_accuracy"]}) + "\n")
                path = ckpt_dir / f"step_{step + 1:06d}.pha"
                save_system_checkpoint(path, system, run, optim, step + 1)
                last_ckpt = str(path)

    per_task = {}
    for task_id, name in enumerate(run.task_names()):
        res = evaluate(system, eval_sets[task_id], task_index=task_id, tcfg=tcfg)
        per_task[name] = res["sequence_accuracy"]
    final = out / "checkpoint_final.pha"
    save_system_checkpoint(final, system, run, optim, tcfg.total_steps)
    summary = {
        "steps": tcfg.total_steps,
        "per_task_accuracy": per_task,
        "mean_accuracy": math.fsum(per_task.values()) / len(per_task),
        "final_checkpoint": final.name,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# few-shot adaptation
# ---------------------------------------------------------------------------

def support_vectors(system: PHASystem, support: list[Example],
                    tcfg: TrainConfig) -> Tensor:
    batch = pad_batch(support, system.cfg.max_len)
    enc_out = encode(batch.input_ids, batch.input_mask, system.backbone, system.cfg)
    return conditioning_vectors(system, enc_out, batch.input_mask, tcfg)


def adapt_few_shot(system: PHASystem, support: list[Example], tcfg: TrainConfig,
                   seed: int, init: str = "retrieved") -> dict:
    """Retrieve the nearest prototype, clone it, and fine-tune on the support.

    ``init="random"`` replaces the clone with a fresh draw from the prototype
    init distribution (the comparison baseline). The trainable set follows
    ``tcfg.few_shot_trainable``; everything else stays frozen. Returns the
    adapted embedding plus retrieval scores.
    """
    if not support:
        raise ContractError("support set is empty")
    if len({ex.task_id for ex in support}) != 1:
        raise ContractError("support mixes examples from different tasks")
    if system.no_prototype:
        raise ContractError("few-shot adaptation needs a prototype bank")

    z = support_vectors(system, support, tcfg)
    index, scores = match_prototype(z, system.bank)
    if init == "retrieved":
        k_new = Tensor(system.bank.prototypes.data[index].copy(), requires_grad=True)
    elif init == "random":
        rng = np.random.default_rng(seed)
        k_new = Tensor(rng.normal(0.0, 0.02, size=system.z_dim), requires_grad=True)
    else:
        raise ContractError(f"unknown init {init!r}")
    initial_embedding = k_new.data.copy()

    params: dict[str, Tensor] = {"adapted_embedding": k_new}
    if tcfg.few_shot_trainable in ("embedding+hypernet", "embedding+hypernet+adapters"):
        params.update(system.hyper.named_parameters())
    if tcfg.few_shot_trainable == "embedding+hypernet+adapters":
        for i, layer in enumerate(system.backbone.enc):
            params.update(layer.adapter.named_parameters(f"enc.{i}.adapter."))
    state = init_optimizer(params, weight_decay=0.0)

    cfg = system.cfg
    batch = pad_batch(support, cfg.max_len)
    dec_in, labels = _split_targets(batch.target_ids)
    for _ in range(tcfg.adapt_steps):
        with Tape():
            enc_out = encode(batch.input_ids, batch.input_mask, system.backbone, cfg)
            adapters = [generate_adapter(
                k_new, ad.reshape(ad.narrow(system.bank.layer_embed, 0, m, 1), (-1,)),
                system.hyper, cfg) for m in range(cfg.dec_layers)]
            logits = decode(enc_out, batch.input_mask, dec_in, system.backbone, cfg,
                            adapters)
            loss = ad.softmax_cross_entropy(
                ad.reshape(logits, (-1, cfg.vocab_size)), labels.reshape(-1),
                ignore_index=PAD)
            zero_grad(params.values())
            backward(loss)
        adamw_step(params, collect_grads(params), state, tcfg.adapt_lr)
    return {
        "embedding": k_new,
        "initial_embedding": initial_embedding,
        "retrieved_index": index,
        "retrieved_task": system.bank.task_names[index],
        "scores": scores,
    }


# ---------------------------------------------------------------------------
# similarity and embedding exports
# ---------------------------------------------------------------------------

def similarity_rows(system: PHASystem, probe_sets: list[tuple[str, list[Example]]],
                    tcfg: TrainConfig, batch_size: int = 64) -> list[tuple[str, np.ndarray]]:
    """Mean cosine of each probe set's retrieval vectors against every prototype."""
    if system.bank.prototypes is None:
        raise ContractError("similarity export needs a prototype bank")
    rows = []
    for name, examples in probe_sets:
        scores = np.zeros(system.bank.num_tasks)
        total = 0
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            z = support_vectors(system, chunk, tcfg)
            _, s = match_prototype(z, system.bank)
            scores += s * len(chunk)
            total += len(chunk)
        rows.append((name, scores / total))
    return rows


def write_similarity_csv(path, task_names: list[str],
                         rows: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task," + ",".join(task_names) + "\n")
        for name, scores in rows:
            fh.write(name + "," + ",".join(f"{s:.6f}" for s in scores) + "\n")


def write_embeddings_csv(path, system: PHASystem,
                         probe_sets: list[tuple[int, list[Example]]],
                         tcfg: TrainConfig) -> None:
    """Raw retrieval vectors, one row per example: task_id, dim_0..dim_{n-1}."""
    dims = None
    with open(path, "w", encoding="utf-8") as fh:
        for task_id, examples in probe_sets:
            for start in range(0, len(examples), 64):
                z = support_vectors(system, examples[start:start + 64], tcfg).data
                if dims is None:
                    dims = z.shape[1]
                    fh.write("task_id," + ",".join(f"dim_{i}" for i in range(dims)) + "\n")
                for row in z:
                    fh.write(str(task_id) + "," + ",".join(f"{v:.8f}" for v in row) + "\n")
