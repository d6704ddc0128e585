"""Self-checks wired to the `verify` command: gradients, census, zero-init."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .errors import ConfigError
from .checkpoint import load_checkpoint
from .mechanism import build_system, count_parameters
from .model import build_backbone, decode, encode
from .tasks import PAD
from .training import build_datasets, compute_step_losses, _split_targets
from .tasks import sample_multitask_batch


def gradient_check(run: RunConfig, seed: int = 0, eps: float = 1e-5,
                   batch_size: int = 8) -> float:
    """Finite-difference check of the full training objective.

    Uses a randomly initialized backbone and a randomized hypernetwork output
    head (zero init would hide the generation paths), so every trainable
    parameter influences the loss.
    """
    cfg = run.model_config()
    rng = np.random.default_rng(seed)
    backbone = build_backbone(cfg, rng)
    backbone.freeze()
    system = build_system(cfg, backbone, run.task_names(),
                          retrieval_dim=run.model.retrieval_dim,
                          hyper_dim=run.model.hyper_dim, rng=rng,
                          no_prototype=run.train.no_prototype,
                          no_retriever=run.train.no_retriever,
                          hyper_out_init="random")
    # Move every trainable tensor to a generic point: near-zero or dead
    # parameters (training inits) would leave gradients below what central
    # differences can resolve in float64.
    if system.bank.prototypes is not None:
        system.bank.prototypes.data[...] = rng.normal(0.0, 1.0,
                                                      system.bank.prototypes.shape)
    system.bank.layer_embed.data[...] = rng.normal(0.0, 1.0,
                                                   system.bank.layer_embed.shape)
    for layer in backbone.enc:
        for p in layer.adapter.named_parameters().values():
            p.data[...] = rng.normal(0.0, 0.2, p.shape)
    train_sets, _ = build_datasets(run)
    batch = sample_multitask_batch(train_sets, batch_size,
                                   np.random.default_rng(seed + 1), cfg.max_len)
    params = system.trainable_parameters()

    def loss_fn(_params):
        return compute_step_losses(system, batch, run.train)[3]

    return ad.finite_diff_check(loss_fn, params, eps=eps)


def census_check(run: RunConfig, checkpoint_path=None) -> tuple[int, int]:
    """(formula total, observed total); equality is required."""
    cfg = run.model_config()
    report = count_parameters(cfg, run.model.retrieval_dim, run.model.hyper_dim,
                              len(run.tasks))
    if checkpoint_path is not None:
        meta, stored = load_checkpoint(checkpoint_path)
        if meta.get("kind") != "system":
            raise ConfigError(f"{checkpoint_path} is not a system checkpoint")
        observed = 0
        adapter_names = set()
        for i in range(cfg.enc_layers):
            for leaf in ("down_w", "up_w", "down_b", "up_b"):
                adapter_names.add(f"backbone.enc.{i}.adapter.{leaf}")
        for name, arr in stored.items():
            if name.startswith(("retriever.", "bank.", "hyper.")) or name in adapter_names:
                observed += arr.size
        return report.total, observed
    backbone = build_backbone(cfg, np.random.default_rng(0))
    backbone.freeze()
    system = build_system(cfg, backbone, run.task_names(),
                          retrieval_dim=run.model.retrieval_dim,
                          hyper_dim=run.model.hyper_dim,
                          rng=np.random.default_rng(1))
    return report.total, system.census()


def zero_init_check(run: RunConfig, n_batches: int = 10, seed: int = 0) -> bool:
    """Zero hypernet + zero shared adapters must reproduce the plain backbone."""
    cfg = run.model_config()
    rng = np.random.default_rng(seed)
    backbone = build_backbone(cfg, rng)
    backbone.freeze()
    system = build_system(cfg, backbone, run.task_names(),
                          retrieval_dim=run.model.retrieval_dim,
                          hyper_dim=run.model.hyper_dim, rng=rng,
                          hyper_out_init="zero")
    train_sets, _ = build_datasets(run)
    batch_rng = np.random.default_rng(seed + 1)
    from .mechanism import generate_all_decoder_adapters

    for _ in range(n_batches):
        batch = sample_multitask_batch(train_sets, 8, batch_rng, cfg.max_len)
        dec_in, _ = _split_targets(batch.target_ids)
        enc_pha = encode(batch.input_ids, batch.input_mask, backbone, cfg,
                         use_adapters=True)
        task = int(batch.task_ids[0])
        adapters = generate_all_decoder_adapters(task, system.bank, system.hyper, cfg)
        logits_pha = decode(enc_pha, batch.input_mask, dec_in, backbone, cfg, adapters)
        enc_plain = encode(batch.input_ids, batch.input_mask, backbone, cfg,
                           use_adapters=False)
        logits_plain = decode(enc_plain, batch.input_mask, dec_in, backbone, cfg, None)
        if logits_pha.data.tobytes() != logits_plain.data.tobytes():
            return False
    return True
