"""Online adaptation loops tying selectors to streams.

Labels ride along in the stream for evaluation; every loop strips them
before the loss sees a batch, so unsupervised adaptation cannot leak
label information (the losses additionally refuse labeled batches).
"""

from __future__ import annotations

import math

import numpy as np

from .baselines import BaselineSelector, SelectorKind, oracle_sweep
from .engine import GalaConfig, build_grouping, gala_step, init_anchor
from .metrics import RunRecord, config_fingerprint
from .nn import Batch, LossKind, ModelParameters, Network, OptimizerConfig
from .shiftbench import ShiftStream


def _fingerprint(method: str, loss: LossKind, opt: OptimizerConfig, seed: int,
                 extra: dict) -> str:
    return config_fingerprint({
        "method": method,
        "loss": {"variant": loss.variant, "shot_pl_weight": loss.shot_pl_weight},
        "opt": {"learning_rate": opt.learning_rate, "kind": opt.kind},
        "seed": seed,
        **extra,
    })


def run_gala(
    network: Network,
    pretrained: ModelParameters,
    stream: ShiftStream,
    loss: LossKind,
    opt: OptimizerConfig,
    cfg: GalaConfig,
    seed: int = 0,
) -> RunRecord:
    """Adapt with aligned layer selection over one stream."""
    grouping = build_grouping(network.layer_names,
                              [s.param_count for s in network.specs],
                              cfg.granularity, cfg.num_blocks)
    params = pretrained.copy()
    anchor = init_anchor(params, grouping)
    correct, decisions, losses, warmups, resets = [], [], [], [], []
    for batch in stream.adapt_batches:
        res = gala_step(network, params, Batch(batch.inputs), loss, opt, cfg,
                        anchor, grouping)
        params, anchor = res.params, res.anchor
        correct.append(np.argmax(res.probs, axis=1) == batch.labels)
        decisions.append(res.decision)
        losses.append(res.loss)
        warmups.append(res.warmup)
        resets.append(res.reset)
    fp = _fingerprint("gala", loss, opt, seed, {
        "threshold": cfg.threshold,
        "window_size": ("inf" if cfg.window_size == math.inf else cfg.window_size),
        "granularity": cfg.granularity,
        "warmup_len": cfg.warmup_len,
        "warmup_mode": cfg.warmup_mode,
        "num_blocks": cfg.num_blocks,
    })
    return RunRecord(list(grouping.names), correct, decisions, losses, warmups, resets,
                     params, fp, seed)


def run_baseline(
    network: Network,
    pretrained: ModelParameters,
    stream: ShiftStream,
    kind: SelectorKind,
    loss: LossKind,
    opt: OptimizerConfig,
    granularity: str = "block",
    num_blocks: int = 4,
    seed: int = 0,
) -> RunRecord:
    """Adapt with a comparison selector over one stream.

    Oracle variants without a pinned group first run the brute-force
    sweep on the same stream to find it.
    """
    grouping = build_grouping(network.layer_names,
                              [s.param_count for s in network.specs],
                              granularity, num_blocks)
    if kind.variant in ("oracle_best", "oracle_worst") and kind.fixed_group is None:
        sweep = oracle_sweep(network, pretrained, stream, loss, opt, grouping)
        pinned = sweep.best_group if kind.variant == "oracle_best" else sweep.worst_group
        kind = SelectorKind(kind.variant, kind.rng_seed, pinned)
    selector = BaselineSelector(kind, grouping)
    params = pretrained.copy()
    correct, decisions, losses, warmups, resets = [], [], [], [], []
    for batch in stream.adapt_batches:
        res = selector.step(network, params, Batch(batch.inputs), loss, opt)
        params = res.params
        correct.append(np.argmax(res.probs, axis=1) == batch.labels)
        decisions.append(res.decision)
        losses.append(res.loss)
        warmups.append(1.0)
        resets.append(False)
    fp = _fingerprint(kind.variant, loss, opt, seed, {
        "rng_seed": kind.rng_seed,
        "fixed_group": kind.fixed_group,
        "granularity": granularity,
        "num_blocks": num_blocks,
    })
    return RunRecord(list(grouping.names), correct, decisions, losses, warmups, resets,
                     params, fp, seed)
