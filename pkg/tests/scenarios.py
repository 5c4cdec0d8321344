"""Shared experiment constructions for the desk-scale evaluation tests.

Three scenarios, each deterministic given its stream seed:

* collapse: five class-conditional drift segments whose confidently wrong
  pseudo-labels poison unconstrained adaptation while the frozen model
  stays accurate.
* reset: a rotation followed by its inverse, so the productive update
  direction flips mid-stream.
* oracle proxy: a single heavy class-conditional shift on a four-layer
  model, giving a differentiated per-layer adaptation quality ranking.
"""

from functools import lru_cache

from gala import (
    GalaConfig,
    LayerSpec,
    LossKind,
    Network,
    OptimizerConfig,
    SelectorKind,
    ShiftSpec,
    TaskSpec,
    build_stream,
    generate_task,
    minibatches,
    pretrain_erm,
    run_baseline,
    run_gala,
)

PL = LossKind("pseudo_label")

COLLAPSE_TASK = TaskSpec(num_classes=4, input_dim=2, samples_per_domain=100, seed=77)
COLLAPSE_SHIFTS = [
    ShiftSpec("label_conditional_noise", 3,
              {"target_class": i % 4, "toward_class": (i + 1) % 4})
    for i in range(5)
]
COLLAPSE_LR = 0.6

RESET_TASK = TaskSpec(num_classes=4, input_dim=2, samples_per_domain=200, seed=31)
RESET_SHIFTS = [ShiftSpec("rotation", 3, {"angle_deg": 40.0}),
                ShiftSpec("rotation", 3, {"angle_deg": -40.0})]
RESET_LR = 1.0

ORACLE_TASK = TaskSpec(num_classes=4, input_dim=2, samples_per_domain=1000, seed=13)
ORACLE_SHIFTS = [ShiftSpec("label_conditional_noise", 5,
                           {"target_class": 0, "toward_class": 2})]
ORACLE_LR = 1.5


def _pretrained(task: TaskSpec, widths: tuple, steps: int):
    dims = (task.input_dim,) + widths + (task.num_classes,)
    specs = [
        LayerSpec("dense", dims[i], dims[i + 1],
                  "tanh" if i + 2 < len(dims) else "identity")
        for i in range(len(dims) - 1)
    ]
    data = generate_task(task)
    pre = pretrain_erm(specs, minibatches(data.train, 25, steps, seed=1),
                       data.source_holdout, OptimizerConfig(0.1), seed=1)
    return Network(specs), pre.params, data


@lru_cache(maxsize=None)
def collapse_setup():
    return _pretrained(COLLAPSE_TASK, (16, 16), 500)


@lru_cache(maxsize=None)
def reset_setup():
    return _pretrained(RESET_TASK, (16, 16), 500)


@lru_cache(maxsize=None)
def oracle_setup():
    return _pretrained(ORACLE_TASK, (12, 12, 12), 600)


def run_collapse(method: str, seed: int, batch_size: int = 4):
    """One adaptation pass over the collapse stream; returns a RunRecord."""
    net, params, _ = collapse_setup()
    stream = build_stream(COLLAPSE_TASK, COLLAPSE_SHIFTS, mode="continual",
                          batch_size=batch_size, seed=seed)
    opt = OptimizerConfig(COLLAPSE_LR)
    if method == "erm":
        return run_baseline(net, params, stream, SelectorKind("erm"), PL, opt,
                            granularity="single_layer", seed=seed)
    if method == "all_layers":
        return run_baseline(net, params, stream, SelectorKind("all_layers"), PL,
                            opt, granularity="multi_layer", seed=seed)
    return run_gala(net, params, stream, PL, opt, GalaConfig(), seed=seed)


def run_reset(window_size, seed: int):
    net, params, _ = reset_setup()
    stream = build_stream(RESET_TASK, RESET_SHIFTS, mode="continual",
                          batch_size=4, seed=seed)
    cfg = GalaConfig(window_size=window_size)
    return run_gala(net, params, stream, PL, OptimizerConfig(RESET_LR), cfg,
                    seed=seed)


def oracle_stream(seed: int):
    return build_stream(ORACLE_TASK, ORACLE_SHIFTS, mode="single", batch_size=4,
                        seed=seed)
