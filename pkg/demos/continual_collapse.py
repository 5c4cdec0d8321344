"""Show pseudo-label collapse on a continual stream and its remedy.

Five drift segments each drag one class toward a neighboring class's
region. Confident wrong pseudo-labels then reinforce themselves: with
every layer free to move, accuracy falls well below the frozen model,
and the damage persists on clean source data. Selecting a single
aligned layer per step, with windowed anchor resets, stays at the
frozen model's level while adapting where it helps.
"""

import numpy as np

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
    forgetting,
    generate_task,
    minibatches,
    pretrain_erm,
    run_baseline,
    run_gala,
    tta_accuracy,
)

TASK = TaskSpec(num_classes=4, input_dim=2, samples_per_domain=100, seed=77)
SHIFTS = [ShiftSpec("label_conditional_noise", 3,
                    {"target_class": i % 4, "toward_class": (i + 1) % 4})
          for i in range(5)]
LOSS = LossKind("pseudo_label")
LR = 0.6
SEEDS = range(5)


def main():
    data = generate_task(TASK)
    specs = [LayerSpec("dense", 2, 16, "tanh"),
             LayerSpec("dense", 16, 16, "tanh"),
             LayerSpec("dense", 16, 4)]
    pre = pretrain_erm(specs, minibatches(data.train, 25, 500, seed=1),
                       data.source_holdout, OptimizerConfig(0.1), seed=1)
    net = Network(specs)
    opt = OptimizerConfig(LR)

    def adapt(method, seed):
        stream = build_stream(TASK, SHIFTS, mode="continual", batch_size=4,
                              seed=seed)
        if method == "frozen":
            return run_baseline(net, pre.params, stream, SelectorKind("erm"),
                                LOSS, opt, granularity="single_layer")
        if method == "all layers":
            return run_baseline(net, pre.params, stream,
                                SelectorKind("all_layers"), LOSS, opt,
                                granularity="multi_layer")
        return run_gala(net, pre.params, stream, LOSS, opt, GalaConfig())

    print(f"{'method':<18} {'median stream acc':>18} {'median forgetting':>18}")
    for method in ("frozen", "all layers", "aligned selection"):
        recs = [adapt(method, s) for s in SEEDS]
        acc = float(np.median([tta_accuracy(r) for r in recs]))
        fg = float(np.median([forgetting(net, pre.params, r.final_params,
                                         data.source_holdout) for r in recs]))
        print(f"{method:<18} {acc:>18.1f} {fg:>18.1f}")

    print()
    print("the unconstrained policy chases its own wrong labels segment after")
    print("segment; the frozen model rides out the drift; aligned selection")
    print("stays within a few points of the frozen model on the stream and")
    print("loses half as much source accuracy.")


if __name__ == "__main__":
    main()
