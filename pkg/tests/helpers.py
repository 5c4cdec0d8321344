"""Shared test utilities: independent loss recomputation and finite differences."""

import numpy as np

from gala import Batch, LayerSpec, Network


def reference_loss(network, params, inputs, variant, labels=None, pl_labels=None, pl_weight=0.3):
    """Recompute a loss value from forward() probabilities only.

    Pseudo-label variants take frozen labels so finite differencing
    perturbs the probability path, matching the stop-gradient semantics
    of hard pseudo-labels.
    """
    p = network.forward(params, Batch(inputs))
    n = p.shape[0]
    idx = np.arange(n)
    if variant == "cross_entropy":
        return -np.mean(np.log(p[idx, labels]))
    if variant == "pseudo_label":
        y = pl_labels if pl_labels is not None else p.argmax(axis=1)
        return -np.mean(np.log(p[idx, y]))
    if variant == "shot_im":
        ent = -(p * np.log(p)).sum(axis=1).mean()
        pbar = p.mean(axis=0)
        div = -(pbar * np.log(pbar)).sum()
        y = pl_labels if pl_labels is not None else p.argmax(axis=1)
        pl = -np.mean(np.log(p[idx, y]))
        return ent - div + pl_weight * pl
    raise ValueError(variant)


def finite_difference_grads(network, params, batch, loss, step=1e-5):
    """Central differences on every parameter, with pseudo-labels frozen
    at the unperturbed point."""
    pl_labels = None
    if loss.variant in ("pseudo_label", "shot_im"):
        pl_labels = network.forward(params, Batch(batch.inputs)).argmax(axis=1)
    grads = []
    for vec in params.layers:
        g = np.zeros_like(vec)
        for k in range(vec.size):
            orig = vec[k]
            vec[k] = orig + step
            lp = reference_loss(
                network, params, batch.inputs, loss.variant,
                labels=batch.labels, pl_labels=pl_labels, pl_weight=loss.shot_pl_weight,
            )
            vec[k] = orig - step
            lm = reference_loss(
                network, params, batch.inputs, loss.variant,
                labels=batch.labels, pl_labels=pl_labels, pl_weight=loss.shot_pl_weight,
            )
            vec[k] = orig
            g[k] = (lp - lm) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_relative_error(analytic, numeric):
    a = np.concatenate([g.ravel() for g in analytic])
    b = np.concatenate([g.ravel() for g in numeric])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def random_small_net(rng, max_params=2000, allow_relu=True):
    """A random net plus a compatible batch, sized for finite differencing.

    Rejects configurations where some relu pre-activation sits within
    1e-3 of its kink, so central differences stay in a smooth region.
    Randomizes frozen normalization statistics to exercise the
    single-sample path.
    """
    for _ in range(50):
        depth = int(rng.integers(2, 5))
        dims = [int(rng.integers(2, 13)) for _ in range(depth + 1)]
        specs = []
        for i in range(depth):
            acts = ["tanh", "identity"] + (["relu"] if allow_relu else [])
            kind = rng.choice(["dense", "dense", "normalization", "activation"])
            if kind == "dense":
                act = str(rng.choice(acts)) if i < depth - 1 else "identity"
                specs.append(LayerSpec("dense", dims[i], dims[i + 1], act))
            else:
                dims[i + 1] = dims[i]
                if kind == "activation":
                    specs.append(LayerSpec("activation", dims[i], dims[i], str(rng.choice(acts))))
                else:
                    specs.append(LayerSpec("normalization", dims[i], dims[i]))
        if specs[-1].kind != "dense":
            specs.append(LayerSpec("dense", dims[-1], int(rng.integers(2, 6))))
        net = Network(specs)
        params = net.init_params(int(rng.integers(0, 2**31)))
        if params.total_count > max_params:
            continue
        for i in list(net.norm_stats):
            d = net.specs[i].output_dim
            net.norm_stats[i] = (rng.normal(size=d), rng.uniform(0.5, 2.0, size=d))
        n = int(rng.integers(1, 9))
        batch = Batch(rng.normal(size=(n, net.input_dim)))
        if _min_relu_margin(net, params, batch) > 1e-3:
            return net, params, batch
    raise RuntimeError("could not draw a numerically safe random net")


def _min_relu_margin(net, params, batch):
    """Smallest |pre-activation| over all relu sites (inf if none)."""
    x = batch.inputs
    margin = np.inf
    for i, (spec, vec) in enumerate(zip(net.specs, params.layers)):
        if spec.kind == "dense":
            w = vec[: spec.output_dim * spec.input_dim].reshape(spec.output_dim, spec.input_dim)
            b = vec[spec.output_dim * spec.input_dim :]
            z = x @ w.T + b
            if spec.activation == "relu":
                margin = min(margin, np.abs(z).min())
            x = np.maximum(z, 0.0) if spec.activation == "relu" else (
                np.tanh(z) if spec.activation == "tanh" else z
            )
        elif spec.kind == "activation":
            if spec.activation == "relu":
                margin = min(margin, np.abs(x).min())
            x = np.maximum(x, 0.0) if spec.activation == "relu" else (
                np.tanh(x) if spec.activation == "tanh" else x
            )
        else:
            if x.shape[0] >= 2:
                mu, var = x.mean(axis=0), x.var(axis=0)
            else:
                mu, var = net.norm_stats[i]
            gamma = vec[: spec.output_dim]
            beta = vec[spec.output_dim :]
            x = gamma * (x - mu) / np.sqrt(var + 1e-5) + beta
    return margin
