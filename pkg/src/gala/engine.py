"""Gradient-aligned layer selection for online test-time adaptation.

Each adaptation step proposes a plain SGD update u = -lr * grad per
parameter group, then measures how well u agrees with the direction the
group has been moving since its anchor was last reset. The agreement
score for a group with accumulated displacement TD is

    cos = u . (u + TD) / (||u|| ||u + TD||)

i.e. the cosine between the proposed step and the total displacement the
group would have after taking it. Groups whose cosine clears a threshold
are updated; the rest are frozen for this sample. Anchors are refreshed
every ``window_size`` steps so the displacement reference does not go
stale, and the first sample after a reset updates every group
unconditionally (there is no displacement to align with yet).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import Batch, LossKind, ModelParameters, Network, OptimizerConfig

GRANULARITIES = ("single_layer", "multi_layer", "block")
WARMUP_MODES = ("linear_ramp", "none")


@dataclass(frozen=True)
class GalaConfig:
    """Selection hyperparameters.

    ``window_size`` may be ``math.inf`` for no-reset operation. The
    threshold accepts the degenerate value -1, which makes every defined
    cosine pass and (in multi_layer mode with warm-up off) reduces the
    method to plain all-layers SGD.
    """

    threshold: float = 0.75
    window_size: int | float = 20
    granularity: str = "single_layer"
    warmup_len: int = 3
    warmup_mode: str = "linear_ramp"
    epsilon: float = 1e-12
    num_blocks: int = 4

    def __post_init__(self):
        if not (-1.0 <= self.threshold <= 1.0):
            raise ConfigurationError("threshold must lie in [-1, 1]")
        if self.window_size != math.inf:
            if not (isinstance(self.window_size, (int, np.integer)) and self.window_size >= 1):
                raise ConfigurationError("window_size must be a positive integer or infinite")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if not (isinstance(self.warmup_len, (int, np.integer)) and self.warmup_len >= 0):
            raise ConfigurationError("warmup_len must be a nonnegative integer")
        if self.warmup_mode not in WARMUP_MODES:
            raise ConfigurationError(f"unknown warmup_mode {self.warmup_mode!r}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ConfigurationError("epsilon must be a small positive real")
        if not (isinstance(self.num_blocks, (int, np.integer)) and self.num_blocks >= 1):
            raise ConfigurationError("num_blocks must be a positive integer")


@dataclass
class ParameterGrouping:
    """Ordered partition of layer indices into named groups.

    ``layer_sizes`` pins the flat length of each layer's parameter
    vector so group vectors can be gathered and scattered consistently.
    """

    names: list[str]
    members: list[list[int]]
    layer_sizes: list[int]

    def __post_init__(self):
        if len(self.names) != len(self.members):
            raise ConfigurationError("one name per group required")
        seen = sorted(i for group in self.members for i in group)
        if seen != list(range(len(self.layer_sizes))):
            raise ConfigurationError("groups must cover all layers exactly once")

    @property
    def num_groups(self) -> int:
        return len(self.names)

    def gather(self, layer_vectors: list[np.ndarray]) -> list[np.ndarray]:
        """Concatenate each group's layer vectors into one flat vector."""
        if len(layer_vectors) != len(self.layer_sizes):
            raise ConfigurationError("layer count mismatch in gather")
        for vec, size in zip(layer_vectors, self.layer_sizes):
            if vec.size != size:
                raise ConfigurationError("layer size mismatch in gather")
        out = []
        for group in self.members:
            if group:
                out.append(np.concatenate([layer_vectors[i] for i in group]))
            else:
                out.append(np.zeros(0))
        return out

    def scatter(self, group_vectors: list[np.ndarray]) -> list[np.ndarray]:
        """Split group vectors back into per-layer vectors."""
        if len(group_vectors) != self.num_groups:
            raise ConfigurationError("group count mismatch in scatter")
        layers: list[np.ndarray] = [None] * len(self.layer_sizes)
        for group, vec in zip(self.members, group_vectors):
            offset = 0
            for i in group:
                size = self.layer_sizes[i]
                layers[i] = vec[offset : offset + size].copy()
                offset += size
            if offset != vec.size:
                raise ConfigurationError("group vector size mismatch in scatter")
        return layers


def build_grouping(
    layer_names: list[str], layer_sizes: list[int], granularity: str, num_blocks: int = 4
) -> ParameterGrouping:
    """Build the parameter grouping for a granularity mode.

    single_layer and multi_layer give one group per layer (named after
    the layer); block gives ``num_blocks`` contiguous near-equal blocks
    named B0..B{k-1}.
    """
    n = len(layer_names)
    if granularity in ("single_layer", "multi_layer"):
        return ParameterGrouping(list(layer_names), [[i] for i in range(n)], list(layer_sizes))
    if granularity != "block":
        raise ConfigurationError(f"unknown granularity {granularity!r}")
    if num_blocks > n:
        raise ConfigurationError(f"cannot split {n} layers into {num_blocks} blocks")
    pieces = np.array_split(np.arange(n), num_blocks)
    return ParameterGrouping(
        [f"B{k}" for k in range(num_blocks)],
        [[int(i) for i in piece] for piece in pieces],
        list(layer_sizes),
    )


@dataclass
class AnchorState:
    """Reference parameters from the last reset, plus step bookkeeping.

    ``step_counter`` is the number of adaptation steps taken so far;
    ``last_reset_step`` is the step index at which the anchor was set
    (0 for the initial parameters).
    """

    anchor_params: list[np.ndarray]
    last_reset_step: int = 0
    step_counter: int = 0

    def __post_init__(self):
        if self.last_reset_step > self.step_counter:
            raise ConfigurationError("last_reset_step cannot exceed step_counter")

    def copy(self) -> "AnchorState":
        return AnchorState(
            [v.copy() for v in self.anchor_params], self.last_reset_step, self.step_counter
        )


def init_anchor(params: ModelParameters, grouping: ParameterGrouping) -> AnchorState:
    return AnchorState(grouping.gather(params.layers), 0, 0)


@dataclass
class UpdateProposal:
    """Pre-mask per-group update vectors (-lr * gradient)."""

    groups: list[np.ndarray]


@dataclass
class SelectionDecision:
    """Outcome of one selection: per-group cosines, the binary mask, and
    whether the sample was skipped outright. Undefined cosines are nan."""

    cosines: np.ndarray
    mask: np.ndarray
    selected_groups: list[str]
    skipped: bool
    first_sample: bool


def total_displacement(live: list[np.ndarray], anchor: AnchorState) -> list[np.ndarray]:
    """Per-group displacement of the live parameters from the anchor."""
    if len(live) != len(anchor.anchor_params):
        raise ConfigurationError("group count mismatch in total_displacement")
    out = []
    for g, a in zip(live, anchor.anchor_params):
        if g.shape != a.shape:
            raise ConfigurationError("group shape mismatch in total_displacement")
        out.append(g - a)
    return out


def cosine_alignment(u: np.ndarray, td: np.ndarray, eps: float) -> float:
    """Cosine between u and u + td; nan when either norm is below eps."""
    if u.shape != td.shape:
        raise ConfigurationError("u and td must have the same shape")
    resultant = u + td
    nu = np.linalg.norm(u)
    nr = np.linalg.norm(resultant)
    if nu < eps or nr < eps:
        return math.nan
    return float(np.clip(np.dot(u, resultant) / (nu * nr), -1.0, 1.0))


def cosine_via_decomposition(td_norm: float, u_norm: float, beta: float) -> float:
    """Same cosine expressed through norms and the angle between u and td.

    With T = ||td||, u = ||u|| and beta the angle between them:

        cos = (T cos(beta) + u) / sqrt((T + u cos(beta))^2 + (u sin(beta))^2)

    Returns nan when the denominator vanishes (u and td cancel exactly).
    """
    num = td_norm * math.cos(beta) + u_norm
    den = math.hypot(td_norm + u_norm * math.cos(beta), u_norm * math.sin(beta))
    if den == 0.0:
        return math.nan
    return float(np.clip(num / den, -1.0, 1.0))


def vector_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] between two vectors; nan if either is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return math.nan
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


def decide(
    proposal: UpdateProposal,
    live: list[np.ndarray],
    anchor: AnchorState,
    cfg: GalaConfig,
    names: list[str] | None = None,
) -> SelectionDecision:
    """Choose which groups the current sample may update.

    Called with the pre-update parameters (anchor.step_counter still
    holds the previous step index). The first sample after a reset
    selects every group regardless of threshold or granularity; after
    that, single_layer and block modes select the argmax-cosine group if
    it clears the threshold (ties to the lowest group index), while
    multi_layer selects every group that clears it. A sample whose every
    group fails is skipped.
    """
    td = total_displacement(live, anchor)
    cosines = np.array(
        [cosine_alignment(u, t, cfg.epsilon) for u, t in zip(proposal.groups, td)]
    )
    first = anchor.step_counter == anchor.last_reset_step
    n = cosines.size
    if first:
        mask = np.ones(n, dtype=np.int64)
    else:
        defined = ~np.isnan(cosines)
        passing = np.zeros(n, dtype=bool)
        passing[defined] = cosines[defined] > cfg.threshold
        if cfg.granularity == "multi_layer":
            mask = passing.astype(np.int64)
        else:
            mask = np.zeros(n, dtype=np.int64)
            if passing.any():
                filled = np.where(defined, cosines, -np.inf)
                mask[int(np.argmax(filled))] = 1
    skipped = not mask.any()
    if names is None:
        names = [f"g{i}" for i in range(n)]
    selected = [name for name, m in zip(names, mask) if m]
    return SelectionDecision(cosines, mask, selected, bool(skipped), bool(first))


def warmup_scale(cfg: GalaConfig, step: int, last_reset_step: int) -> float:
    """Ramp factor for the j-th sample after a reset (j = step - reset).

    linear_ramp scales the first ``warmup_len`` samples of each window
    by j / warmup_len; everything else gets 1.
    """
    if cfg.warmup_mode == "none" or cfg.warmup_len == 0:
        return 1.0
    j = step - last_reset_step
    if j < 1:
        raise ConfigurationError("warmup_scale needs step > last_reset_step")
    if j <= cfg.warmup_len:
        return j / cfg.warmup_len
    return 1.0


def apply_masked_update(
    live: list[np.ndarray],
    proposal: UpdateProposal,
    decision: SelectionDecision,
    scale: float,
) -> list[np.ndarray]:
    """New per-group parameters: masked groups move by scale * u."""
    if not (0.0 < scale <= 1.0):
        raise ConfigurationError("warmup scale must lie in (0, 1]")
    out = []
    for g, u, m in zip(live, proposal.groups, decision.mask):
        out.append(g + scale * u if m else g.copy())
    return out


def maybe_reset(anchor: AnchorState, live: list[np.ndarray], cfg: GalaConfig) -> AnchorState:
    """Refresh the anchor after a completed step, if the window is full.

    Call with the post-update parameters and anchor.step_counter already
    advanced to the current step index i. With a finite window s, the
    anchor moves to the live parameters whenever i mod s == 0; an
    infinite window never resets.
    """
    i = anchor.step_counter
    if cfg.window_size != math.inf and i % int(cfg.window_size) == 0:
        return AnchorState([g.copy() for g in live], i, i)
    return anchor


@dataclass
class GalaStepResult:
    params: ModelParameters
    anchor: AnchorState
    decision: SelectionDecision
    probs: np.ndarray
    loss: float
    warmup: float
    reset: bool


def gala_step(
    network: Network,
    params: ModelParameters,
    batch: Batch,
    loss: LossKind,
    opt: OptimizerConfig,
    cfg: GalaConfig,
    anchor: AnchorState,
    grouping: ParameterGrouping,
) -> GalaStepResult:
    """One online adaptation step: propose, select, update, predict.

    Predictions come from the post-update parameters; for skipped
    samples they coincide with the pre-update model. The returned anchor
    has its step counter advanced and is reset if the window completed.
    """
    step = anchor.step_counter + 1
    loss_value, grads = network.loss_and_gradients(params, batch, loss)
    proposal = UpdateProposal(grouping.gather([-opt.learning_rate * g for g in grads]))
    live = grouping.gather(params.layers)
    decision = decide(proposal, live, anchor, cfg, grouping.names)
    scale = warmup_scale(cfg, step, anchor.last_reset_step)
    new_groups = apply_masked_update(live, proposal, decision, scale)
    new_params = ModelParameters(grouping.scatter(new_groups), list(params.layer_names))
    advanced = AnchorState(anchor.anchor_params, anchor.last_reset_step, step)
    new_anchor = maybe_reset(advanced, new_groups, cfg)
    probs = network.forward(new_params, batch)
    return GalaStepResult(
        params=new_params,
        anchor=new_anchor,
        decision=decision,
        probs=probs,
        loss=loss_value,
        warmup=scale,
        reset=new_anchor.last_reset_step == step,
    )
