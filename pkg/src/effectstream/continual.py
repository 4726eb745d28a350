"""Continual stage: learn a new model without touching previous raw data.

Each stage trains a fresh representation/head stack on the new dataset
while (1) distilling the previous network's representations, (2) learning a
transform from the previous representation space into the new one so the
stored exemplars stay usable, and (3) balancing treated vs control over the
pooled (transformed memory + new data) representation space. Afterwards the
memory is mapped through the transform, merged with new exemplars and
re-herded to capacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError, EmptyMemoryError, GroupImbalanceError
from .memory import MemorySet, memory_from_representations
from .model import (
    RepresentationModel,
    TrainConfig,
    TrainingHistory,
    elastic_net_penalty,
    factual_loss,
    iter_batches,
    routed_predictions,
)
from .networks import FINAL_COSINE, DenseNetwork
from .optim import AdamState, adam_step
from .transport import IPMConfig, wasserstein_ipm


@dataclass
class ContinualHyper:
    alpha: float = 1.0
    lam: float = 1e-4
    beta: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "lam", "beta", "delta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative real")


def build_transform(
    old_dim: int,
    new_dim: int,
    hidden: tuple[int, ...] = (64,),
    activation: str = "elu",
    seed: int = 0,
) -> DenseNetwork:
    """Map from the previous representation space into the current one."""
    return DenseNetwork(
        [old_dim, *hidden, new_dim],
        final_mode=FINAL_COSINE,
        activation=activation,
        rng=np.random.default_rng(seed),
    )


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def _one_minus_cosine_mean(a: Tensor, b: Tensor) -> Tensor:
    return ad.tmean(Tensor(1.0) - ad.row_cosine(a, b))


def distill_loss(
    old_model: RepresentationModel, new_model: RepresentationModel, X: np.ndarray
) -> Tensor:
    """Mean 1 - cos between frozen previous and current representations."""
    old = Tensor(old_model.represent(X))  # teacher stays out of the tape
    return _one_minus_cosine_mean(old, new_model.represent_tape(X))


def transform_loss(
    phi: DenseNetwork,
    old_model: RepresentationModel,
    new_model: RepresentationModel,
    X: np.ndarray,
    stop_gradient_new: bool = False,
) -> Tensor:
    """Mean 1 - cos between transformed old-space and current representations."""
    old = Tensor(old_model.represent(X))
    mapped = phi.forward(old)
    if stop_gradient_new:
        new = Tensor(new_model.represent(X))
    else:
        new = new_model.represent_tape(X)
    return _one_minus_cosine_mean(mapped, new)


def global_factual_loss(
    model: RepresentationModel,
    phi: DenseNetwork,
    memory: MemorySet,
    X: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    memory_indices: np.ndarray | None = None,
) -> Tensor:
    """Sum of the memory-side and new-data-side factual mean squared errors."""
    if memory is None or memory.n == 0:
        raise EmptyMemoryError("no stored exemplars; train the baseline model instead")
    sel = np.arange(memory.n) if memory_indices is None else memory_indices
    mapped = phi.forward(Tensor(memory.representations[sel]))
    pred_mem, order_mem = routed_predictions(model, mapped, memory.t[sel])
    mem_term = factual_loss(pred_mem, memory.y[sel][order_mem])
    pred_new, order_new = routed_predictions(model, model.represent_tape(X), t)
    new_term = factual_loss(pred_new, np.asarray(y)[order_new])
    return ad.add(mem_term, new_term)


@dataclass
class ContinualParts:
    total: Tensor
    global_factual: float
    balance: float
    penalty: float
    distill: float
    transform: float
    balance_converged: bool


def continual_objective(
    prev_model: RepresentationModel,
    model: RepresentationModel,
    phi: DenseNetwork | None,
    memory: MemorySet | None,
    X: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    hyper: ContinualHyper,
    ipm: IPMConfig | None = None,
    memory_indices: np.ndarray | None = None,
    stop_gradient_transform: bool = False,
) -> ContinualParts:
    """Composite continual loss over one new-data batch and one memory batch.

    The balance term compares treated vs control over the pooled global
    space: transformed memory exemplars together with new-batch
    representations. With ``memory=None`` and ``phi=None`` the objective
    degenerates to the baseline form on the new batch alone.
    """
    t = np.asarray(t)
    if not ((t == 1).any() and (t == 0).any()):
        raise GroupImbalanceError(
            "batch needs both treated and control units; re-draw the batch"
        )
    reps_new = model.represent_tape(X)
    old_reps = prev_model.represent(X)

    pred_new, order_new = routed_predictions(model, reps_new, t)
    lg = factual_loss(pred_new, np.asarray(y)[order_new])
    mem_mse = 0.0
    if memory is not None:
        if memory.n == 0:
            raise EmptyMemoryError("no stored exemplars; train the baseline model instead")
        if phi is None:
            raise ValueError("memory rehearsal requires a transform function")
        sel = np.arange(memory.n) if memory_indices is None else memory_indices
        mapped_mem = phi.forward(Tensor(memory.representations[sel]))
        pred_mem, order_mem = routed_predictions(model, mapped_mem, memory.t[sel])
        mem_loss = factual_loss(pred_mem, memory.y[sel][order_mem])
        mem_mse = mem_loss.item()
        lg = ad.add(mem_loss, lg)
        pooled = ad.concat_rows([mapped_mem, reps_new])
        pooled_t = np.concatenate([memory.t[sel], t])
    else:
        pooled = reps_new
        pooled_t = t

    ot = wasserstein_ipm(
        ad.gather_rows(pooled, np.flatnonzero(pooled_t == 1)),
        ad.gather_rows(pooled, np.flatnonzero(pooled_t == 0)),
        ipm or IPMConfig(),
    )
    pen = elastic_net_penalty(model)
    total = ad.add(lg, ad.add(ot.cost * hyper.alpha, pen * hyper.lam))

    distill_value = 0.0
    if hyper.beta != 0.0:
        fd = _one_minus_cosine_mean(Tensor(old_reps), reps_new)
        distill_value = fd.item()
        total = ad.add(total, fd * hyper.beta)
    transform_value = 0.0
    if phi is not None:
        mapped_old = phi.forward(Tensor(old_reps))
        target = Tensor(model.represent(X)) if stop_gradient_transform else reps_new
        ft = _one_minus_cosine_mean(mapped_old, target)
        transform_value = ft.item()
        total = ad.add(total, ft * hyper.delta)

    return ContinualParts(
        total=total,
        global_factual=lg.item(),
        balance=ot.cost.item(),
        penalty=pen.item(),
        distill=distill_value,
        transform=transform_value,
        balance_converged=ot.converged,
    )


# ---------------------------------------------------------------------------
# stage training
# ---------------------------------------------------------------------------

def _stage_validation_mse(model: RepresentationModel, X_val, t_val, y_val) -> float:
    # selection uses the held-out split only: memory exemplars are training
    # data, and scoring them would reward memorizing their noise
    pred = model.predict_outcome(model.represent(X_val), t_val)
    return float(np.mean((pred - y_val) ** 2))


def train_continual(
    prev_model: RepresentationModel,
    memory: MemorySet | None,
    X: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    validation: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig,
    hyper: ContinualHyper,
    seed: int = 0,
    memory_batch_size: int = 64,
    use_transform: bool = True,
    warm_start_rep: bool = True,
    warm_start_heads: bool = False,
    phi_hidden: tuple[int, ...] = (64,),
    phi_warmup_epochs: int = 0,
    stop_gradient_transform: bool = False,
) -> tuple[RepresentationModel, DenseNetwork | None, TrainingHistory]:
    """Joint stage optimization of the new model and the transform function.

    The previous model only ever supplies frozen representations. With
    ``use_transform=False`` no transform is built and the memory is ignored:
    the stage reduces to distillation-regularized fine-tuning.
    """
    t = np.asarray(t)
    if len(np.unique(t)) < 2:
        raise GroupImbalanceError("training data needs both treated and control units")
    seeds = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    model = prev_model.copy()
    model.alpha, model.lam = hyper.alpha, hyper.lam
    if not warm_start_rep:
        fresh = DenseNetwork(
            model.rep_net.layer_sizes, model.rep_net.final_mode,
            model.rep_net.activation, rng=init_rng,
        )
        model.rep_net = fresh
    if not warm_start_heads:
        model.head0 = DenseNetwork(
            model.head0.layer_sizes, model.head0.final_mode,
            model.head0.activation, rng=init_rng,
        )
        model.head1 = DenseNetwork(
            model.head1.layer_sizes, model.head1.final_mode,
            model.head1.activation, rng=init_rng,
        )

    phi = None
    rehearsal = memory if use_transform else None
    if use_transform:
        phi = build_transform(
            prev_model.rep_dim, model.rep_dim, hidden=phi_hidden,
            activation=model.rep_net.activation,
            seed=int(seeds[1].generate_state(1)[0]),
        )
        if phi_warmup_epochs > 0:
            _warm_up_transform(phi, prev_model, model, X, phi_warmup_epochs, cfg)

    params = model.named_parameters()
    if phi is not None:
        params = params + phi.named_parameters("phi.")
    opt = AdamState(learning_rate=cfg.learning_rate)
    batch_rng = np.random.default_rng(seeds[2])
    mem_rng = np.random.default_rng(seeds[3])
    X_val, t_val, y_val = validation

    def snapshot():
        state = {k: v.copy() for k, v in model.state_arrays().items()}
        if phi is not None:
            state.update({f"phi.{k}": v.copy() for k, v in phi.state_arrays().items()})
        return state

    def restore(state):
        model.load_state_arrays({k: v for k, v in state.items() if not k.startswith("phi.")})
        if phi is not None:
            phi.load_state_arrays(
                {k[len("phi."):]: v for k, v in state.items() if k.startswith("phi.")}
            )

    best_val = np.inf
    best_state = snapshot()
    best_epoch = 0
    stale = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in iter_batches(X.shape[0], cfg.batch_size, t, batch_rng):
            mem_idx = None
            if rehearsal is not None and rehearsal.n:
                k = min(memory_batch_size, rehearsal.n)
                mem_idx = mem_rng.choice(rehearsal.n, size=k, replace=False)
            parts = continual_objective(
                prev_model, model, phi, rehearsal,
                X[batch], t[batch], y[batch], hyper, cfg.ipm,
                memory_indices=mem_idx,
                stop_gradient_transform=stop_gradient_transform,
            )
            value = parts.total.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite continual loss at epoch {epoch}", epoch, train_losses
                )
            ad.zero_grads(p for _, p in params)
            ad.backward(parts.total)
            adam_step(params, opt)
            epoch_losses.append(value)
        train_losses.append(float(np.mean(epoch_losses)))
        val = _stage_validation_mse(model, X_val, t_val, y_val)
        val_losses.append(val)
        if cfg.model_selection == "final":
            best_epoch = epoch
            continue
        if val < best_val - 1e-12:
            best_val = val
            best_state = snapshot()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if cfg.model_selection == "best":
        restore(best_state)
    return model, phi, TrainingHistory(train_losses, val_losses, best_epoch)


def _warm_up_transform(
    phi: DenseNetwork,
    prev_model: RepresentationModel,
    model: RepresentationModel,
    X: np.ndarray,
    epochs: int,
    cfg: TrainConfig,
) -> None:
    """Optional pre-phase: fit phi alone against the frozen current network."""
    params = phi.named_parameters("phi.")
    opt = AdamState(learning_rate=cfg.learning_rate)
    for _ in range(epochs):
        loss = transform_loss(phi, prev_model, model, X, stop_gradient_new=True)
        ad.zero_grads(p for _, p in params)
        ad.backward(loss)
        adam_step(params, opt)


def update_memory(
    memory: MemorySet,
    phi: DenseNetwork,
    new_model: RepresentationModel,
    X: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    capacity: int,
    selection: str = "herding",
    rng: np.random.Generator | None = None,
    source_tag: int = 0,
) -> MemorySet:
    """Carry the memory into the new space and re-select to capacity.

    Old exemplars are mapped through the stage transform, merged with the
    new data's representations, and the per-arm herding rerun over the
    union; each exemplar keeps its outcome, arm and source tag.
    """
    mapped_old = phi.predict(memory.representations)
    new_reps = new_model.represent(X)
    reps = np.concatenate([mapped_old, new_reps])
    pool_y = np.concatenate([memory.y, np.asarray(y, dtype=np.float64)])
    pool_t = np.concatenate([memory.t, np.asarray(t, dtype=np.float64)])
    tags = np.concatenate(
        [memory.source_tags, np.full(new_reps.shape[0], source_tag, dtype=np.int64)]
    )
    return memory_from_representations(
        reps, pool_y, pool_t, capacity, selection=selection, rng=rng, source_tags=tags
    )
