"""Baseline treatment-effect learner.

A representation network with a cosine-normalized final layer feeds two
independent outcome heads (one per treatment arm). Training minimizes the
factual mean squared error plus a Wasserstein balance term between treated
and control representations and an elastic-net penalty on the
representation weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError, GroupImbalanceError
from .networks import FINAL_AFFINE, FINAL_COSINE, DenseNetwork, load_arrays, save_arrays
from .optim import AdamState, adam_step
from .transport import IPMConfig, wasserstein_ipm


@dataclass
class RepresentationModel:
    """Representation network plus one outcome head per treatment arm."""

    rep_net: DenseNetwork
    head0: DenseNetwork
    head1: DenseNetwork
    alpha: float = 1.0
    lam: float = 1e-4

    def __post_init__(self):
        for head in (self.head0, self.head1):
            if head.input_dim != self.rep_net.output_dim:
                raise ValueError(
                    "head input dimension must equal the representation dimension"
                )

    @property
    def rep_dim(self) -> int:
        return self.rep_net.output_dim

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.rep_net.named_parameters("rep.")
            + self.head0.named_parameters("head0.")
            + self.head1.named_parameters("head1.")
        )

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def represent(self, X: np.ndarray) -> np.ndarray:
        """Representation rows, no gradient tape."""
        return self.rep_net.predict(X)

    def represent_tape(self, X: np.ndarray) -> Tensor:
        return self.rep_net.forward(X)

    def predict_outcome(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Factual predictions: each unit routed to the head of its arm."""
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t)
        if R.shape[0] != t.shape[0]:
            raise ValueError("R and t must have one row per unit")
        if not np.all(np.isin(np.unique(t), (0.0, 1.0))):
            raise ValueError("treatment must be binary 0/1")
        out = np.empty(R.shape[0])
        mask1 = t.astype(bool)
        if (~mask1).any():
            out[~mask1] = self.head0.predict(R[~mask1])[:, 0]
        if mask1.any():
            out[mask1] = self.head1.predict(R[mask1])[:, 0]
        return out

    def estimate_effects(self, X: np.ndarray) -> tuple[np.ndarray, float]:
        """Unit-level effect estimates and their mean."""
        r = self.represent(X)
        ite = self.head1.predict(r)[:, 0] - self.head0.predict(r)[:, 0]
        return ite, float(ite.mean())

    def copy(self) -> "RepresentationModel":
        return RepresentationModel(
            self.rep_net.copy(), self.head0.copy(), self.head1.copy(),
            alpha=self.alpha, lam=self.lam,
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = arrays[name].astype(np.float64).copy()

    def save(self, path, extra_metadata: dict | None = None) -> None:
        meta = {
            "model": {
                "rep_net": self.rep_net.to_metadata(),
                "head0": self.head0.to_metadata(),
                "head1": self.head1.to_metadata(),
                "alpha": self.alpha,
                "lam": self.lam,
            }
        }
        if extra_metadata:
            meta.update(extra_metadata)
        save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["RepresentationModel", dict]:
        arrays, meta = load_arrays(path)
        spec = meta["model"]
        model = cls(
            DenseNetwork.from_metadata(spec["rep_net"]),
            DenseNetwork.from_metadata(spec["head0"]),
            DenseNetwork.from_metadata(spec["head1"]),
            alpha=spec["alpha"],
            lam=spec["lam"],
        )
        model.load_state_arrays(arrays)
        return model, meta


def build_model(
    n_features: int,
    rep_hidden: tuple[int, ...] = (64, 64),
    rep_dim: int = 32,
    head_hidden: tuple[int, ...] = (32, 32),
    activation: str = "elu",
    cosine_output: bool = True,
    alpha: float = 1.0,
    lam: float = 1e-4,
    seed: int = 0,
) -> RepresentationModel:
    rng = np.random.default_rng(seed)
    rep = DenseNetwork(
        [n_features, *rep_hidden, rep_dim],
        final_mode=FINAL_COSINE if cosine_output else FINAL_AFFINE,
        activation=activation,
        rng=rng,
    )
    heads = [
        DenseNetwork([rep_dim, *head_hidden, 1], final_mode=FINAL_AFFINE,
                     activation=activation, rng=rng)
        for _ in range(2)
    ]
    return RepresentationModel(rep, heads[0], heads[1], alpha=alpha, lam=lam)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def elastic_net_penalty(model: RepresentationModel) -> Tensor:
    """Squared L2 plus L1 over the representation weight matrices (no biases)."""
    total = ad.elastic_net(model.rep_net.weights[0])
    for w in model.rep_net.weights[1:]:
        total = ad.add(total, ad.elastic_net(w))
    return total


def factual_loss(pred: Tensor, y: np.ndarray) -> Tensor:
    """Mean squared error against observed outcomes."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("factual loss needs at least one unit")
    if pred.data.size != y.size:
        raise ValueError("prediction / outcome length mismatch")
    flat = ad.reshape(pred, (y.size,))
    return ad.tmean((flat - Tensor(y)) ** 2)


def routed_predictions(
    model: RepresentationModel, reps: Tensor, t: np.ndarray
) -> tuple[Tensor, np.ndarray]:
    """Head-routed predictions on the tape.

    Returns predictions in (controls, treated) order along with the matching
    permutation of unit indices.
    """
    t = np.asarray(t)
    idx0 = np.flatnonzero(t == 0)
    idx1 = np.flatnonzero(t == 1)
    parts = []
    if idx0.size:
        parts.append(model.head0.forward(ad.gather_rows(reps, idx0)))
    if idx1.size:
        parts.append(model.head1.forward(ad.gather_rows(reps, idx1)))
    pred = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    return pred, np.concatenate([idx0, idx1])


@dataclass
class ObjectiveParts:
    total: Tensor
    factual: float
    balance: float
    penalty: float
    balance_converged: bool


def baseline_objective(
    model: RepresentationModel,
    X: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    ipm: IPMConfig | None = None,
) -> ObjectiveParts:
    """Composite loss: factual MSE + alpha * balance + lam * elastic net."""
    t = np.asarray(t)
    idx1 = np.flatnonzero(t == 1)
    idx0 = np.flatnonzero(t == 0)
    if idx1.size == 0 or idx0.size == 0:
        raise GroupImbalanceError(
            "batch needs both treated and control units; re-draw the batch"
        )
    reps = model.represent_tape(X)
    pred, order = routed_predictions(model, reps, t)
    fact = factual_loss(pred, np.asarray(y)[order])
    ot = wasserstein_ipm(
        ad.gather_rows(reps, idx1), ad.gather_rows(reps, idx0), ipm or IPMConfig()
    )
    pen = elastic_net_penalty(model)
    total = ad.add(fact, ad.add(ot.cost * model.alpha, pen * model.lam))
    return ObjectiveParts(
        total=total,
        factual=fact.item(),
        balance=ot.cost.item(),
        penalty=pen.item(),
        balance_converged=ot.converged,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimization settings shared by the baseline and continual loops.

    ``model_selection="best"`` returns the parameters with the lowest
    validation factual MSE (early stopping after ``patience`` stale
    epochs); ``"final"`` runs the full epoch budget and returns the last
    state, the fixed-budget protocol used by the strategy comparisons.
    """

    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-3
    patience: int = 30
    validation_metric: str = "factual_mse"
    model_selection: str = "best"
    ipm: IPMConfig = field(default_factory=IPMConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.validation_metric != "factual_mse":
            raise ValueError("only factual_mse model selection is supported")
        if self.model_selection not in ("best", "final"):
            raise ValueError("model_selection must be 'best' or 'final'")


@dataclass
class TrainingHistory:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int


def _validation_mse(model: RepresentationModel, X, t, y) -> float:
    pred = model.predict_outcome(model.represent(X), t)
    return float(np.mean((pred - y) ** 2))


def iter_batches(
    n: int, batch_size: int, t: np.ndarray, rng: np.random.Generator, max_redraws: int = 20
):
    """Shuffled mini-batches containing both treatment arms.

    A single-arm batch is replaced by a fresh uniform draw; the sequence is
    deterministic for a fixed generator state.
    """
    t = np.asarray(t)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = order[start:start + batch_size]
        if batch.size < 2:
            continue
        draws = 0
        while len(np.unique(t[batch])) < 2:
            batch = rng.choice(n, size=min(batch_size, n), replace=False)
            draws += 1
            if draws > max_redraws:
                raise GroupImbalanceError(
                    "could not draw a batch containing both treatment arms"
                )
        yield batch


def train_baseline(
    X: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    validation: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig,
    model: RepresentationModel,
    seed: int = 0,
) -> tuple[RepresentationModel, TrainingHistory]:
    """Mini-batch Adam on the baseline objective; keeps the best-validation state."""
    t = np.asarray(t)
    if len(np.unique(t)) < 2:
        raise GroupImbalanceError("training data needs both treated and control units")
    X_val, t_val, y_val = validation
    params = model.named_parameters()
    opt = AdamState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    best_val = np.inf
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    best_epoch = 0
    stale = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in iter_batches(X.shape[0], cfg.batch_size, t, rng):
            parts = baseline_objective(model, X[batch], t[batch], y[batch], cfg.ipm)
            value = parts.total.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}", epoch, train_losses
                )
            ad.zero_grads(p for _, p in params)
            ad.backward(parts.total)
            adam_step(params, opt)
            epoch_losses.append(value)
        train_losses.append(float(np.mean(epoch_losses)))
        val = _validation_mse(model, X_val, t_val, y_val)
        val_losses.append(val)
        if cfg.model_selection == "final":
            best_epoch = epoch
            continue
        if val < best_val - 1e-12:
            best_val = val
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if cfg.model_selection == "best":
        model.load_state_arrays(best_state)
    return model, TrainingHistory(train_losses, val_losses, best_epoch)
