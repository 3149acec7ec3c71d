"""Two-stage bilevel search: alternating weight and architecture updates.

Every minibatch first updates the network weights by momentum SGD on the
adversarial training loss, then updates the architecture parameters on
validation data: stage one descends the adversarial validation loss alone,
stage two combines the natural and adversarial validation gradients through
the min-norm solver and feeds the common descent direction to Adam at a
smaller learning rate. Weights always train on adversarial examples in both
stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, AttackDivergence, SEARCH_ATTACK, attack_batch
from .autodiff import Tensor, backward, cross_entropy, no_grad
from .blocks import bn_stats_frozen
from .checkpoint import load_network_state, network_state
from .data import DataError, Dataset, batch_indices
from .genotypes import Genotype, KIND_ORDER, SupernetConfig, discretize
from .mgda import CombineResult, GradientPair, combine, descent_certificate
from .optim import Adam, SGDMomentum, cosine_lr
from .supernet import ArchParams, BoundSupernet, Supernet


@dataclass(frozen=True)
class SearchSchedule:
    """Search-phase hyperparameters (epoch counts, optimizers, attack)."""

    epochs: int = 30
    first_stage_epochs: int = 20
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_lr_stage2: float = 5e-5
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    attack: AttackConfig = SEARCH_ATTACK
    batch_size: int = 32
    rng_seed: int = 0
    precision: str = "float64"

    def validate(self) -> None:
        if not 0 <= self.first_stage_epochs <= self.epochs:
            raise ValueError(
                f"first-stage epochs {self.first_stage_epochs} outside "
                f"[0, {self.epochs}]")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        self.attack.validate()

    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "first_stage_epochs": self.first_stage_epochs,
            "w_lr": self.w_lr, "w_momentum": self.w_momentum,
            "w_weight_decay": self.w_weight_decay,
            "alpha_lr": self.alpha_lr,
            "alpha_lr_stage2": self.alpha_lr_stage2,
            "alpha_betas": list(self.alpha_betas),
            "alpha_weight_decay": self.alpha_weight_decay,
            "attack": self.attack.to_dict(),
            "batch_size": self.batch_size,
            "rng_seed": self.rng_seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSchedule":
        sched = cls(
            epochs=int(d.get("epochs", 30)),
            first_stage_epochs=int(d.get("first_stage_epochs", 20)),
            w_lr=float(d.get("w_lr", 0.025)),
            w_momentum=float(d.get("w_momentum", 0.9)),
            w_weight_decay=float(d.get("w_weight_decay", 3e-4)),
            alpha_lr=float(d.get("alpha_lr", 3e-4)),
            alpha_lr_stage2=float(d.get("alpha_lr_stage2", 5e-5)),
            alpha_betas=tuple(float(b) for b in d.get("alpha_betas", (0.5, 0.999))),
            alpha_weight_decay=float(d.get("alpha_weight_decay", 1e-3)),
            attack=AttackConfig.from_dict(d.get("attack", SEARCH_ATTACK.to_dict())),
            batch_size=int(d.get("batch_size", 32)),
            rng_seed=int(d.get("rng_seed", 0)),
            precision=str(d.get("precision", "float64")),
        )
        sched.validate()
        return sched


@dataclass
class SearchState:
    """Mutable state threaded through the search epochs."""

    supernet: Supernet
    arch: ArchParams
    schedule: SearchSchedule
    w_optimizer: SGDMomentum
    alpha_optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    w_lr: float = 0.0

    def model(self) -> BoundSupernet:
        return BoundSupernet(self.supernet, self.arch)


@dataclass
class SearchResult:
    genotype_history: list[tuple[int, Genotype]] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    final_arch: ArchParams | None = None
    diverged: bool = False
    divergence_message: str = ""

    @property
    def final_genotype(self) -> Genotype:
        return self.genotype_history[-1][1]


def _alpha_named(arch: ArchParams) -> list[tuple[str, Tensor]]:
    return [(kind.value, arch.tensors[kind]) for kind in KIND_ORDER]


def _alpha_grads_flat(arch: ArchParams, grads) -> np.ndarray:
    return grads.flat(arch.params()).astype(np.float64)


def _flat_to_per_kind(arch: ArchParams, flat: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    start = 0
    for kind in KIND_ORDER:
        t = arch.tensors[kind]
        n = t.data.size
        out[kind.value] = (flat[start:start + n].reshape(t.data.shape)
                           .astype(t.data.dtype))
        start += n
    return out


def _apply_alpha_update(state: SearchState, grads_per_kind: dict[str, np.ndarray],
                        lr: float) -> None:
    updates = state.alpha_optimizer.step(_alpha_named(state.arch),
                                         grads_per_kind, lr)
    tensors = {kind: updates.get(kind.value, state.arch.tensors[kind])
               for kind in KIND_ORDER}
    state.arch = ArchParams(tensors, state.arch.intermediate_nodes)


def _update_weights(state: SearchState, x_train: np.ndarray,
                    y_train: np.ndarray) -> float:
    """Momentum-SGD step on the adversarial training loss; returns the loss."""
    model = state.model()
    x_adv = attack_batch(model, x_train, y_train, state.schedule.attack,
                         rng=state.rng)
    state.supernet.train(True)
    loss = cross_entropy(model(Tensor(x_adv)), y_train)
    value = loss.item()
    if not np.isfinite(value):
        raise AttackDivergence("non-finite adversarial training loss")
    grads = backward(loss, wrt=list(state.supernet.parameters()))
    state.w_optimizer.step(state.supernet, grads, state.w_lr)
    return value


def first_stage_step(state: SearchState, train_batch, val_batch) -> dict:
    """Adversarial weight update, then single-objective alpha update."""
    x_train, y_train = train_batch
    x_val, y_val = val_batch
    train_adv_loss = _update_weights(state, x_train, y_train)

    model = state.model()
    x_val_adv = attack_batch(model, x_val, y_val, state.schedule.attack,
                             rng=state.rng)
    state.supernet.train(True)
    with bn_stats_frozen():
        loss = cross_entropy(model(Tensor(x_val_adv)), y_val)
        val_adv_loss = loss.item()
        if not np.isfinite(val_adv_loss):
            raise AttackDivergence("non-finite adversarial validation loss")
        grads = backward(loss, wrt=state.arch.params())
    flat = _alpha_grads_flat(state.arch, grads)
    _apply_alpha_update(state, _flat_to_per_kind(state.arch, flat),
                        state.schedule.alpha_lr)
    return {"train_adversarial_loss": train_adv_loss,
            "val_adversarial_loss": val_adv_loss,
            "gamma": None, "certificate_margin": None}


def second_stage_step(state: SearchState, train_batch, val_batch) -> dict:
    """Adversarial weight update, then the two-objective alpha update.

    The natural and adversarial validation losses are taken on the same
    minibatch (clean copy and attacked copy); their alpha gradients are
    combined by the min-norm solver and the resulting direction is fed to
    Adam at the stage-two learning rate.
    """
    x_train, y_train = train_batch
    x_val, y_val = val_batch
    train_adv_loss = _update_weights(state, x_train, y_train)

    model = state.model()
    x_val_adv = attack_batch(model, x_val, y_val, state.schedule.attack,
                             rng=state.rng)
    state.supernet.train(True)
    with bn_stats_frozen():
        nat_loss = cross_entropy(model(Tensor(x_val)), y_val)
        adv_loss = cross_entropy(model(Tensor(x_val_adv)), y_val)
        val_nat_loss, val_adv_loss = nat_loss.item(), adv_loss.item()
        if not (np.isfinite(val_nat_loss) and np.isfinite(val_adv_loss)):
            raise AttackDivergence("non-finite validation loss")
        theta = _alpha_grads_flat(
            state.arch, backward(nat_loss, wrt=state.arch.params()))
        theta_bar = _alpha_grads_flat(
            state.arch, backward(adv_loss, wrt=state.arch.params()))
    pair = GradientPair(theta, theta_bar)
    result: CombineResult = combine(pair)
    margins = descent_certificate(pair, result)
    _apply_alpha_update(state, _flat_to_per_kind(state.arch, result.direction),
                        state.schedule.alpha_lr_stage2)
    return {"train_adversarial_loss": train_adv_loss,
            "val_adversarial_loss": val_adv_loss,
            "val_natural_loss": val_nat_loss,
            "gamma": result.gamma,
            "certificate_margin": float(min(margins))}


def _mean_or_nan(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def epoch_validation_losses(state: SearchState, val_x: np.ndarray,
                            val_y: np.ndarray) -> tuple[float, float]:
    """Natural and adversarial loss over the whole validation half.

    Measured at epoch end in a fixed batch order with a fixed attack stream,
    so values are comparable across epochs; batch statistics are used (the
    quantity the search optimizes) without touching the running averages.
    """
    attack_rng = np.random.default_rng((state.schedule.rng_seed, 0xA77AC))
    model = state.model()
    nat_sum = adv_sum = 0.0
    n = val_x.shape[0]
    for idx in batch_indices(n, state.schedule.batch_size):
        xb, yb = val_x[idx], val_y[idx]
        x_adv = attack_batch(model, xb, yb, state.schedule.attack,
                             rng=attack_rng)
        state.supernet.train(True)
        with no_grad(), bn_stats_frozen():
            nat_sum += cross_entropy(model(Tensor(xb)), yb).item() * len(idx)
            adv_sum += cross_entropy(model(Tensor(x_adv)), yb).item() * len(idx)
    return nat_sum / n, adv_sum / n


def _epoch_metrics(state: SearchState, batch_rows: list[dict],
                   extra_nat: list[float], stage: int, alpha_lr: float) -> dict:
    gammas = [r["gamma"] for r in batch_rows if r["gamma"] is not None]
    margins = [r["certificate_margin"] for r in batch_rows
               if r["certificate_margin"] is not None]
    return {
        "epoch": state.epoch,
        "stage": stage,
        "lr_w": state.w_lr,
        "lr_alpha": alpha_lr,
        "gamma_mean": _mean_or_nan(gammas) if gammas else None,
        "certificate_margin_min": float(min(margins)) if margins else None,
        "train_adversarial_loss": _mean_or_nan(
            [r["train_adversarial_loss"] for r in batch_rows]),
        "train_natural_loss": _mean_or_nan(extra_nat),
        # optimizer's per-step view; the logged val_* losses are the
        # fixed-protocol epoch-end measurements
        "alpha_step_adversarial_loss": _mean_or_nan(
            [r["val_adversarial_loss"] for r in batch_rows]),
    }


def run_search(schedule: SearchSchedule, config: SupernetConfig,
               dataset: Dataset, log=None) -> SearchResult:
    """Run the full two-stage search; emits one genotype and metric row per epoch.

    The dataset's training images are split into equal train/validation
    halves. The history covers every epoch, not just the last, so a degraded
    final architecture can be rolled back to an earlier snapshot. On a
    non-finite loss the epoch is aborted and the last completed epoch's
    snapshot is restored.
    """
    schedule.validate()
    config.validate()
    train_x, train_y, val_x, val_y = dataset.search_split()
    if train_x.shape[0] < schedule.batch_size:
        raise DataError(
            f"train half with {train_x.shape[0]} images is smaller than one "
            f"batch of {schedule.batch_size}")
    dtype = schedule.dtype()
    rng = np.random.default_rng(schedule.rng_seed)
    supernet = Supernet(config, rng=rng, dtype=dtype)
    arch = ArchParams.initial(rng, config.intermediate_nodes, dtype=dtype)
    state = SearchState(
        supernet=supernet,
        arch=arch,
        schedule=schedule,
        w_optimizer=SGDMomentum(schedule.w_momentum, schedule.w_weight_decay),
        alpha_optimizer=Adam(schedule.alpha_betas,
                             schedule.alpha_weight_decay),
        rng=rng,
    )
    train_x = train_x.astype(dtype)
    val_x = val_x.astype(dtype)

    result = SearchResult()
    for epoch in range(1, schedule.epochs + 1):
        state.epoch = epoch
        state.w_lr = cosine_lr(schedule.w_lr, epoch - 1, schedule.epochs)
        stage = 1 if epoch <= schedule.first_stage_epochs else 2
        step = first_stage_step if stage == 1 else second_stage_step
        alpha_lr = (schedule.alpha_lr if stage == 1
                    else schedule.alpha_lr_stage2)
        last_good = (state.arch.clone(),
                     {k: v.copy() for k, v in network_state(supernet).items()})
        train_batches = batch_indices(train_x.shape[0], schedule.batch_size,
                                      state.rng)
        val_batches = batch_indices(val_x.shape[0], schedule.batch_size,
                                    state.rng)
        batch_rows, nat_train_losses = [], []
        try:
            for tb, vb in zip(train_batches, val_batches):
                row = step(state, (train_x[tb], train_y[tb]),
                           (val_x[vb], val_y[vb]))
                batch_rows.append(row)
                with no_grad(), bn_stats_frozen():
                    state.supernet.train(True)
                    nat_train_losses.append(cross_entropy(
                        state.model()(Tensor(train_x[tb])),
                        train_y[tb]).item())
            val_nat, val_adv = epoch_validation_losses(state, val_x, val_y)
        except AttackDivergence as e:
            state.arch = last_good[0]
            load_network_state(supernet, last_good[1])
            result.diverged = True
            result.divergence_message = f"epoch {epoch}: {e}"
            break
        metrics = _epoch_metrics(state, batch_rows, nat_train_losses, stage,
                                 alpha_lr)
        metrics["val_natural_loss"] = val_nat
        metrics["val_adversarial_loss"] = val_adv
        result.metrics.append(metrics)
        result.genotype_history.append(
            (epoch, discretize(state.arch, config)))
        if log is not None:
            log(result.metrics[-1])
    result.final_arch = state.arch
    return result
