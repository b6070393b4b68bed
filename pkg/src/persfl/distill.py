"""Optimal-teacher selection and per-client distillation with a (lambda, T) sweep."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError
from .fedsim import FedAvgResult, run_fedavg
from .metrics import accuracy
from .nn import (Hyper, ModelParams, cross_entropy, forward, forward_tensor, objective_loss,
                 softmax_t, train_epochs)

log = logging.getLogger(__name__)

OBJECTIVES = ("KL", "GD")
INIT_MODES = ("optimal_teacher", "fedavg_final")
KL_DIRECTIONS = ("teacher_student", "student_teacher")

DEFAULT_LAMBDAS = tuple(round(0.05 * i, 2) for i in range(20))
DEFAULT_TEMPERATURES = (1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0, 25.0)


def _dedup(values):
    out = []
    for v in values:
        v = float(v)
        if v not in out:
            out.append(v)
    return tuple(sorted(out))


@dataclass(frozen=True)
class DistillConfig:
    lambda_grid: tuple = DEFAULT_LAMBDAS
    T_grid: tuple = DEFAULT_TEMPERATURES
    E: int = 5
    objective: str = "KL"
    init_mode: str = "optimal_teacher"
    hyper: Hyper = field(default_factory=Hyper)
    kl_direction: str = "teacher_student"
    workers: int = 1

    def __post_init__(self):
        lam, temps = _dedup(self.lambda_grid), _dedup(self.T_grid)
        if not lam or not temps:
            raise ParameterError("lambda and temperature grids must be non-empty")
        if any(not 0.0 <= v <= 1.0 for v in lam):
            raise ParameterError(f"lambda values must lie in [0, 1], got {lam}")
        if any(not t > 0 for t in temps):
            raise ParameterError(f"temperatures must be positive, got {temps}")
        if self.E < 1:
            raise ParameterError(f"distillation epochs E must be >= 1, got {self.E}")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}")
        if self.init_mode not in INIT_MODES:
            raise ParameterError(f"init_mode must be one of {INIT_MODES}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ParameterError(f"kl_direction must be one of {KL_DIRECTIONS}")
        object.__setattr__(self, "lambda_grid", lam)
        object.__setattr__(self, "T_grid", temps)

    @property
    def grid_size(self):
        return len(self.lambda_grid) * len(self.T_grid)

    @property
    def soft_mode(self):
        if self.objective == "GD":
            return "gd"
        return "kl" if self.kl_direction == "teacher_student" else "kl_reverse"


@dataclass(frozen=True)
class TeacherChoice:
    client: int
    round: int
    val_loss: float


@dataclass(frozen=True)
class GridCell:
    lam: float
    T: float
    val_acc: float
    test_acc: float


@dataclass(eq=False)
class PersonalResult:
    client: int
    lambda_star: float
    T_star: float
    params: ModelParams
    val_acc: float
    test_acc: float
    sweep: list = field(default_factory=list)
    distill_epochs: int = 0

    def interaction_grid(self, lambdas, temps, key="test_acc"):
        table = {(c.lam, c.T): getattr(c, key) for c in self.sweep}
        return np.array([[table[(lam, t)] for t in temps] for lam in lambdas])


@dataclass
class Budget:
    fedavg_epochs: int
    distill_epochs: int

    @property
    def total(self):
        return self.fedavg_epochs + self.distill_epochs


@dataclass(eq=False)
class PersFLRun:
    results: list
    teachers: list
    fedavg: FedAvgResult
    budgets: list
    fedavg_test_acc: list
    fedavg_val_acc: list

    @property
    def ledger(self):
        return self.fedavg.ledger


def select_teacher(snapshots, client, dataset, client_index=0):
    """Snapshot with the lowest validation cross-entropy; earliest round on ties."""
    if not snapshots:
        raise ParameterError("no snapshots to choose a teacher from")
    if len(client.val) == 0:
        raise DataError(f"client {client_index} has an empty validation split")
    X, y = dataset.subset(client.val)
    best = None
    for snap in snapshots:
        loss = cross_entropy(softmax_t(forward(snap.params, X), 1.0), y)
        if best is None or loss < best[1]:
            best = (snap.round, loss)
    return TeacherChoice(client_index, best[0], float(best[1]))


def _check_lam_T(lam, T):
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")


def distill_loss(student, teacher, x, y, lam, T, objective="KL", kl_direction="teacher_student"):
    """Distillation objective on one batch, as a scalar loss node.

    ``student`` is either :class:`ModelParams` or the ``[(w, b), ...]``
    tensors returned by ``nn.watch`` (to get gradients).  The teacher's
    forward pass is plain numpy, so it never receives gradient.
    """
    _check_lam_T(lam, T)
    if objective not in OBJECTIVES:
        raise ParameterError(f"objective must be one of {OBJECTIVES}")
    if isinstance(student, ModelParams):
        layers = list(zip(student.weights, student.biases))
    else:
        layers = student
    logits = forward_tensor(layers, x)
    if logits.shape[1] != teacher.sizes[-1]:
        raise ParameterError(
            f"student emits {logits.shape[1]} classes but teacher emits {teacher.sizes[-1]}")
    targets = softmax_t(forward(teacher, x), T)
    if objective == "GD":
        mode = "gd"
    else:
        mode = "kl" if kl_direction == "teacher_student" else "kl_reverse"
    return objective_loss(logits, y, targets, 1.0 - lam, lam * T * T, T, mode)


def distill(teacher_params, init_params, dataset, client, cfg, lam, T, seed):
    """Train a personalized model for one (lambda, T) cell.

    ``init_params`` is the starting point (the teacher itself, or the final
    FedAvg model for the initialization ablation).  Soft targets come from
    ``teacher_params`` at temperature ``T``.
    """
    _check_lam_T(lam, T)
    if len(client.train) == 0:
        raise DataError("client has an empty train split")
    X, y = dataset.subset(client.train)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    targets = softmax_t(forward(teacher_params, X), T)
    return train_epochs(init_params, X, y, eta=cfg.hyper.eta, batch_size=cfg.hyper.batch_size,
                        epochs=cfg.E, rng=rng, soft_targets=targets,
                        hard_weight=1.0 - lam, soft_weight=lam * T * T, T=T,
                        soft_mode=cfg.soft_mode)


def _init_for(cfg, teacher_params, fedavg_final):
    if cfg.init_mode == "optimal_teacher" or fedavg_final is None:
        return teacher_params
    return fedavg_final


def grid_search(teacher_params, dataset, client, cfg, seed, fedavg_final=None, client_index=0):
    """Distill one candidate per (lambda, T) and keep the best on validation.

    Every candidate starts from the same weights and uses the same shuffling
    seed.  Ties in validation accuracy go to the lower lambda, then the lower
    temperature.  Test accuracy is computed for reporting only.
    """
    init = _init_for(cfg, teacher_params, fedavg_final)
    Xv, yv = dataset.subset(client.val)
    Xt, yt = dataset.subset(client.test)
    cells = [(lam, T) for lam in cfg.lambda_grid for T in cfg.T_grid]

    def run_cell(cell):
        lam, T = cell
        model = distill(teacher_params, init, dataset, client, cfg, lam, T,
                        np.random.default_rng(seed))
        return model, GridCell(lam, T, accuracy(model, Xv, yv), accuracy(model, Xt, yt))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(c) for c in cells]
    best = None
    for model, cell in outcomes:
        # cells are ordered by (lambda, T) ascending, so strict > keeps the tie-break
        if best is None or cell.val_acc > best[1].val_acc:
            best = (model, cell)
    model, cell = best
    return PersonalResult(client_index, cell.lam, cell.T, model, cell.val_acc, cell.test_acc,
                          [c for _, c in outcomes], distill_epochs=len(outcomes) * cfg.E)


def personalization_seed(seed, client):
    return int(np.random.SeedSequence([int(seed), int(client), 0xD157]).generate_state(1)[0])


def run_persfl(dataset, split, fed_cfg, distill_cfg, fedavg=None):
    """Stage 1 (FedAvg + teacher choice) then Stage 2 (grid search) per client."""
    if split.K != fed_cfg.K:
        raise ParameterError(f"split has {split.K} clients but config says K={fed_cfg.K}")
    if fedavg is None:
        fedavg = run_fedavg(dataset, split, fed_cfg)
    snapshots_by_round = {s.round: s for s in fedavg.snapshots}
    teachers, results, budgets = [], [], []
    fed_test, fed_val = [], []
    for k, client in enumerate(split.clients):
        choice = select_teacher(fedavg.snapshots, client, dataset, client_index=k)
        teacher = snapshots_by_round[choice.round].params
        result = grid_search(teacher, dataset, client, distill_cfg,
                             personalization_seed(fed_cfg.seed, k),
                             fedavg_final=fedavg.final, client_index=k)
        teachers.append(choice)
        results.append(result)
        budgets.append(Budget(fedavg.ledger.local_epochs_run[k], result.distill_epochs))
        fed_test.append(accuracy(fedavg.final, *dataset.subset(client.test)))
        fed_val.append(accuracy(fedavg.final, *dataset.subset(client.val)))
        log.info("client %d: teacher round %d, lambda*=%.2f T*=%g, test %.1f%%",
                 k, choice.round, result.lambda_star, result.T_star, result.test_acc)
    return PersFLRun(results, teachers, fedavg, budgets, fed_test, fed_val)
