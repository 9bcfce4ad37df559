"""Training and evaluation of one early-exit candidate.

Training follows a three-phase schedule: backbone-only fine-tuning with plain
cross-entropy, then the full network under ``w1 * L_acc + w2 * L_cost``, then
the same loss plus ``w3 * L_peak`` with a support matrix refreshed each epoch.
The weights of the epoch with the lowest validation loss are kept.

Evaluation works on a cache of per-sample, per-exit logits and confidences
from a single forward pass, so the threshold grid search never re-runs the
network.
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .errors import ContractViolation

log = logging.getLogger(__name__)

GRID_STEPS = 10  # thresholds live on {0.0, 0.1, ..., 0.9}


@dataclass
class TrainConfig:
    mu: tuple = (10, 5, 5)
    omega: tuple = (1.0, 1.0, 1.0)
    lambda_e: float = 1.0
    accuracy_constraint: float = 0.65
    macs_constraint: float = 2.7e6
    support_per_class: int = 10
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 64
    optimizer: str = "adam"
    regularize_exits: bool = True
    mode: str = "differentiable"
    eval_batch: int = 512

    def __post_init__(self):
        self.mu = tuple(int(m) for m in self.mu)
        self.omega = tuple(float(w) for w in self.omega)
        if len(self.mu) != 3 or min(self.mu) < 0:
            raise ContractViolation(f"mu must be three non-negative epoch counts, got {self.mu}")
        if len(self.omega) != 3 or min(self.omega) < 0:
            raise ContractViolation(f"omega must be three non-negative weights, got {self.omega}")
        if not 0 < self.accuracy_constraint < 1:
            raise ContractViolation("accuracy constraint must lie in (0, 1)")
        if not self.macs_constraint > 0:
            raise ContractViolation("MAC constraint must be positive")
        if self.mode not in ("differentiable", "joint"):
            raise ContractViolation(f"unknown training mode {self.mode!r}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def correctness(logits, labels):
    """Boolean per-sample hit vector for one exit's logits (detached)."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1) == np.asarray(labels)


def loss_acc(logits, confs, labels, targets=None, regularize=True):
    """Final-exit CE + CE of the aggregated early exits + per-exit confidence BCE.

    ``targets`` are the per-exit correctness indicators used by the BCE terms;
    when omitted they are taken from the current logits, outside the tape.
    """
    B = len(logits)
    loss = ad.cross_entropy(logits[-1], labels)
    if B == 1:
        return loss
    cum = mdl.cumulative_confidences(confs)
    mix = mdl.aggregate_outputs(logits, cum, B - 1)
    loss = loss + ad.cross_entropy(mix, labels)
    if regularize:
        for i in range(B - 1):
            t = correctness(logits[i], labels) if targets is None else targets[i]
            loss = loss + ad.binary_cross_entropy(confs[i], np.asarray(t, dtype=np.float64))
    return loss


def loss_joint(logits, labels, lambda_e):
    """Classic joint training: final loss plus ``lambda_e`` times every branch loss."""
    loss = ad.cross_entropy(logits[-1], labels)
    for f in logits[:-1]:
        loss = loss + lambda_e * ad.cross_entropy(f, labels)
    return loss


def expected_cost(confs, gamma):
    """Batch mean of the recursive expected exit cost.

    ``g_B = gamma_B``; ``g_i = c_i * gamma_i + (1 - c_i) * g_{i+1}``; returns ``g_1``.
    """
    if len(confs) != len(gamma):
        raise ContractViolation(f"{len(confs)} confidences for {len(gamma)} costs")
    cs = [ad.as_tensor(c) for c in confs]
    if np.any(cs[-1].data != 1.0):
        raise ContractViolation("the final exit confidence must be exactly 1")
    g = ad.Tensor(np.full(cs[-1].shape, float(gamma[-1])))
    for c, cost in zip(cs[-2::-1], gamma[-2::-1]):
        g = c * float(cost) + (1.0 - c) * g
    return ad.mean(g) if g.size > 1 else ad.reshape(g, ())


def loss_cost(exp_cost, macs_constraint, final_cost):
    """Normalized violation ``max(0, cost - F) / (gamma_B - F)``; 0 if F >= gamma_B."""
    if macs_constraint >= final_cost:
        return ad.Tensor(0.0)
    return ad.relu(ad.as_tensor(exp_cost) - float(macs_constraint)) * (1.0 / (final_cost - macs_constraint))


def loss_peak(confs, support_rows):
    """MSE between early-exit confidences and the support-matrix row of each label.

    ``confs`` are the B-1 non-final confidence tensors of shape (N,);
    ``support_rows`` is the (N, B-1) detached target matrix.
    """
    if not confs:
        return ad.Tensor(0.0)
    rows = np.asarray(support_rows, dtype=np.float64)
    total = None
    for i, c in enumerate(confs):
        term = ad.mse(c, rows[:, i])
        total = term if total is None else total + term
    return total * (1.0 / len(confs))


def composite_loss(logits, confs, labels, gamma, cfg, omega=None, support=None):
    w1, w2, w3 = cfg.omega if omega is None else omega
    if cfg.mode == "joint":
        return loss_joint(logits, labels, cfg.lambda_e)
    loss = loss_acc(logits, confs, labels, regularize=cfg.regularize_exits) * w1
    if w2 and len(logits) > 1:
        loss = loss + loss_cost(expected_cost(confs, gamma), cfg.macs_constraint, gamma[-1]) * w2
    if w3 and len(logits) > 1 and support is not None:
        loss = loss + loss_peak(confs[:-1], support[labels][:, : len(logits) - 1]) * w3
    return loss


# --------------------------------------------------------------------------
# cached outputs
# --------------------------------------------------------------------------


@dataclass
class OutputCache:
    """Per-sample outputs of every exit: logits (N, B, C), confidences (N, B), labels (N,)."""

    logits: np.ndarray
    confs: np.ndarray
    labels: np.ndarray

    @property
    def correct(self):
        return np.argmax(self.logits, axis=2) == self.labels[:, None]

    @property
    def num_exits(self):
        return self.confs.shape[1]


def collect_outputs(spec, params, images, labels, batch=512):
    """Run the network without a tape and stack every exit's outputs."""
    logits, confs = [], []
    for start in range(0, len(labels), batch):
        f, c = mdl.forward_eenn(spec, params, images[start : start + batch])
        logits.append(np.stack([t.data for t in f], axis=1))
        confs.append(np.stack([t.data for t in c], axis=1))
    return OutputCache(np.concatenate(logits), np.concatenate(confs), np.asarray(labels))


def compute_support_matrix(spec, params, support, batch=512):
    """(C, B) matrix of per-class, per-exit accuracy on the support set."""
    present = np.bincount(support.labels, minlength=support.num_classes)
    if np.any(present == 0):
        missing = np.nonzero(present == 0)[0].tolist()
        raise ContractViolation(f"support set lacks classes {missing}")
    cache = collect_outputs(spec, params, support.images, support.labels, batch)
    return support_matrix_from_correct(cache.correct, support.labels, support.num_classes)


def support_matrix_from_correct(correct, labels, num_classes):
    sm = np.zeros((num_classes, correct.shape[1]))
    for j in range(num_classes):
        rows = correct[labels == j]
        if rows.shape[0] == 0:
            raise ContractViolation(f"support set lacks class {j}")
        sm[j] = rows.mean(axis=0)
    return sm


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    trace: list
    best_epoch: int
    best_val_loss: float


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params, snap):
    for k, v in snap.items():
        params[k].data = v.copy()


def validation_loss(spec, params, splits, cfg):
    """Full composite loss on the validation split (support matrix taken fresh)."""
    support = None
    if cfg.omega[2] and spec.num_exits > 1 and splits.support is not None:
        support = compute_support_matrix(spec, params, splits.support, cfg.eval_batch)
    total, n = 0.0, 0
    val = splits.val
    for start in range(0, len(val), cfg.eval_batch):
        x = val.images[start : start + cfg.eval_batch]
        y = val.labels[start : start + cfg.eval_batch]
        f, c = mdl.forward_eenn(spec, params, x)
        loss = composite_loss(f, c, y, spec.gamma, cfg, support=support)
        total += loss.item() * len(y)
        n += len(y)
    return total / n


def train_eenn(spec, splits, cfg, params=None):
    """Three-phase training; returns the best-validation-loss weights and the per-epoch trace."""
    if splits.train is None or len(splits.train) == 0:
        raise ContractViolation("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = mdl.init_params(spec, rng)
    opt = ad.Optimizer(cfg.optimizer, cfg.lr)
    backbone_names = mdl.param_names(spec, backbone_only=True)
    backbone = {k: params[k] for k in backbone_names}
    trace = []
    best = (np.inf, -1, _snapshot(params))
    epoch_counter = 0
    mu1, mu2, mu3 = cfg.mu
    w1, w2, w3 = cfg.omega
    if w2 and spec.num_exits > 1 and cfg.macs_constraint >= spec.gamma[-1]:
        log.warning("MAC constraint %.4g >= final exit cost %.4g: cost loss is vacuous", cfg.macs_constraint, spec.gamma[-1])
    phases = [(1, mu1), (2, mu2), (3, mu3)]
    for phase, epochs in phases:
        if phase > 1 and spec.num_exits == 1 and cfg.mode != "joint":
            trainable = params
        else:
            trainable = backbone if phase == 1 else params
        for _ in range(epochs):
            support = None
            if phase == 3 and spec.num_exits > 1 and splits.support is not None:
                support = compute_support_matrix(spec, params, splits.support, cfg.eval_batch)
            running, seen = 0.0, 0
            for x, y in splits.batches("train", epoch_counter):
                with ad.Tape() as tape:
                    if phase == 1:
                        loss = ad.cross_entropy(mdl.forward_backbone(spec, params, x), y)
                    else:
                        f, c = mdl.forward_eenn(spec, params, x)
                        omega = (w1, w2, w3 if phase == 3 else 0.0)
                        loss = composite_loss(f, c, y, spec.gamma, cfg, omega=omega, support=support)
                tape.backward(loss)
                opt.step(trainable)
                running += loss.item() * len(y)
                seen += len(y)
            val_loss = validation_loss(spec, params, splits, cfg)
            trace.append({"phase": phase, "epoch": epoch_counter, "train_loss": running / seen, "val_loss": val_loss})
            log.debug("phase %d epoch %d train %.4f val %.4f", phase, epoch_counter, running / seen, val_loss)
            if val_loss < best[0]:
                best = (val_loss, epoch_counter, _snapshot(params))
            epoch_counter += 1
    _restore(params, best[2])
    return TrainResult(params, trace, best[1], float(best[0]))


# --------------------------------------------------------------------------
# inference and metrics
# --------------------------------------------------------------------------


def _grid_levels(cum):
    """Largest grid index k (0..9) with cum >= k/10, per entry."""
    levels = np.zeros(cum.shape, dtype=np.int64)
    for k in range(1, GRID_STEPS):
        levels += cum >= k / GRID_STEPS
    return levels


def cumulative_scores(confs):
    """Array form of the cumulative confidences for an (N, B) confidence table."""
    confs = np.asarray(confs, dtype=np.float64)
    out = np.empty_like(confs)
    remaining = np.ones(confs.shape[0])
    for i in range(confs.shape[1]):
        out[:, i] = confs[:, i] * remaining
        remaining = remaining * (1.0 - confs[:, i])
    return out


def exit_indices(confs, thresholds):
    """0-based exit taken by each sample: first i with cumulative score >= thresholds[i]."""
    confs = np.asarray(confs, dtype=np.float64)
    B = confs.shape[1]
    if len(thresholds) != B - 1:
        raise ContractViolation(f"need {B - 1} thresholds, got {len(thresholds)}")
    cum = cumulative_scores(confs)
    out = np.full(confs.shape[0], B - 1, dtype=np.int64)
    undecided = np.ones(confs.shape[0], dtype=bool)
    for i, eps in enumerate(thresholds):
        halt = undecided & (cum[:, i] >= eps)
        out[halt] = i
        undecided &= ~halt
    return out


def early_exit_inference(spec, params, images, thresholds, batch=512):
    """Predictions and exit indices for raw images under the given thresholds."""
    cache = collect_outputs(spec, params, images, np.zeros(len(images), dtype=np.int64), batch)
    exits = exit_indices(cache.confs, thresholds)
    preds = np.argmax(cache.logits[np.arange(len(exits)), exits], axis=1)
    return preds, exits


def utilization(exits, num_exits):
    return np.bincount(exits, minlength=num_exits) / len(exits)


def adaptive_macs(gamma, util):
    """Utilization-weighted cost; utilizations must sum to 1 within 1e-9."""
    util = np.asarray(util, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if util.shape != gamma.shape:
        raise ContractViolation(f"{util.size} utilizations for {gamma.size} exits")
    if abs(util.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"utilizations sum to {util.sum()}, not 1")
    return float(np.dot(gamma, util))


def compute_ece(confidences, correct, bins=10):
    """Expected calibration error in percent with equal-width bins."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ContractViolation("ECE needs at least one sample")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ContractViolation("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    ece = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            ece += sel.mean() * abs(conf[sel].mean() - hit[sel].mean())
    return 100.0 * ece


def softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def exit_ece(cache, bins=10):
    """ECE per exit: learned confidence for early exits, max-softmax for the final exit."""
    correct = cache.correct
    out = []
    for i in range(cache.num_exits):
        if i == cache.num_exits - 1:
            conf = softmax_np(cache.logits[:, i]).max(axis=1)
        else:
            conf = cache.confs[:, i]
        out.append(compute_ece(conf, correct[:, i], bins))
    return out


@dataclass
class EvaluationResult:
    accuracy: float
    backbone_accuracy: float
    macs: float
    utilization: list
    thresholds: list
    ece: list
    gamma: list

    def to_dict(self):
        return asdict(self)


def evaluate(cache, gamma, thresholds):
    exits = exit_indices(cache.confs, thresholds)
    correct = cache.correct
    util = utilization(exits, cache.num_exits)
    return EvaluationResult(
        accuracy=float(correct[np.arange(len(exits)), exits].mean()),
        backbone_accuracy=float(correct[:, -1].mean()),
        macs=adaptive_macs(gamma, util),
        utilization=[float(u) for u in util],
        thresholds=[float(t) for t in thresholds],
        ece=exit_ece(cache),
        gamma=[float(g) for g in gamma],
    )


def _grid_table(cache, gamma, combos):
    """Accuracy and adaptive MACs for every threshold-index combo (rows of ``combos``)."""
    levels = _grid_levels(cumulative_scores(cache.confs)[:, :-1])  # (N, B-1)
    B = cache.num_exits
    n = levels.shape[0]
    correct = cache.correct
    gamma = np.asarray(gamma, dtype=np.float64)
    acc = np.empty(len(combos))
    macs = np.empty(len(combos))
    chunk = max(1, 2_000_000 // max(1, n * (B - 1)))
    for s in range(0, len(combos), chunk):
        c = combos[s : s + chunk]
        halts = c[:, None, :] <= levels[None, :, :]  # (M, N, B-1)
        any_halt = halts.any(axis=2)
        ex = np.where(any_halt, np.argmax(halts, axis=2), B - 1)  # (M, N)
        acc[s : s + chunk] = correct[np.arange(n)[None, :], ex].mean(axis=1)
        counts = np.stack([(ex == i).sum(axis=1) for i in range(B)], axis=1) / n
        macs[s : s + chunk] = counts @ gamma
    return acc, macs


def tune_thresholds(cache, gamma, accuracy_constraint, macs_constraint, constrained=True):
    """Grid-search the most accurate thresholds, then lower them to meet the MAC budget.

    Step one enumerates ``{0.0, ..., 0.9}^(B-1)`` and keeps the most accurate
    vector (ties: lower MACs, then lexicographically smallest).  Step two walks
    exits from the second-last to the first, lowering each threshold by 0.1
    while MACs exceed the budget and accuracy stays at or above its
    constraint.
    """
    B = cache.num_exits
    if B == 1:
        return [], evaluate(cache, gamma, [])
    combos = np.array(list(itertools.product(range(GRID_STEPS), repeat=B - 1)), dtype=np.int64)
    acc, macs = _grid_table(cache, gamma, combos)
    # lexsort: last key is primary; combos are already in lexicographic order
    order = np.lexsort((np.arange(len(combos)), macs, -acc))
    best = combos[order[0]].copy()
    result = evaluate(cache, gamma, best / GRID_STEPS)
    if constrained and result.macs > macs_constraint:
        for i in range(B - 2, -1, -1):
            while best[i] > 0 and result.macs > macs_constraint:
                trial = best.copy()
                trial[i] -= 1
                cand = evaluate(cache, gamma, trial / GRID_STEPS)
                if cand.accuracy < accuracy_constraint:
                    break
                best, result = trial, cand
            if result.macs <= macs_constraint:
                break
    thresholds = [float(t) / GRID_STEPS for t in best]
    return thresholds, evaluate(cache, gamma, thresholds)


# --------------------------------------------------------------------------
# full candidate pipeline
# --------------------------------------------------------------------------


@dataclass
class CandidateOutcome:
    spec: object
    params: dict
    evaluation: EvaluationResult
    train: TrainResult
    cache: OutputCache = field(repr=False, default=None)

    @property
    def epochs(self):
        return len(self.train.trace)


def train_and_evaluate(genome, splits, cfg, constrained=True, max_exits=mdl.MAX_EXITS, head_channels=mdl.HEAD_CHANNELS):
    """Build, train, tune thresholds and evaluate one candidate on the validation split."""
    spec = mdl.build_eenn(genome, splits.train.num_classes, splits.train.image_shape, max_exits, head_channels)
    result = train_eenn(spec, splits, cfg)
    cache = collect_outputs(spec, result.params, splits.val.images, splits.val.labels, cfg.eval_batch)
    _, evaluation = tune_thresholds(cache, spec.gamma, cfg.accuracy_constraint, cfg.macs_constraint, constrained)
    return CandidateOutcome(spec, result.params, evaluation, result, cache)
