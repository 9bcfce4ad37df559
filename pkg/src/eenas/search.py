"""Surrogate-assisted NSGA-II search over early-exit candidates.

Each iteration fits accuracy and MAC surrogates on the archive, evolves a
population on the predicted objectives ``(-accuracy, F_CM)`` and trains the
most promising unseen candidates.  ``F_CM`` blends the MAC count with its
constraint violation, weighted by the admissible ratio ``phi`` of the
current pool.
"""

import concurrent.futures as cf
import hashlib
import logging
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import archive as arc
from . import autodiff as ad
from . import model as mdl
from . import surrogates as sur
from . import trainer as trn
from .errors import ContractViolation

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# constraint handling
# --------------------------------------------------------------------------


def admissible_ratio(macs, macs_constraint):
    """Fraction of the population with MACs at or below the constraint."""
    macs = np.asarray(macs, dtype=np.float64).ravel()
    if macs.size == 0:
        raise ContractViolation("admissible ratio of an empty population")
    return float(np.mean(macs <= macs_constraint))


def fcm(macs, macs_constraint, phi):
    """``phi * F_M + (1 - phi) * max(0, F_M - constraint)``; works element-wise."""
    if not 0.0 <= phi <= 1.0:
        raise ContractViolation(f"phi must lie in [0, 1], got {phi}")
    macs = np.asarray(macs, dtype=np.float64)
    out = phi * macs + (1.0 - phi) * np.maximum(0.0, macs - macs_constraint)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# NSGA-II building blocks
# --------------------------------------------------------------------------


def dominates(a, b):
    """True if ``a`` is no worse than ``b`` everywhere and better somewhere (minimization)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


def nondominated_sort(points):
    """Fast non-dominated sorting; returns fronts as lists of row indices (minimization)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ContractViolation(f"points must be (n, m), got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractViolation("objectives must be finite")
    n = len(pts)
    if n == 0:
        return []
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.nonzero(dom[i])[0]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(points):
    """Crowding distance of every point of one front; boundaries are infinite."""
    pts = np.asarray(points, dtype=np.float64)
    n, m = pts.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for j in range(m):
        order = np.argsort(pts[:, j], kind="stable")
        col = pts[order, j]
        span = col[-1] - col[0]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span <= 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def crossover_mutate(p1, p2, rng, crossover_rate=0.9, mutation_rate=None, alphabets=mdl.GENE_ALPHABETS, cuts=None):
    """Two-point crossover followed by per-gene resampling mutation.

    ``mutation_rate`` defaults to ``1 / len(chromosome)``.  A mutated gene is
    redrawn from the other values of its alphabet, so it always changes.
    """
    a = list(p1)
    b = list(p2)
    n = len(a)
    if len(b) != n or len(alphabets) != n:
        raise ContractViolation("parents and alphabets must have equal length")
    if mutation_rate is None:
        mutation_rate = 1.0 / n
    if cuts is not None or rng.random() < crossover_rate:
        i, j = sorted(cuts) if cuts is not None else sorted(rng.choice(n + 1, size=2, replace=False))
        a[i:j], b[i:j] = b[i:j], a[i:j]
    for child in (a, b):
        for g, alpha in enumerate(alphabets):
            if mutation_rate > 0 and rng.random() < mutation_rate:
                others = [v for v in alpha if v != child[g]]
                if others:
                    child[g] = others[rng.integers(len(others))]
    return tuple(a), tuple(b)


def rank_and_crowd(objs):
    """Per-point front rank and crowding distance."""
    fronts = nondominated_sort(objs)
    rank = np.empty(len(objs), dtype=np.int64)
    crowd = np.empty(len(objs))
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance(np.asarray(objs)[front])
    return rank, crowd


def _tournament(rank, crowd, rng):
    i, j = rng.integers(len(rank), size=2)
    if rank[i] != rank[j]:
        return i if rank[i] < rank[j] else j
    if crowd[i] != crowd[j]:
        return i if crowd[i] > crowd[j] else j
    return min(i, j)


def environmental_selection(objs, size):
    """Indices of the ``size`` survivors: whole fronts first, then by crowding."""
    chosen = []
    for front in nondominated_sort(objs):
        if len(chosen) + len(front) <= size:
            chosen.extend(front)
            continue
        crowd = crowding_distance(np.asarray(objs)[front])
        order = sorted(range(len(front)), key=lambda t: (-crowd[t], front[t]))
        chosen.extend(front[t] for t in order[: size - len(chosen)])
        break
    return chosen


def nsga2_generation(population, objectives, rng, crossover_rate=0.9, mutation_rate=None, alphabets=mdl.GENE_ALPHABETS, pop_objs=None):
    """One (mu + lambda) NSGA-II generation.

    Args:
        population: list of chromosomes (tuples of ints).
        objectives: callable mapping a list of chromosomes to an (n, 2) array
            of minimized objectives; it is called on the merged parent and
            offspring pool, so pool-level quantities such as ``phi`` are
            computed there.
        rng: numpy Generator.
        pop_objs: objectives of ``population`` if already known.

    Returns:
        (next population, its objectives)
    """
    size = len(population)
    if size == 0:
        raise ContractViolation("empty population")
    if pop_objs is None:
        pop_objs = np.asarray(objectives(population))
    rank, crowd = rank_and_crowd(pop_objs)
    offspring = []
    while len(offspring) < size:
        a = population[_tournament(rank, crowd, rng)]
        b = population[_tournament(rank, crowd, rng)]
        offspring.extend(crossover_mutate(a, b, rng, crossover_rate, mutation_rate, alphabets))
    offspring = offspring[:size]
    pool, seen = [], set()
    for c in list(population) + offspring:
        if c not in seen:
            seen.add(c)
            pool.append(c)
    if len(pool) < size:  # too few distinct genomes; keep duplicates to conserve size
        pool = list(population) + offspring
    objs = np.asarray(objectives(pool))
    keep = environmental_selection(objs, size)
    return [pool[i] for i in keep], objs[keep]


# --------------------------------------------------------------------------
# Pareto utilities
# --------------------------------------------------------------------------


def pareto_mask(points):
    """Boolean mask of the first non-dominated front (minimization)."""
    pts = np.asarray(points, dtype=np.float64)
    mask = np.zeros(len(pts), dtype=bool)
    if len(pts):
        mask[nondominated_sort(pts)[0]] = True
    return mask


def hypervolume_2d(points, ref):
    """Area dominated by ``points`` and bounded by ``ref`` (both objectives minimized)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(ref, dtype=np.float64)
    pts = pts[np.all(pts < ref, axis=1)]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area, best_y = 0.0, ref[1]
    for x, y in pts:
        if y < best_y:
            area += (ref[0] - x) * (best_y - y)
            best_y = y
    return float(area)


def _normalize(points):
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0] = 1.0
    return (pts - lo) / span


def knee_distances(points):
    """Signed distance of each point to the line through the front's extremes.

    Positive values lie on the ideal side.  Both objectives are minimized and
    normalized to [0, 1] first.
    """
    z = _normalize(points)
    e1 = z[np.lexsort((z[:, 1], z[:, 0]))[0]]  # best in objective 0
    e2 = z[np.lexsort((z[:, 0], z[:, 1]))[0]]  # best in objective 1
    d = e2 - e1
    length = math.hypot(d[0], d[1])
    if length == 0:
        return np.zeros(len(z))
    normal = np.array([d[1], -d[0]]) / length
    ideal = z.min(axis=0)
    if normal @ (ideal - e1) < 0:
        normal = -normal
    return (z - e1) @ normal


def select_tradeoff(points, k=1):
    """Indices of the ``k`` points nearest the knee of their Pareto front.

    ``points`` are (n, 2) minimized objectives where objective 0 is negated
    accuracy.  The knee is the front point farthest from the segment joining
    the front's extremes in normalized space (ties: better objective 0).
    Remaining picks are ordered by normalized distance to the knee.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ContractViolation("select_tradeoff needs a non-empty front")
    front = np.nonzero(pareto_mask(pts))[0]
    dist = knee_distances(pts[front])
    order = np.lexsort((front, pts[front, 0], -dist))
    knee = front[order[0]]
    z = _normalize(pts)
    gap = np.linalg.norm(z - z[knee], axis=1)
    ranked = np.lexsort((np.arange(len(pts)), pts[:, 0], gap))
    ranked = [knee] + [int(i) for i in ranked if i != knee]
    return ranked[: max(1, int(k))]


# --------------------------------------------------------------------------
# configuration and state
# --------------------------------------------------------------------------


@dataclass
class SearchConfig:
    n_start: int = 100
    iterations: int = 10
    population: int = 40
    generations: int = 20
    n_batch: int = 8
    crossover_rate: float = 0.9
    mutation_rate: float = None
    accuracy_constraint: float = 0.65
    macs_constraint: float = 2.7e6
    k: int = 3
    seed: int = 0
    constrained: bool = True
    workers: int = 1
    max_exits: int = mdl.MAX_EXITS
    head_channels: int = mdl.HEAD_CHANNELS
    cv_folds: int = 5
    stop_at_first_admissible: bool = False

    def __post_init__(self):
        problems = []
        if self.n_start < 1:
            problems.append("n_start must be >= 1")
        if self.iterations > 0 and self.n_start < sur.MIN_ARCHIVE:
            problems.append(f"n_start must be >= {sur.MIN_ARCHIVE} to fit surrogates")
        if self.n_batch < 1:
            problems.append("n_batch must be >= 1")
        if self.population < 2:
            problems.append("population must be >= 2")
        if self.iterations < 0 or self.generations < 0:
            problems.append("iterations and generations must be non-negative")
        if not 0 <= self.crossover_rate <= 1:
            problems.append("crossover_rate must lie in [0, 1]")
        if self.mutation_rate is not None and not 0 <= self.mutation_rate <= 1:
            problems.append("mutation_rate must lie in [0, 1]")
        if not 0 < self.accuracy_constraint < 1:
            problems.append("accuracy_constraint must lie in (0, 1)")
        if not self.macs_constraint > 0:
            problems.append("macs_constraint must be positive")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ContractViolation("; ".join(problems))
        dim = len(mdl.GENE_ALPHABETS)
        if self.iterations > 0 and self.n_start < 2 * dim:
            log.warning("n_start=%d is below twice the feature dimension (%d)", self.n_start, 2 * dim)


@dataclass
class Selection:
    entry: arc.ArchiveEntry
    admissible: bool
    knee_rank: int


@dataclass
class SearchState:
    archive: list = field(default_factory=list)
    population: list = field(default_factory=list)
    phi: float = 0.0
    surrogates: tuple = None
    iteration: int = 0
    history: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    first_admissible: float = math.inf

    def keys(self):
        return {e.key for e in self.archive}


@dataclass
class SearchResult:
    selected: list
    state: SearchState
    config: SearchConfig
    elapsed: float


# --------------------------------------------------------------------------
# candidate evaluation (runs in worker processes)
# --------------------------------------------------------------------------


def candidate_seed(global_seed, genome):
    """Training seed derived from the run seed and the genome hash."""
    h = hashlib.sha256(f"{int(global_seed)}:{genome.digest()}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def training_config_for(train_cfg, search_cfg):
    """The trainer settings a candidate sees; the unconstrained mode drops the cost loss."""
    w1, w2, w3 = train_cfg.omega
    return replace(
        train_cfg,
        accuracy_constraint=search_cfg.accuracy_constraint,
        macs_constraint=search_cfg.macs_constraint,
        omega=(w1, w2 if search_cfg.constrained else 0.0, w3),
    )


def evaluate_candidate(genome, splits, train_cfg, search_cfg, iteration=0, artifacts_dir=None):
    """Train, tune and measure one genome; returns its archive entry."""
    seed = candidate_seed(search_cfg.seed, genome)
    cfg = replace(training_config_for(train_cfg, search_cfg), seed=seed)
    with threadpool_limits(1):
        out = trn.train_and_evaluate(genome, splits, cfg, search_cfg.constrained, search_cfg.max_exits, search_cfg.head_channels)
    ev = out.evaluation
    entry = arc.ArchiveEntry(
        genome=genome.chromosome(),
        accuracy=ev.accuracy,
        macs=ev.macs,
        thresholds=ev.thresholds,
        utilization=ev.utilization,
        gamma=ev.gamma,
        seed=seed,
        backbone_accuracy=ev.backbone_accuracy,
        ece=ev.ece,
        epochs=out.epochs,
        iteration=iteration,
    )
    if artifacts_dir:
        save_candidate_artifacts(artifacts_dir, genome, out)
    return entry


def candidate_stem(artifacts_dir, genome):
    return os.path.join(artifacts_dir, f"cand-{genome.digest()[:16]}")


def save_candidate_artifacts(artifacts_dir, genome, outcome):
    """Checkpoint, spec JSON and the cached validation outputs of one candidate."""
    os.makedirs(artifacts_dir, exist_ok=True)
    stem = candidate_stem(artifacts_dir, genome)
    ad.save_checkpoint(outcome.params, stem + ".nchw")
    with open(stem + ".spec.json", "w", encoding="utf-8") as fh:
        fh.write(mdl.spec_to_json(outcome.spec))
    c = outcome.cache
    np.savez(stem + ".cache.npz", logits=c.logits, confs=c.confs, labels=c.labels)


def load_candidate_cache(artifacts_dir, genome):
    path = candidate_stem(artifacts_dir, genome) + ".cache.npz"
    with np.load(path) as z:
        return trn.OutputCache(z["logits"], z["confs"], z["labels"])


_WORKER = {}


def _init_worker(splits, train_cfg, search_cfg, artifacts_dir):
    _WORKER.update(splits=splits, train_cfg=train_cfg, search_cfg=search_cfg, artifacts_dir=artifacts_dir)
    threadpool_limits(1)


def _worker_eval(chromosome, iteration):
    g = mdl.Genome.from_chromosome(chromosome)
    w = _WORKER
    return evaluate_candidate(g, w["splits"], w["train_cfg"], w["search_cfg"], iteration, w["artifacts_dir"])


class CandidateRunner:
    """Evaluates batches of genomes, in-process or on a spawn-based process pool."""

    def __init__(self, splits, train_cfg, search_cfg, artifacts_dir=None):
        self.args = (splits, train_cfg, search_cfg, artifacts_dir)
        self.pool = None
        if search_cfg.workers > 1:
            ctx = mp.get_context("spawn")
            self.pool = cf.ProcessPoolExecutor(search_cfg.workers, mp_context=ctx, initializer=_init_worker, initargs=self.args)

    def run(self, chromosomes, iteration):
        """Returns ``(entries, failures)`` in input order; failures are ``(chromosome, message)``."""
        entries, failures = [], []
        if self.pool is None:
            _init_worker(*self.args)
            results = []
            for c in chromosomes:
                try:
                    results.append(_worker_eval(c, iteration))
                except Exception as exc:  # a failed candidate is logged and skipped
                    results.append(exc)
        else:
            futures = [self.pool.submit(_worker_eval, c, iteration) for c in chromosomes]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:
                    results.append(exc)
        for c, r in zip(chromosomes, results):
            if isinstance(r, Exception):
                log.error("candidate %s failed: %s: %s", mdl.Genome.from_chromosome(c).key(), type(r).__name__, r)
                failures.append((c, f"{type(r).__name__}: {r}"))
            else:
                entries.append(r)
        return entries, failures

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None


# --------------------------------------------------------------------------
# the search loop
# --------------------------------------------------------------------------


def measured_objectives(entries):
    return np.array([[-e.accuracy, e.macs] for e in entries], dtype=np.float64).reshape(-1, 2)


def archive_hypervolume(entries):
    """Hypervolume of measured (-accuracy, MACs) with the worst observed corner as reference."""
    if not entries:
        return 0.0
    pts = measured_objectives(entries)
    return hypervolume_2d(pts, pts.max(axis=0))


def _features(chromosomes):
    return np.array([mdl.feature_vector(mdl.Genome.from_chromosome(c)) for c in chromosomes])


def _surrogate_objectives(state, cfg):
    s_acc, s_macs = state.surrogates

    def objectives(chromosomes):
        X = _features(chromosomes)
        acc = s_acc.predict(X)
        macs = s_macs.predict(X)
        if cfg.constrained:
            state.phi = admissible_ratio(macs, cfg.macs_constraint)
            second = fcm(macs, cfg.macs_constraint, state.phi)
        else:
            second = macs
        return np.column_stack([-acc, second])

    return objectives


def _unique_random(rng, count, exclude):
    out, seen = [], set(exclude)
    attempts = 0
    while len(out) < count:
        g = mdl.random_genome(rng)
        attempts += 1
        if g.key() in seen:
            if attempts > 1000 * count:
                raise ContractViolation("could not draw enough distinct genomes")
            continue
        seen.add(g.key())
        out.append(g.chromosome())
    return out


def _seed_population(state, cfg, rng):
    """Archive genomes ordered by measured rank, topped up with random genomes."""
    entries = state.archive
    pop = []
    if entries:
        objs = measured_objectives(entries)
        if cfg.constrained:
            phi = admissible_ratio(objs[:, 1], cfg.macs_constraint)
            objs[:, 1] = fcm(objs[:, 1], cfg.macs_constraint, phi)
        for i in environmental_selection(objs, min(cfg.population, len(entries))):
            pop.append(entries[i].genome)
    pop += _unique_random(rng, cfg.population - len(pop), {mdl.Genome.from_chromosome(c).key() for c in pop})
    return pop


def _pick_batch(population, objs, cfg, exclude, rng):
    """Unseen genomes from the predicted fronts, most isolated first."""
    picked, seen = [], set(exclude)
    for front in nondominated_sort(objs):
        crowd = crowding_distance(objs[front])
        for t in sorted(range(len(front)), key=lambda t: (-crowd[t], front[t])):
            c = population[front[t]]
            key = mdl.Genome.from_chromosome(c).key()
            if key in seen:
                continue
            seen.add(key)
            picked.append(c)
            if len(picked) == cfg.n_batch:
                return picked
    short = cfg.n_batch - len(picked)
    if short:
        log.info("predicted fronts offered %d unseen genomes; drawing %d at random", len(picked), short)
        picked += _unique_random(rng, short, seen)
    return picked


def _record(state, cfg, iteration, started):
    entries = state.archive
    adm = [e for e in entries if e.admissible(cfg.accuracy_constraint, cfg.macs_constraint)]
    if adm and math.isinf(state.first_admissible):
        state.first_admissible = iteration
    row = {
        "iteration": iteration,
        "archive_size": len(entries),
        "admissible": len(adm),
        "phi_archive": admissible_ratio([e.macs for e in entries], cfg.macs_constraint) if entries else 0.0,
        "phi_population": state.phi,
        "hypervolume": archive_hypervolume(entries),
        "elapsed": time.monotonic() - started,
    }
    if state.surrogates:
        row["surrogates"] = {s.target: {"family": s.family, "cv_tau": s.cv_tau} for s in state.surrogates}
    state.history.append(row)
    log.info(
        "iteration %d: archive %d, admissible %d, hypervolume %.4g",
        iteration, row["archive_size"], row["admissible"], row["hypervolume"],
    )


def select_final(entries, cfg):
    """The ``k`` entries nearest the knee, admissible ones first.

    Unconstrained runs take the knee of all entries.  If fewer than ``k``
    entries are admissible, the least-violating rest fill the selection and
    are flagged inadmissible.
    """
    if not entries:
        return []
    A, M = cfg.accuracy_constraint, cfg.macs_constraint
    flags = [e.admissible(A, M) for e in entries]
    pool = [i for i, f in enumerate(flags) if f] if cfg.constrained else list(range(len(entries)))
    chosen = []
    if pool:
        picks = select_tradeoff(measured_objectives([entries[i] for i in pool]), cfg.k)
        chosen = [pool[p] for p in picks]
    if len(chosen) < cfg.k:
        rest = [i for i in range(len(entries)) if i not in chosen]
        violation = [max(0.0, A - entries[i].accuracy) / A + max(0.0, entries[i].macs - M) / M for i in rest]
        order = sorted(range(len(rest)), key=lambda t: (violation[t], -entries[rest[t]].accuracy, rest[t]))
        chosen += [rest[t] for t in order[: cfg.k - len(chosen)]]
    return [Selection(entries[i], flags[i], r) for r, i in enumerate(chosen)]


def search_loop(cfg, train_cfg, splits, archive_path=None, resume=None, artifacts_dir=None):
    """Run the full search.

    Args:
        cfg: SearchConfig.
        train_cfg: TrainConfig shared by all candidates (constraints are taken from ``cfg``).
        splits: data.Splits.
        archive_path: NDJSON file rewritten after every batch, if given.
        resume: archive entries from an earlier run with the same settings;
            their genomes are not retrained.
        artifacts_dir: directory for per-candidate checkpoints and caches.

    Returns:
        SearchResult with the selected entries and the final state.
    """
    started = time.monotonic()
    rng = np.random.default_rng(cfg.seed)
    state = SearchState()
    known = {e.key: e for e in (resume or [])}
    if known:
        log.info("resuming with %d archived candidates", len(known))
    runner = CandidateRunner(splits, train_cfg, cfg, artifacts_dir)

    def evaluate(chromosomes, iteration):
        todo = [c for c in chromosomes if mdl.Genome.from_chromosome(c).key() not in known]
        fresh, failures = runner.run(todo, iteration) if todo else ([], [])
        for e in fresh:
            known[e.key] = e
        state.failures.extend(failures)
        for c in chromosomes:
            key = mdl.Genome.from_chromosome(c).key()
            if key in known and key not in state.keys():
                state.archive.append(known[key])
        if archive_path:
            arc.persist_archive(state.archive, archive_path)

    try:
        initial = _unique_random(rng, cfg.n_start, set())
        evaluate(initial, 0)
        _record(state, cfg, 0, started)
        for it in range(1, cfg.iterations + 1):
            if cfg.stop_at_first_admissible and not math.isinf(state.first_admissible):
                log.info("stopping after iteration %d: an admissible candidate exists", it - 1)
                break
            state.iteration = it
            if len(state.archive) < sur.MIN_ARCHIVE:
                raise ContractViolation(f"only {len(state.archive)} candidates trained; surrogates need {sur.MIN_ARCHIVE}")
            X = _features([e.genome for e in state.archive])
            acc = np.array([e.accuracy for e in state.archive])
            macs = np.array([e.macs for e in state.archive])
            state.surrogates = sur.fit_and_switch_surrogates(X, acc, macs, cfg.cv_folds, cfg.seed + it)
            objectives = _surrogate_objectives(state, cfg)
            pop = _seed_population(state, cfg, rng)
            objs = None
            for _ in range(cfg.generations):
                pop, objs = nsga2_generation(pop, objectives, rng, cfg.crossover_rate, cfg.mutation_rate, pop_objs=objs)
            if objs is None:
                objs = np.asarray(objectives(pop))
            state.population = pop
            batch = _pick_batch(pop, objs, cfg, state.keys(), rng)
            evaluate(batch, it)
            _record(state, cfg, it, started)
    finally:
        runner.close()
    selected = select_final(state.archive, cfg)
    return SearchResult(selected, state, cfg, time.monotonic() - started)
