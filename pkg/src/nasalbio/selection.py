"""Descriptor selection: nucleus-mask expansion, R1 fitness and a modified NSGA-II."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .matching import (KFAError, fisher_from_kernel, kfa_fit, kfa_project,
                       mahalanobis_cosine, poly_kernel, rank_metrics, shrink_covariance)

log = logging.getLogger(__name__)


def expand_mask(Bn, s_n: int, h_l: int, K: int) -> np.ndarray:
    """Replicate each descriptor bit over its bins, components and scales."""
    Bn = np.asarray(Bn, dtype=bool)
    if Bn.shape != (K,):
        raise ValueError(f"nucleus mask has length {Bn.size}, expected K={K}")
    return np.broadcast_to(Bn[None, None, :, None], (s_n, 3, K, h_l)).ravel().copy()


def descriptor_columns(i: int, s_n: int, h_l: int, K: int) -> np.ndarray:
    """Feature-vector indices belonging to descriptor ``i``."""
    s, c, b = np.meshgrid(np.arange(s_n), np.arange(3), np.arange(h_l), indexing="ij")
    return np.sort((((s * 3 + c) * K + i) * h_l + b).ravel())


@dataclass(frozen=True)
class KFAParams:
    k1: float = 0.0
    k2: float = 2.65
    d_p: int | None = None
    ridge: float = 1e-6
    shrinkage: float = 0.05


def masked_r1(Bn, gallery, probes, gallery_labels, probe_labels, layout, params=KFAParams()) -> float:
    """R1 of the full matching chain on the selected descriptors (direct form)."""
    s_n, K, h_l = layout
    Bn = np.asarray(Bn, dtype=bool)
    if not Bn.any():
        return 0.0
    keep = expand_mask(Bn, s_n, h_l, K)
    Xg, Xp = np.asarray(gallery)[:, keep], np.asarray(probes)[:, keep]
    model = kfa_fit(Xg, gallery_labels, params.k1, params.k2, params.d_p, params.ridge, params.shrinkage)
    scores = mahalanobis_cosine(model.projected, kfa_project(model, Xp), model.Sigma,
                                gallery_labels, probe_labels)
    return rank_metrics(scores).r1


class FitnessContext:
    """R1 of a nucleus mask, computed from cached per-descriptor Gram blocks.

    The linear Gram matrix of any selection is the sum of its descriptors'
    blocks, so a fitness call only costs the kernel Fisher solve and scoring.
    """

    def __init__(self, gallery, probes, gallery_labels, probe_labels, layout, params=KFAParams()):
        self.s_n, self.K, self.h_l = layout
        Xg = np.asarray(gallery, dtype=float)
        Xp = np.asarray(probes, dtype=float)
        width = self.s_n * 3 * self.K * self.h_l
        if Xg.shape[1] != width or Xp.shape[1] != width:
            raise ValueError("feature width does not match the (s_n, K, h_l) layout")
        self.gl = np.asarray(gallery_labels)
        self.pl = np.asarray(probe_labels)
        self.params = params
        g = Xg.reshape(len(Xg), self.s_n, 3, self.K, self.h_l)
        p = Xp.reshape(len(Xp), self.s_n, 3, self.K, self.h_l)
        self.G_gg = self._blocks(g, g)
        self.G_pg = self._blocks(p, g)

    def _blocks(self, a, b) -> np.ndarray:
        return np.einsum("isckb,jsckb->kij", a, b, optimize=True)

    def r1(self, Bn) -> float:
        Bn = np.asarray(Bn, dtype=bool)
        if not Bn.any():
            return 0.0
        p = self.params
        Kgg = poly_kernel(self.G_gg[Bn].sum(axis=0), p.k1, p.k2)
        Kpg = poly_kernel(self.G_pg[Bn].sum(axis=0), p.k1, p.k2)
        try:
            fisher = fisher_from_kernel(Kgg, self.gl, p.d_p, p.ridge)
        except KFAError:
            return 0.0
        Pg = fisher.project(Kgg)
        Pp = fisher.project(Kpg)
        scores = mahalanobis_cosine(Pg, Pp, shrink_covariance(Pg, p.shrinkage), self.gl, self.pl)
        return rank_metrics(scores).r1


@dataclass(frozen=True)
class GAConfig:
    population_multiplier: int = 15
    pareto_fraction: float = 0.35
    crossover_fraction: float = 0.8
    migration_fraction: float = 0.2
    migration_interval: int = 20
    stall_tolerance: float = 1e-4
    stall_generations: int = 50
    max_generations: int = 300
    max_evaluations: int = 70000
    mutation_rate: float | None = None
    crowding: str = "objective"
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("pareto_fraction", "crossover_fraction", "migration_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.crowding not in ("objective", "genotype"):
            raise ValueError("crowding must be 'objective' or 'genotype'")
        if self.population_multiplier < 1:
            raise ValueError("population multiplier must be >= 1")


def nondominated_ranks(F: np.ndarray) -> np.ndarray:
    """Front index (0 = best) for minimisation objectives, shape (n, m)."""
    n = len(F)
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    dominates = le & lt
    count = dominates.sum(axis=0)
    ranks = np.full(n, -1)
    front = np.flatnonzero(count == 0)
    r = 0
    while len(front):
        ranks[front] = r
        count = count - dominates[front].sum(axis=0)
        count[ranks >= 0] = -1
        front = np.flatnonzero(count == 0)
        r += 1
    return ranks


def crowding_distance(F: np.ndarray) -> np.ndarray:
    n, m = F.shape
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for j in range(m):
        order = np.argsort(F[:, j], kind="stable")
        span = F[order[-1], j] - F[order[0], j]
        d[order[0]] = d[order[-1]] = np.inf
        if span > 0:
            d[order[1:-1]] += (F[order[2:], j] - F[order[:-2], j]) / span
    return d


def genotype_crowding(pop: np.ndarray) -> np.ndarray:
    """Mean Hamming distance of each member to the others."""
    if len(pop) < 2:
        return np.full(len(pop), np.inf)
    p = pop.astype(np.int16)
    ham = (p[:, None, :] != p[None, :, :]).sum(axis=2)
    return ham.sum(axis=1) / (len(pop) - 1)


@dataclass
class GAResult:
    Bn: np.ndarray
    r1: float
    history: list = field(default_factory=list)     # (generation, bestR1, meanR1, bestCardinality)
    evaluations: int = 0
    generations: int = 0
    stop_reason: str = ""
    pareto: np.ndarray | None = None


class NSGA2Selector:
    """Bit-string NSGA-II maximising R1 and minimising the number of descriptors.

    Beyond the usual rank/crowding survival, each generation keeps the
    best-R1 member and the member with the largest mean Hamming distance to
    the pool, and periodically swaps the worst members for random immigrants.
    """

    def __init__(self, config: GAConfig, fitness: Callable[[np.ndarray], float], K: int):
        if K < 2:
            raise ValueError("selection needs K >= 2 descriptors")
        self.cfg = config
        self.fitness = fitness
        self.K = K
        self.N = config.population_multiplier * K
        self.rng = np.random.default_rng(config.rng_seed)
        self.mutation = config.mutation_rate if config.mutation_rate is not None else 1.0 / K
        self.cache: dict[bytes, float] = {}

    @property
    def evaluations(self) -> int:
        return len(self.cache)

    def _fitness(self, ind: np.ndarray) -> float:
        key = np.packbits(ind).tobytes()
        if key not in self.cache:
            self.cache[key] = float(self.fitness(ind))
        return self.cache[key]

    def _objectives(self, pop: np.ndarray) -> np.ndarray:
        r1 = np.array([self._fitness(ind) for ind in pop])
        return np.column_stack([-r1, pop.sum(axis=1)])

    def _crowd(self, pop, F, idx):
        if self.cfg.crowding == "genotype":
            return genotype_crowding(pop[idx])
        return crowding_distance(F[idx])

    def _rank_and_crowd(self, pop, F):
        ranks = nondominated_ranks(F)
        crowd = np.zeros(len(pop))
        for r in np.unique(ranks):
            idx = np.flatnonzero(ranks == r)
            crowd[idx] = self._crowd(pop, F, idx)
        return ranks, crowd

    def _tournament(self, ranks, crowd, n):
        a = self.rng.integers(0, len(ranks), n)
        b = self.rng.integers(0, len(ranks), n)
        better_a = (ranks[a] < ranks[b]) | ((ranks[a] == ranks[b]) & (crowd[a] >= crowd[b]))
        return np.where(better_a, a, b)

    def _offspring(self, pop, ranks, crowd, n):
        n_cross = int(round(self.cfg.crossover_fraction * n))
        p1 = pop[self._tournament(ranks, crowd, n)]
        p2 = pop[self._tournament(ranks, crowd, n)]
        take = self.rng.random((n, self.K)) < 0.5
        children = p1.copy()
        children[:n_cross] = np.where(take[:n_cross], p1[:n_cross], p2[:n_cross])
        flip = self.rng.random((n, self.K)) < self.mutation
        # mutation-only children must differ from their parent
        for i in np.flatnonzero(~flip[n_cross:].any(axis=1)) + n_cross:
            flip[i, self.rng.integers(0, self.K)] = True
        return children ^ flip

    def _survivors(self, pool, F):
        ranks, crowd = self._rank_and_crowd(pool, F)
        N = self.N
        r1 = -F[:, 0]
        best = int(np.lexsort((F[:, 1], -r1))[0])
        diverse = int(np.argmax(genotype_crowding(pool)))
        chosen = [best] if best == diverse else [best, diverse]
        taken = np.zeros(len(pool), dtype=bool)
        taken[chosen] = True
        front0 = np.flatnonzero((ranks == 0) & ~taken)
        cap = max(1, int(np.floor(self.cfg.pareto_fraction * N)))
        front0 = front0[np.argsort(-crowd[front0], kind="stable")][:max(0, cap - len(chosen))]
        chosen.extend(front0.tolist())
        taken[front0] = True
        rest = np.flatnonzero(~taken)
        rest = rest[np.lexsort((-crowd[rest], ranks[rest]))]
        chosen.extend(rest[:N - len(chosen)].tolist())
        idx = np.array(chosen[:N])
        return pool[idx], F[idx], best

    def run(self) -> GAResult:
        cfg = self.cfg
        pop = self.rng.random((self.N, self.K)) < 0.5
        F = self._objectives(pop)
        history = []
        best_curve = []
        stop = "max_generations"
        gen = 0
        for gen in range(1, cfg.max_generations + 1):
            ranks, crowd = self._rank_and_crowd(pop, F)
            children = self._offspring(pop, ranks, crowd, self.N)
            Fc = self._objectives(children)
            pool = np.vstack([pop, children])
            pop, F, _ = self._survivors(pool, np.vstack([F, Fc]))
            if cfg.migration_fraction > 0 and gen % cfg.migration_interval == 0:
                pop, F = self._migrate(pop, F)
            r1 = -F[:, 0]
            b = int(np.lexsort((F[:, 1], -r1))[0])
            history.append((gen, float(r1[b]), float(r1.mean()), int(F[b, 1])))
            best_curve.append(float(r1[b]))
            if (len(best_curve) > cfg.stall_generations
                    and best_curve[-1] - best_curve[-1 - cfg.stall_generations] < cfg.stall_tolerance):
                stop = "stall"
                break
            if self.evaluations >= cfg.max_evaluations:
                stop = "max_evaluations"
                break
        r1 = -F[:, 0]
        ranks = nondominated_ranks(F)
        b = int(np.lexsort((F[:, 1], -r1))[0])
        return GAResult(pop[b].copy(), float(r1[b]), history, self.evaluations, gen, stop,
                        np.unique(pop[ranks == 0], axis=0))

    def _migrate(self, pop, F):
        n = int(np.floor(self.cfg.migration_fraction * len(pop)))
        if n == 0:
            return pop, F
        ranks, crowd = self._rank_and_crowd(pop, F)
        r1 = -F[:, 0]
        protected = {int(np.lexsort((F[:, 1], -r1))[0]), int(np.argmax(genotype_crowding(pop)))}
        order = np.lexsort((crowd, -ranks))
        worst = [i for i in order if i not in protected][:n]
        immigrants = self.rng.random((len(worst), self.K)) < 0.5
        pop = pop.copy()
        F = F.copy()
        pop[worst] = immigrants
        F[worst] = self._objectives(immigrants)
        return pop, F


def nsga2_select(config: GAConfig, context: FitnessContext) -> GAResult:
    """Run the selector on a fitness context; returns the best-R1 mask and history."""
    return NSGA2Selector(config, context.r1, context.K).run()
