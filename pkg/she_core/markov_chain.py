"""
Регенерационная структура пути по единичным кускам, оценки эффективной
диффузии по приращениям и по среднему квадрату смещения, κ₁/κ₂
и вероятности сближения пары путей
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, special

from .errors import StatisticalGuardError, ValidationError
from .estimates import Estimate, ratio_estimate
from .fk_engine import (DEFAULT_DT, ESS_FLOOR, PathBatch, PathSample, WeightedEnsemble,
                        lattice_steps, overlap_R, sample_ensemble, sample_path, tilt,
                        tilted_expectation)
from .parallel import map_blocks
from .random_field import CovarianceR, FieldSpec
from .rng import as_stage

logger = logging.getLogger(__name__)

MODES = ('white', 'colored')
MIN_REGEN_INCREMENTS = 100
MIN_KAPPA_OBSERVATIONS = 1000
HIT_DISTANCE = 1.0
HIT_TIME_WINDOW = 1.0
TRUNCATION_FRACTION = 0.1


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValidationError(f"Неизвестный режим '{mode}', ожидается один из {MODES}")


@dataclass(frozen=True, eq=False)
class ChunkedChain:
    """
    Путь, разрезанный на головной кусок длины T − ⌊T⌋ и единичные куски

    Каждый кусок хранится со сдвигом в ноль; boundaries — моменты
    границ кусков, начиная с 0.
    """

    origin: np.ndarray
    dt: float
    head: float
    chunks: Tuple[np.ndarray, ...]
    boundaries: Tuple[float, ...]

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    @property
    def horizon(self) -> float:
        return self.boundaries[-1]

    def increments(self) -> np.ndarray:
        """Приращения по кускам, форма (n_chunks, d)"""
        return np.stack([chunk[-1] for chunk in self.chunks])

    def reassemble(self) -> np.ndarray:
        """
        Обратная склейка: положения исходного пути на [0, T]
        """
        pieces = [self.origin[None]]
        offset = self.origin
        for chunk in self.chunks:
            pieces.append(offset + chunk[1:])
            offset = offset + chunk[-1]
        return np.concatenate(pieces)


def chunk_path(path: PathSample, horizon: Optional[float] = None) -> ChunkedChain:
    """
    Разбиение прямой части пути на [0, T] на куски

    Args:
        path: путь
        horizon: T (по умолчанию — весь прямой горизонт пути)

    Returns:
        ChunkedChain
    """
    horizon = path.t_max if horizon is None else float(horizon)
    if horizon < 1.0 - 1e-12:
        raise ValidationError(f"Горизонт пути {horizon} меньше единичного куска")
    forward = path.forward
    total = lattice_steps(horizon, path.dt, "Горизонт цепи")
    if total >= forward.shape[0]:
        raise ValidationError(f"Горизонт {horizon} длиннее пути {path.t_max}")
    unit = lattice_steps(1.0, path.dt, "Единичный кусок")
    n_unit = int(np.floor(horizon + 1e-9))
    head_steps = total - n_unit * unit
    head = head_steps * path.dt

    cuts = ([0, head_steps] if head_steps > 0 else [0]) + [head_steps + k * unit for k in range(1, n_unit + 1)]
    chunks = tuple(forward[a:b + 1] - forward[a] for a, b in zip(cuts[:-1], cuts[1:]))
    boundaries = tuple(c * path.dt for c in cuts)
    return ChunkedChain(forward[0].copy(), path.dt, head, chunks, boundaries)


@dataclass(frozen=True, eq=False)
class RegenerationRecord:
    """
    Моменты регенерации σ₀ = 0 < σ₁ < … и приращения между ними
    """

    times: np.ndarray
    increments: np.ndarray
    flags: np.ndarray
    mode: str
    approximate: bool

    @property
    def n_increments(self) -> int:
        return self.increments.shape[0]

    def gaps(self) -> np.ndarray:
        return np.diff(self.times)

    def to_dict(self) -> Dict:
        return {
            'times': [float(t) for t in self.times],
            'n_increments': self.n_increments,
            'mode': self.mode,
            'approximate': self.approximate,
        }


@dataclass(frozen=True, eq=False)
class PairRegenerationRecord:
    """
    Общие регенерации пары: η^{W,W̃} = η^W·η^W̃
    """

    times: np.ndarray
    increments_a: np.ndarray
    increments_b: np.ndarray
    flags_a: np.ndarray
    flags_b: np.ndarray
    flags: np.ndarray
    mode: str
    approximate: bool


def _draw_flags(n_chunks: int, mode: str, rng: np.random.Generator, kappa1: float) -> np.ndarray:
    if mode == 'white':
        return np.ones(n_chunks, dtype=bool)
    if not 0.0 < kappa1 <= 1.0:
        raise ValidationError(f"κ₁ должна лежать в (0, 1], получено {kappa1}")
    return rng.random(n_chunks) < kappa1


def _record_from_flags(chain_positions: np.ndarray, boundaries: Sequence[float], dt: float,
                       flags: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    ends = [0.0] + [boundaries[j + 1] for j in np.flatnonzero(flags)]
    times = np.array(ends)
    index = [int(round(t / dt)) for t in ends]
    return times, [chain_positions[b] - chain_positions[a] for a, b in zip(index[:-1], index[1:])]


def regenerations(chain: ChunkedChain, mode: str, rng: Optional[np.random.Generator] = None,
                  kappa1: float = 0.5) -> RegenerationRecord:
    """
    Регенерации цепи кусков

    В режиме белого шума каждый кусок регенерирует (η ≡ 1, σ_n — границы
    кусков). В цветном режиме η_j — независимые Bernoulli(κ₁), результат
    помечается как приближённый.
    """
    _check_mode(mode)
    if mode == 'colored' and rng is None:
        raise ValidationError("Для цветного режима нужен генератор флагов регенерации")
    flags = _draw_flags(chain.n_chunks, mode, rng, kappa1)
    positions = chain.reassemble()
    times, increments = _record_from_flags(positions, chain.boundaries, chain.dt, flags)
    d = positions.shape[1]
    increments = np.stack(increments) if increments else np.zeros((0, d))
    return RegenerationRecord(times, increments, flags, mode, mode == 'colored')


def pair_regenerations(chain_a: ChunkedChain, chain_b: ChunkedChain, mode: str,
                       rng: Optional[np.random.Generator] = None,
                       kappa1: float = 0.5) -> PairRegenerationRecord:
    """
    Совместные регенерации пары цепей
    """
    _check_mode(mode)
    if chain_a.boundaries != chain_b.boundaries:
        raise ValidationError("Цепи пары должны иметь одинаковые границы кусков")
    if mode == 'colored' and rng is None:
        raise ValidationError("Для цветного режима нужен генератор флагов регенерации")
    flags_a = _draw_flags(chain_a.n_chunks, mode, rng, kappa1)
    flags_b = _draw_flags(chain_b.n_chunks, mode, rng, kappa1)
    flags = flags_a & flags_b
    pos_a, pos_b = chain_a.reassemble(), chain_b.reassemble()
    times, inc_a = _record_from_flags(pos_a, chain_a.boundaries, chain_a.dt, flags)
    _, inc_b = _record_from_flags(pos_b, chain_b.boundaries, chain_b.dt, flags)
    d = pos_a.shape[1]
    inc_a = np.stack(inc_a) if inc_a else np.zeros((0, d))
    inc_b = np.stack(inc_b) if inc_b else np.zeros((0, d))
    return PairRegenerationRecord(times, inc_a, inc_b, flags_a, flags_b, flags, mode, mode == 'colored')


def chain_records(paths: PathBatch, horizon: float, mode: str, streams,
                  kappa1: float = 0.5) -> List[RegenerationRecord]:
    """
    Записи регенераций для каждого пути пачки (поток флагов на путь)
    """
    stage = as_stage(streams, 'regeneration')
    records = []
    for i in range(len(paths)):
        chain = chunk_path(paths.path(i), horizon)
        rng = stage.generator(int(paths.stream_ids[i])) if mode == 'colored' else None
        records.append(regenerations(chain, mode, rng, kappa1))
    return records


def estimate_a_msd(field_spec: FieldSpec, beta: float, lam: float, T: float, n: int,
                   streams, dt: float = DEFAULT_DT, ess_floor: float = ESS_FLOOR,
                   paths: Optional[PathBatch] = None) -> Estimate:
    """
    a ≈ Ê|B_T − B_0|²/(dT) под мерой, наклонённой на [0, T]

    λ на наклон не влияет и передаётся только для протокола.
    """
    if T < 8.0 - 1e-12:
        raise ValidationError(f"Горизонт T={T} слишком мал для оценки по смещению (нужно ≥ 8)")
    stage = as_stage(streams, 'a_msd')
    d = field_spec.dimension
    if paths is None:
        paths = sample_ensemble(n, np.zeros(d), T, 0.0, dt, stage)
    ensemble = tilt(paths, field_spec.covariance, beta, (0.0, T))
    displacement = paths.at(T) - paths.at(0.0)
    values = np.sum(displacement ** 2, axis=1) / (d * T)
    estimate = tilted_expectation(values, ensemble, ess_floor, (stage.describe(),))
    logger.debug(f"a_msd: β={beta}, λ={lam}, T={T}, a={estimate.value:.5g}±{estimate.stderr:.2g}")
    return estimate


@dataclass(frozen=True)
class RegenDiffusivity:
    """
    𝐚 = κ₁·E[𝐖𝐖ᵗ]: след/d со стандартной ошибкой и вся матрица
    """

    estimate: Estimate
    matrix: np.ndarray
    matrix_stderr: np.ndarray
    kappa1: float
    approximate: bool

    def to_dict(self) -> Dict:
        return {
            'estimate': self.estimate.to_dict(),
            'matrix': self.matrix.tolist(),
            'matrix_stderr': self.matrix_stderr.tolist(),
            'kappa1': self.kappa1,
            'approximate': self.approximate,
        }


def estimate_a_regen(records: Sequence[RegenerationRecord],
                     weights: Optional[np.ndarray] = None) -> RegenDiffusivity:
    """
    Оценка 𝐚 по приращениям между регенерациями (n ≥ 1)

    Args:
        records: записи регенераций по цепям
        weights: веса наклона по цепям (по умолчанию равные)

    Returns:
        RegenDiffusivity
    """
    if not records:
        raise StatisticalGuardError("Нет записей регенераций")
    weights = np.ones(len(records)) if weights is None else np.asarray(weights, dtype=float)
    weights = weights / np.max(weights)
    usable = [rec.increments[1:] for rec in records]
    count = sum(inc.shape[0] for inc in usable)
    if count < MIN_REGEN_INCREMENTS:
        raise StatisticalGuardError(
            f"Слишком мало приращений регенерации: {count} < {MIN_REGEN_INCREMENTS}"
        )
    d = next(inc.shape[1] for inc in usable if inc.shape[0])

    flags = np.concatenate([rec.flags for rec in records])
    kappa1 = float(np.mean(flags))
    counts = np.array([inc.shape[0] for inc in usable], dtype=float)
    second = np.stack([inc.T @ inc if inc.shape[0] else np.zeros((d, d)) for inc in usable])

    den = weights * counts
    matrix = np.zeros((d, d))
    matrix_se = np.zeros((d, d))
    for a in range(d):
        for b in range(a, d):
            est, _ = ratio_estimate(weights * second[:, a, b], den)
            matrix[a, b] = matrix[b, a] = kappa1 * est.value
            matrix_se[a, b] = matrix_se[b, a] = kappa1 * est.stderr
    trace_est, _ = ratio_estimate(weights * np.trace(second, axis1=1, axis2=2) / d, den)
    approximate = any(rec.approximate for rec in records)
    return RegenDiffusivity(trace_est.scaled(kappa1), matrix, matrix_se, kappa1, approximate)


@dataclass(frozen=True)
class KappaEstimate:
    kappa1: Estimate
    kappa2: Estimate

    def to_dict(self) -> Dict:
        return {'kappa1': self.kappa1.to_dict(), 'kappa2': self.kappa2.to_dict()}


def estimate_kappa(records: Sequence[RegenerationRecord], k: float = 4.0) -> KappaEstimate:
    """
    κ̂₁ = доля кусков с η = 1, κ̂₂ — доля совместных флагов у пар цепей (2i, 2i+1)
    """
    flags = [np.asarray(rec.flags, dtype=float) for rec in records]
    total = sum(f.size for f in flags)
    if total < MIN_KAPPA_OBSERVATIONS:
        raise StatisticalGuardError(
            f"Недостаточно наблюдений кусков для κ: {total} < {MIN_KAPPA_OBSERVATIONS}"
        )
    kappa1 = Estimate.sample_mean(np.concatenate(flags))
    joint = []
    for first, second in zip(flags[0::2], flags[1::2]):
        m = min(first.size, second.size)
        joint.append(first[:m] * second[:m])
    if not joint:
        raise StatisticalGuardError("Для κ₂ нужны хотя бы две цепи")
    kappa2 = Estimate.sample_mean(np.concatenate(joint))

    gap = abs(kappa2.value - kappa1.value ** 2)
    slack = k * float(np.hypot(kappa2.stderr, 2.0 * kappa1.value * kappa1.stderr))
    if gap > slack:
        raise StatisticalGuardError(
            f"|κ̂₂ − κ̂₁²| = {gap:.4g} превышает {k} стандартные ошибки ({slack:.4g})"
        )
    return KappaEstimate(kappa1, kappa2)


def _hits(pos_a: np.ndarray, pos_b: np.ndarray, first: int, band: int,
          distance: float = HIT_DISTANCE) -> np.ndarray:
    """
    Есть ли r, r̃ ≥ first с |r − r̃| ≤ band шагов и |W_r − W̃_r̃| ≤ distance
    """
    a = pos_a[:, first:]
    b = pos_b[:, first:]
    size = 2 * band + 1
    # нижняя оценка расстояния до «коробки» окна W̃
    lo = ndimage.minimum_filter1d(b, size, axis=1, mode='nearest')
    hi = ndimage.maximum_filter1d(b, size, axis=1, mode='nearest')
    gap = np.clip(lo - a, 0.0, None) + np.clip(a - hi, 0.0, None)
    candidate = np.sum(gap ** 2, axis=2) <= distance ** 2

    hit = np.zeros(a.shape[0], dtype=bool)
    paths_idx, times_idx = np.nonzero(candidate)
    if paths_idx.size == 0:
        return hit
    length = a.shape[1]
    for m in range(-band, band + 1):
        j = times_idx + m
        valid = (j >= 0) & (j < length)
        p, i, jj = paths_idx[valid], times_idx[valid], j[valid]
        close = np.sum((a[p, i] - b[p, jj]) ** 2, axis=1) <= distance ** 2
        hit[p[close]] = True
    return hit


@dataclass(frozen=True)
class HittingResult:
    separation: float
    start_time: float
    estimate: Estimate
    truncation_bound: float

    def to_row(self) -> Dict:
        return {
            'separation': self.separation,
            'start_time': self.start_time,
            'probability': self.estimate.value,
            'stderr': self.estimate.stderr,
            'truncation_bound': self.truncation_bound,
            'n': self.estimate.n,
        }


def truncation_bound(horizon: float, dimension: int, radius: float = HIT_DISTANCE) -> float:
    """
    Верхняя оценка вероятности сблизиться на radius после горизонта:
    ρ^{d−2}·E|W_H|^{−(d−2)} = ρ^{d−2}(4H)^{−(d−2)/2}/Γ(d/2) для разности пары
    """
    k = dimension - 2.0
    return float(radius ** k * (4.0 * horizon) ** (-k / 2.0) / special.gamma(dimension / 2.0))


def pair_hitting_probability(x, x_tilde, s: float, horizon: float, n: int, mode: str,
                             streams, beta: float = 0.0,
                             covariance: Optional[CovarianceR] = None,
                             dt: float = DEFAULT_DT,
                             ess_floor: float = ESS_FLOOR,
                             truncation_fraction: float = TRUNCATION_FRACTION) -> HittingResult:
    """
    Вероятность того, что пара путей сблизится на расстояние ≤ 1 после момента s

    Args:
        x, x_tilde: точки старта пары
        s: момент начала наблюдения
        horizon: длина наблюдения после s
        n: число пар
        mode: 'white' (без наклона) или 'colored' (наклон по ковариации)
        streams: источник случайности
        beta: сила потенциала для наклона
        covariance: ковариация для наклона в цветном режиме
        dt: шаг путей
        truncation_fraction: доля вероятности, которую может занимать хвост усечения

    Returns:
        HittingResult
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    d = x.size
    stage = as_stage(streams, 'hitting')
    total = s + horizon
    first = lattice_steps(s, dt, "Момент начала")
    lattice_steps(total, dt, "Горизонт пары")
    band = int(np.floor(HIT_TIME_WINDOW / dt + 1e-9))
    tilted = mode == 'colored' and beta != 0.0
    if tilted and covariance is None:
        raise ValidationError("Для наклонённой пары нужна ковариация")

    def block(ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pos_a = np.stack([sample_path(x, total, 0.0, dt, stage.child('a').generator(i)).positions for i in ids])
        pos_b = np.stack([sample_path(x_tilde, total, 0.0, dt, stage.child('b').generator(i)).positions for i in ids])
        hits = _hits(pos_a, pos_b, first, band)
        if not tilted:
            return hits, np.zeros(ids.size)
        interval = (0.0, total)
        log_w = 0.5 * beta ** 2 * (overlap_R(interval, interval, pos_a, pos_a, covariance, dt)
                                   + overlap_R(interval, interval, pos_b, pos_b, covariance, dt))
        return hits, log_w

    results = map_blocks(block, n)
    hits = np.concatenate([r[0] for r in results]).astype(float)
    log_w = np.concatenate([r[1] for r in results])

    if tilted:
        ensemble = WeightedEnsemble(None, log_w, (0.0, total), beta, log_w / (0.5 * beta ** 2))
        estimate = tilted_expectation(hits, ensemble, ess_floor, (stage.describe(),))
    else:
        estimate = Estimate.sample_mean(hits, (stage.describe(),))

    separation = float(np.linalg.norm(x - x_tilde))
    bound = truncation_bound(horizon, d)
    if estimate.value > 0 and bound > truncation_fraction * estimate.value:
        logger.warning(
            f"Хвост усечения {bound:.3g} больше {truncation_fraction:.0%} вероятности {estimate.value:.3g} "
            f"(разнесение {separation}, s={s})"
        )
    return HittingResult(separation, float(s), estimate, bound)


def hitting_table(separations: Sequence[float], start_times: Sequence[float], horizon: float,
                  n: int, mode: str, streams, dimension: int = 3, beta: float = 0.0,
                  covariance: Optional[CovarianceR] = None, dt: float = DEFAULT_DT,
                  truncation_fraction: float = TRUNCATION_FRACTION,
                  progress: Optional[Callable[[str, float], None]] = None) -> List[HittingResult]:
    """
    Таблица вероятностей сближения по сетке разнесений и моментов начала

    Для одного момента начала все разнесения используют одни и те же
    приращения путей.
    """
    stage = as_stage(streams, 'hitting')
    rows = []
    cells = len(start_times) * len(separations)
    for s in start_times:
        for r in separations:
            x = np.zeros(dimension)
            x_tilde = np.zeros(dimension)
            x_tilde[0] = r
            rows.append(pair_hitting_probability(x, x_tilde, s, horizon, n, mode,
                                                 stage.child(f"s={s}"), beta, covariance, dt,
                                                 truncation_fraction=truncation_fraction))
            logger.info(f"Сближение: r={r}, s={s}, P={rows[-1].estimate.value:.4g}")
            if progress is not None:
                progress(f"r={r}, s={s}", len(rows) / cells)
    return rows
