"""Orbit construction, U-turn checks and the orbit-selection kernel.

The orbit around an anchor ``(q0, p0)`` is the family of leapfrog iterates
``Phi^{(j)}(q0, p0)``.  :class:`OrbitCache` extends it lazily one step at a
time from the current extremes and stores, per index, the state, its velocity
``M^{-1} p`` (the quantity entering U-turn inner products under a non-identity
mass matrix), and the log-weight ``-H``.

A doubling record ``v`` of length K generates the interval
``{-T_minus(v), ..., v}``.  The U-turn set at stage K checks, for every block
size ``2^k`` with ``k in [1, K-1]``, the endpoints of every aligned block of
that size; the stage-1 check set is empty (the first doubling is always
accepted).  The stopping time ``S(v)`` is the first stage whose record lies in
the corresponding U-turn set.

The resulting orbit-selection law is purely combinatorial: conditionally on
the U-turn geometry, each final interval receives a dyadic rational mass, so
:func:`orbit_select_pmf` enumerates it exactly with ``Fraction`` arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .binwords import BinWord, IndexInterval, interval, low_trunc, t_minus
from .leapfrog import LeapfrogParams, leapfrog_step_with_grad
from .targets import MassMatrix, PhasePoint, Target, flip


class CacheCoverageError(RuntimeError):
    """An operation needed orbit indices the cache has not computed."""


class _Entry(NamedTuple):
    q: np.ndarray
    p: np.ndarray
    vel: np.ndarray  # M^{-1} p
    logw: float
    diverged: bool


def _make_entry(target: Target, mass: MassMatrix, x: PhasePoint) -> _Entry:
    # scalar finiteness probe: any nan/inf in (q, p) poisons the dot products
    with np.errstate(over="ignore", invalid="ignore"):
        norms = float(x.q @ x.q) + float(x.p @ x.p)
    if not math.isfinite(norms):
        return _Entry(x.q, x.p, x.p, -math.inf, True)
    vel = mass.inv_mul(x.p)
    logw = -float(target.potential(x.q)) - 0.5 * float(x.p @ vel)
    if not math.isfinite(logw):
        return _Entry(x.q, x.p, vel, -math.inf, True)
    return _Entry(x.q, x.p, vel, logw, False)


class OrbitCache:
    """Lazily extended table ``j -> (Phi^{(j)}(anchor), -H)``.

    Entries are appended one leapfrog step at a time from the current extremes
    (never recomputed from index 0), with the gradient at each extreme cached
    so a fresh step costs exactly one gradient evaluation.  Once a divergence
    occurs on one side, all further entries on that side are flagged diverged
    without stepping.  Mutable; confine to a single chain.
    """

    def __init__(self, target: Target, params: LeapfrogParams, anchor: PhasePoint):
        self.target = target
        self.params = params
        self.mass = params.mass
        q0 = np.asarray(anchor.q, dtype=float)
        p0 = np.asarray(anchor.p, dtype=float)
        self._anchor = _make_entry(target, self.mass, PhasePoint(q0, p0))
        self._right: list[_Entry] = []  # indices 1, 2, ...
        self._left: list[_Entry] = []  # indices -1, -2, ...
        grad0 = target.gradient(q0)
        self._grad_hi = grad0
        self._grad_lo = grad0
        self.n_grad = 1
        self._pair_memo: dict[tuple[int, int], bool] = {}

    @property
    def lo(self) -> int:
        return -len(self._left)

    @property
    def hi(self) -> int:
        return len(self._right)

    def _entry(self, j: int) -> _Entry:
        if j == 0:
            return self._anchor
        if j > 0:
            if j > len(self._right):
                raise CacheCoverageError(f"index {j} beyond cached range [{self.lo}, {self.hi}]")
            return self._right[j - 1]
        if -j > len(self._left):
            raise CacheCoverageError(f"index {j} beyond cached range [{self.lo}, {self.hi}]")
        return self._left[-j - 1]

    def state(self, j: int) -> PhasePoint:
        e = self._entry(j)
        return PhasePoint(e.q, e.p)

    def logw(self, j: int) -> float:
        return self._entry(j).logw

    def diverged(self, j: int) -> bool:
        return self._entry(j).diverged

    def logw_range(self, lo: int, hi: int) -> np.ndarray:
        return np.array([self.logw(j) for j in range(lo, hi + 1)])

    def any_diverged(self, lo: int, hi: int) -> bool:
        return any(self._entry(j).diverged for j in range(lo, hi + 1))

    def extend_right(self, n: int = 1) -> None:
        for _ in range(n):
            top = self._right[-1] if self._right else self._anchor
            if top.diverged:
                self._right.append(top)
                continue
            x1, grad1 = leapfrog_step_with_grad(
                self.target, self.params, PhasePoint(top.q, top.p), self._grad_hi
            )
            self.n_grad += 1
            self._grad_hi = grad1
            self._right.append(_make_entry(self.target, self.mass, x1))

    def extend_left(self, n: int = 1) -> None:
        # Phi^{(-1)} = flip . Phi^{(1)} . flip; the cached gradient at the
        # current leftmost position is valid for the flipped forward step.
        for _ in range(n):
            bot = self._left[-1] if self._left else self._anchor
            if bot.diverged:
                self._left.append(bot)
                continue
            x1, grad1 = leapfrog_step_with_grad(
                self.target, self.params, PhasePoint(bot.q, -bot.p), self._grad_lo
            )
            self.n_grad += 1
            self._grad_lo = grad1
            self._left.append(_make_entry(self.target, self.mass, flip(x1)))

    def extend_to(self, lo: int, hi: int) -> None:
        if hi > self.hi:
            self.extend_right(hi - self.hi)
        if lo < self.lo:
            self.extend_left(self.lo - lo)

    def pair_uturn(self, i_lo: int, i_hi: int) -> bool:
        """U-turn indicator for the (left, right) index pair, memoized."""
        key = (i_lo, i_hi)
        hit = self._pair_memo.get(key)
        if hit is not None:
            return hit
        left, right = self._entry(i_lo), self._entry(i_hi)
        if left.diverged or right.diverged:
            self._pair_memo[key] = True
            return True
        dq = right.q - left.q
        res = bool(float(right.vel @ dq) < 0.0 or float(left.vel @ dq) < 0.0)
        self._pair_memo[key] = res
        return res


def uturn_pair(left: PhasePoint, right: PhasePoint, mass: MassMatrix | None = None) -> bool:
    """True iff the pair exhibits a U-turn.

    The criterion is ``v_r . (q_r - q_l) < 0`` or ``v_l . (q_r - q_l) < 0``
    with velocity ``v = M^{-1} p`` (the whitened-coordinate form of the
    identity-mass criterion).  Both inequalities are strict, so a zero
    displacement is not a U-turn.
    """
    if left.q.shape != right.q.shape:
        raise ValueError("phase points have mismatched dimensions")
    dq = right.q - left.q
    vr = right.p if mass is None or mass.is_identity else mass.inv_mul(right.p)
    vl = left.p if mass is None or mass.is_identity else mass.inv_mul(left.p)
    return bool(float(vr @ dq) < 0.0 or float(vl @ dq) < 0.0)


def no_uturns(v: BinWord, cache: OrbitCache) -> bool:
    """Whether the record ``v`` avoids every stage-K U-turn check.

    Checks the endpoint pair of every aligned block of size ``2^k`` inside the
    generated interval, for ``k in [1, K-1]``; for K = 1 the check set is
    empty and the result is True.  Any divergence inside the interval counts
    as a U-turn (the sampler then stops and keeps the previous interval).
    """
    k_len = v.k
    if k_len < 1:
        raise ValueError("no_uturns requires a nonempty record")
    lo = -t_minus(v)
    hi = v.value
    if lo < cache.lo or hi > cache.hi:
        raise CacheCoverageError(f"cache [{cache.lo}, {cache.hi}] does not cover [{lo}, {hi}]")
    if cache.any_diverged(lo, hi):
        return False
    for k in range(1, k_len):
        size = 1 << k
        for block in range(1 << (k_len - k)):
            if cache.pair_uturn(lo + block * size, lo + (block + 1) * size - 1):
                return False
    return True


def stopping_time(v: BinWord, cache: OrbitCache) -> float:
    """First stage ``k`` whose prefix record lies in the U-turn set, else inf."""
    for k in range(1, v.k + 1):
        if not no_uturns(low_trunc(v, k), cache):
            return k
    return math.inf


@dataclass(frozen=True)
class OrbitSelection:
    """Outcome of the doubling loop: final interval, depth, record, stop stage."""

    i_f: IndexInterval
    k_f: int
    v: BinWord
    s_f: float  # stage of the first U-turn, inf if none occurred

    def __post_init__(self) -> None:
        assert self.k_f == min(self.s_f - 1, self.v.k) or math.isinf(self.s_f)


def orbit_select_sample(cache: OrbitCache, k_m: int, rng: np.random.Generator) -> OrbitSelection:
    """Run the doubling loop: draw directions, extend, stop at the first U-turn.

    A divergence encountered while extending at stage k+1 is treated as a
    U-turn at that stage, so the sampler is total even on targets that blow
    up.  Deterministic given the generator state.
    """
    bits = 0
    k_f = 0
    s_f: float = math.inf
    for k in range(k_m):
        v_k = 1 if rng.random() < 0.5 else 0
        if v_k:
            cache.extend_right(1 << k)
        else:
            cache.extend_left(1 << k)
        bits |= v_k << k
        if not no_uturns(BinWord(k + 1, bits), cache):
            s_f = k + 1
            break
        k_f = k + 1
    word = low_trunc(BinWord(k_m, bits), k_f) if k_f else BinWord(0, 0)
    i_f = interval(word) if k_f else IndexInterval(0, 0)
    return OrbitSelection(i_f=i_f, k_f=k_f, v=word, s_f=s_f)


def orbit_select_pmf(cache: OrbitCache, k_m: int) -> list[tuple[IndexInterval, Fraction]]:
    """Exact law of the final interval, by enumeration of all 2^K_m records.

    Returns ``(interval, probability)`` pairs with exact dyadic probabilities
    summing to 1; sorted by interval.  Requires cache coverage of
    ``[-2^K_m + 1, 2^K_m - 1]`` (extends on demand).
    """
    cache.extend_to(-(1 << k_m) + 1, (1 << k_m) - 1)
    unit = Fraction(1, 1 << k_m)
    masses: dict[tuple[int, int], Fraction] = {}
    prefix_ok: dict[tuple[int, int], bool] = {}

    def prefix_no_uturn(k: int, prefix: int) -> bool:
        key = (k, prefix)
        hit = prefix_ok.get(key)
        if hit is None:
            hit = no_uturns(BinWord(k, prefix), cache)
            prefix_ok[key] = hit
        return hit

    for word in range(1 << k_m):
        k_f = k_m
        for k in range(1, k_m + 1):
            if not prefix_no_uturn(k, word & ((1 << k) - 1)):
                k_f = k - 1
                break
        if k_f == 0:
            key = (0, 0)
        else:
            w = BinWord(k_f, word & ((1 << k_f) - 1))
            iv = interval(w)
            key = (iv.lo, iv.hi)
        masses[key] = masses.get(key, Fraction(0)) + unit

    assert sum(masses.values()) == 1
    out = []
    for (lo, hi), mass in sorted(masses.items()):
        out.append((IndexInterval(lo, hi), mass))
    return out
