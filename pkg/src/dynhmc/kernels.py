"""Assembled Markov kernels: NUTS (iterative and recursive), HMC, MALA, rHMC.

All kernels share the same anatomy: refresh the momentum from ``N(0, M)``,
pick a set of leapfrog indices around the current point, pick one index from
that set so the induced weights ``exp(-H)`` stay invariant, and return the
position there (the momentum is discarded).  The NUTS kernels instantiate
orbit selection with the doubling/U-turn rule and index selection with biased
progressive sampling; HMC is the degenerate instance whose orbit is ``{0, T}``
and whose index selection is the Metropolis coin.

Per NUTS step the randomness stream is fixed: ``d`` normals for the momentum,
then per doubling level exactly one direction uniform, one multinomial
uniform and one swap uniform, whether or not the level is accepted.  This
makes every run reproducible from ``(seed, config)`` independent of internal
control flow.

``nuts_exact_pmf`` computes the one-step law at a fixed phase point exactly
(dyadic orbit probabilities times closed-form index rows); it is the oracle
against which both samplers are tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .binwords import BinWord, interval
from .index_select import (
    WeightTree,
    accept_log_ratio,
    logsumexp,
    multinomial_pick,
)
from .leapfrog import LeapfrogParams, leapfrog_iter, leapfrog_step_with_grad
from .orbit import OrbitCache, no_uturns, orbit_select_pmf
from .targets import MassMatrix, PhasePoint, Target, hamiltonian, momentum_refresh

KERNEL_KINDS = ("nuts_iterative", "nuts_recursive", "hmc", "rhmc")

# verification hook: "always-swap" skips the progressive swap coin, a
# deliberately broken kernel used as a negative control by the checks
MUTATIONS = (None, "always-swap")


@dataclass(frozen=True)
class KernelConfig:
    kind: str
    h: float
    mass: MassMatrix
    k_m: int = 10
    t: int = 1
    weights: np.ndarray | None = None  # rHMC mixture over T = 1 .. len(weights)

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"step size must be positive and finite, got {self.h}")
        if not 1 <= self.k_m <= 20:
            raise ValueError(f"k_m = {self.k_m} outside [1, 20]")
        if self.t < 1:
            raise ValueError(f"t = {self.t} must be >= 1")
        if self.kind == "rhmc":
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or w.size < 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("rhmc weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def params(self) -> LeapfrogParams:
        return LeapfrogParams(self.h, self.mass)


@dataclass(frozen=True)
class TransitionInfo:
    """Per-transition diagnostics.  Carries no momentum state by design.

    ``i_f`` holds the boundary indices of the selected set: the full
    contiguous interval for NUTS, the two-point set ``{0, T}`` for HMC.
    """

    j_f: int
    i_f: tuple[int, int]
    k_f: int
    n_grad: int
    diverged: bool
    accepted: bool | None = None  # HMC only
    t: int | None = None  # HMC/rHMC number of leapfrog steps
    peak_states: int | None = None  # recursive sampler instrumentation


@dataclass(frozen=True)
class ExactPMF:
    """Exact one-step transition law at a fixed phase point."""

    anchor: PhasePoint
    entries: list  # (j, probability, position) sorted by j

    def prob(self, j: int) -> float:
        for jj, pr, _ in self.entries:
            if jj == j:
                return pr
        return 0.0

    def probs_dict(self) -> dict[int, float]:
        return {j: pr for j, pr, _ in self.entries}

    def total(self) -> float:
        return float(sum(pr for _, pr, _ in self.entries))

    def support(self) -> list[int]:
        return [j for j, pr, _ in self.entries if pr > 0]


def _origin_interval() -> tuple[int, int]:
    return (0, 0)


def nuts_step_iterative(
    target: Target,
    cfg: KernelConfig,
    q: np.ndarray,
    rng: np.random.Generator,
    mutate: str | None = None,
) -> tuple[np.ndarray, TransitionInfo]:
    """One NUTS transition via the explicit doubling loop.

    The index update runs interleaved with the doubling and only when the
    extended interval passes the U-turn checks, so a rejected final doubling
    never contributes to the selection.
    """
    p = momentum_refresh(cfg.mass, rng)
    x0 = PhasePoint(np.asarray(q, dtype=float), p)
    q_new, info = nuts_transition_iterative(target, cfg, x0, rng, mutate=mutate)
    return q_new, info


def nuts_transition_iterative(
    target: Target,
    cfg: KernelConfig,
    x0: PhasePoint,
    rng: np.random.Generator,
    mutate: str | None = None,
) -> tuple[np.ndarray, TransitionInfo]:
    """The doubling loop at a fixed phase point (momentum already drawn)."""
    if mutate not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutate!r}")
    cache = OrbitCache(target, cfg.params, x0)
    if cache.diverged(0):
        return x0.q, TransitionInfo(0, _origin_interval(), 0, cache.n_grad, True)

    j = 0
    logw_tot = cache.logw(0)
    bits = 0
    k_f = 0
    diverged = False
    for k in range(cfg.k_m):
        u_dir = rng.random()
        u_mult = rng.random()
        u_swap = rng.random()
        v_k = 1 if u_dir < 0.5 else 0
        step = 1 << k
        if v_k:
            seg = (cache.hi + 1, cache.hi + step)
            cache.extend_right(step)
        else:
            seg = (cache.lo - step, cache.lo - 1)
            cache.extend_left(step)
        bits |= v_k << k
        if cache.any_diverged(*seg):
            diverged = True
            break
        if not no_uturns(BinWord(k + 1, bits), cache):
            break
        seg_logw = cache.logw_range(*seg)
        pick = seg[0] + multinomial_pick(seg_logw, u_mult)
        logw_new = logsumexp(seg_logw)
        log_r = accept_log_ratio(logw_new, logw_tot)
        if mutate == "always-swap":
            if logw_new > -math.inf:
                j = pick
        elif log_r > -math.inf and u_swap < math.exp(log_r):
            j = pick
        logw_tot = np.logaddexp(logw_tot, logw_new)
        k_f = k + 1

    if k_f:
        iv = interval(BinWord(k_f, bits & ((1 << k_f) - 1)))
        i_f = (iv.lo, iv.hi)
    else:
        i_f = _origin_interval()
    return cache.state(j).q, TransitionInfo(
        j_f=j, i_f=i_f, k_f=k_f, n_grad=cache.n_grad, diverged=diverged
    )


# --- recursive (depth-first) implementation ---------------------------------


class _RecState:
    """A single phase-space state held by the recursive builder."""

    __slots__ = ("q", "p", "vel", "logw", "grad", "idx", "diverged")

    def __init__(self, q, p, vel, logw, grad, idx, diverged):
        self.q, self.p, self.vel = q, p, vel
        self.logw, self.grad = logw, grad
        self.idx, self.diverged = idx, diverged


class _LiveCounter:
    """Tracks how many distinct states the recursion retains at once."""

    def __init__(self) -> None:
        self._ids: set[int] = set()
        self.peak = 0

    def note(self, *states: _RecState) -> None:
        for st in states:
            self._ids.add(id(st))
        self.peak = max(self.peak, len(self._ids))

    def retain_only(self, keep: tuple[_RecState, ...], drop: tuple[_RecState, ...]) -> None:
        keep_ids = {id(st) for st in keep}
        for st in drop:
            if id(st) not in keep_ids:
                self._ids.discard(id(st))


class _GradCounter:
    __slots__ = ("n",)

    def __init__(self) -> None:
        self.n = 0


def _rec_anchor(target: Target, mass: MassMatrix, q: np.ndarray, p: np.ndarray, gc: _GradCounter):
    logw = -hamiltonian(target, mass, PhasePoint(q, p))
    grad = target.gradient(q)
    gc.n += 1
    diverged = not math.isfinite(logw)
    return _RecState(q, p, mass.inv_mul(p), logw, grad, 0, diverged)


def _rec_step(
    target: Target, cfg: KernelConfig, frm: _RecState, direction: int, gc: _GradCounter
) -> _RecState:
    # one leapfrog step away from the anchor; backward steps go through the
    # momentum-flip identity so the cached gradient stays valid
    mass = cfg.mass
    if direction > 0:
        x1, grad1 = leapfrog_step_with_grad(
            target, cfg.params, PhasePoint(frm.q, frm.p), frm.grad
        )
        q1, p1 = x1
    else:
        x1, grad1 = leapfrog_step_with_grad(
            target, cfg.params, PhasePoint(frm.q, -frm.p), frm.grad
        )
        q1, p1 = x1.q, -x1.p
    gc.n += 1
    idx = frm.idx + direction
    if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(p1))):
        return _RecState(q1, p1, p1, -math.inf, grad1, idx, True)
    logw = -hamiltonian(target, mass, PhasePoint(q1, p1))
    return _RecState(q1, p1, mass.inv_mul(p1), logw, grad1, idx, not math.isfinite(logw))


def _states_uturn(left: _RecState, right: _RecState) -> bool:
    if left.diverged or right.diverged:
        return True
    dq = right.q - left.q
    return bool(float(right.vel @ dq) < 0.0 or float(left.vel @ dq) < 0.0)


class _RecTree:
    __slots__ = ("lo", "hi", "end", "sel", "logw", "stop", "diverged")

    def __init__(self, lo, hi, end, sel, logw, stop, diverged):
        self.lo, self.hi, self.end, self.sel = lo, hi, end, sel
        self.logw, self.stop, self.diverged = logw, stop, diverged


def _build_tree(
    target: Target,
    cfg: KernelConfig,
    frm: _RecState,
    direction: int,
    depth: int,
    rng: np.random.Generator,
    gc: _GradCounter,
    counter: _LiveCounter | None,
) -> _RecTree:
    if depth == 0:
        st = _rec_step(target, cfg, frm, direction, gc)
        if counter is not None:
            counter.note(st)
        return _RecTree(st, st, st, st, st.logw, st.diverged, st.diverged)
    t1 = _build_tree(target, cfg, frm, direction, depth - 1, rng, gc, counter)
    if t1.stop:
        return t1
    t2 = _build_tree(target, cfg, t1.end, direction, depth - 1, rng, gc, counter)
    if direction > 0:
        lo, hi = t1.lo, t2.hi
    else:
        lo, hi = t2.lo, t1.hi
    logw = float(np.logaddexp(t1.logw, t2.logw))
    # progressive merge: take the new half's candidate with prob w2/(w1+w2)
    u = rng.random()
    if logw > -math.inf and u < math.exp(t2.logw - logw):
        sel = t2.sel
    else:
        sel = t1.sel
    stop = t2.stop or _states_uturn(lo, hi)
    node = _RecTree(lo, hi, t2.end, sel, logw, stop, t1.diverged or t2.diverged)
    if counter is not None:
        keep = (node.lo, node.hi, node.end, node.sel)
        drop = (t1.lo, t1.hi, t1.end, t1.sel, t2.lo, t2.hi, t2.end, t2.sel)
        counter.retain_only(keep, drop)
    return node


def nuts_step_recursive(
    target: Target,
    cfg: KernelConfig,
    q: np.ndarray,
    rng: np.random.Generator,
    mutate: str | None = None,
    count_states: bool = False,
) -> tuple[np.ndarray, TransitionInfo]:
    """One NUTS transition via the depth-first tree recursion.

    Memory is O(K_m * d): only the boundary states, trajectory end and running
    candidates of the open subtrees are retained, never a whole orbit table.
    Defines the same Markov transition as :func:`nuts_step_iterative`; the
    equivalence is tested against the exact pmf, not assumed.
    """
    p = momentum_refresh(cfg.mass, rng)
    x0 = PhasePoint(np.asarray(q, dtype=float), p)
    return nuts_transition_recursive(
        target, cfg, x0, rng, mutate=mutate, count_states=count_states
    )


def nuts_transition_recursive(
    target: Target,
    cfg: KernelConfig,
    x0: PhasePoint,
    rng: np.random.Generator,
    mutate: str | None = None,
    count_states: bool = False,
) -> tuple[np.ndarray, TransitionInfo]:
    """The tree recursion at a fixed phase point (momentum already drawn)."""
    if mutate not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutate!r}")
    gc = _GradCounter()
    st0 = _rec_anchor(target, cfg.mass, x0.q, x0.p, gc)
    counter = _LiveCounter() if count_states else None
    if counter is not None:
        counter.note(st0)
    if st0.diverged:
        return x0.q, TransitionInfo(0, _origin_interval(), 0, gc.n, True)

    sel = st0
    lo = hi = st0
    logw_tot = st0.logw
    k_f = 0
    diverged = False
    for k in range(cfg.k_m):
        v_k = 1 if rng.random() < 0.5 else 0
        frm = hi if v_k else lo
        node = _build_tree(target, cfg, frm, 1 if v_k else -1, k, rng, gc, counter)
        if node.stop:
            diverged = diverged or node.diverged
            if counter is not None:
                counter.retain_only((lo, hi, sel), (node.lo, node.hi, node.end, node.sel))
            break
        u_swap = rng.random()
        log_r = accept_log_ratio(node.logw, logw_tot)
        if mutate == "always-swap":
            if node.logw > -math.inf:
                sel = node.sel
        elif log_r > -math.inf and u_swap < math.exp(log_r):
            sel = node.sel
        if v_k:
            hi = node.hi
        else:
            lo = node.lo
        logw_tot = float(np.logaddexp(logw_tot, node.logw))
        k_f = k + 1
        if counter is not None:
            counter.retain_only((lo, hi, sel), (node.lo, node.hi, node.end, node.sel))
        if _states_uturn(lo, hi):
            # the doubled interval as a whole has turned: the swap above
            # stands, but no further doubling happens
            break

    info = TransitionInfo(
        j_f=sel.idx,
        i_f=(lo.idx, hi.idx),
        k_f=k_f,
        n_grad=gc.n,
        diverged=diverged,
        peak_states=None if counter is None else counter.peak,
    )
    return sel.q, info


def nuts_recursive_index_batch(
    target: Target,
    cfg: KernelConfig,
    x0: PhasePoint,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``n`` draws of the recursive sampler's index at a fixed phase point.

    Vectorized twin of :func:`nuts_step_recursive` for conditional
    goodness-of-fit testing: at a fixed ``(q0, p0)`` the orbit geometry is
    deterministic, so the tree merges reduce to coin flips with fixed biases
    that can be applied to whole arrays of draws at once.  Same merge rules,
    same stopping rules, orders of magnitude faster than looping the scalar
    sampler.
    """
    cache = OrbitCache(target, cfg.params, x0)
    cache.extend_to(-(1 << cfg.k_m) + 1, (1 << cfg.k_m) - 1)

    def batch_tree(seg_lo: int, seg_hi: int, direction: int, depth: int, count: int):
        # returns (sel indices array, logw, stop flag); stop is deterministic
        if depth == 0:
            idx = seg_lo
            return (
                np.full(count, idx, dtype=np.int64),
                cache.logw(idx),
                cache.diverged(idx),
            )
        half = 1 << (depth - 1)
        if direction > 0:
            first = (seg_lo, seg_lo + half - 1)
            second = (seg_lo + half, seg_hi)
        else:
            first = (seg_hi - half + 1, seg_hi)
            second = (seg_lo, seg_hi - half)
        sel1, w1, stop1 = batch_tree(*first, direction, depth - 1, count)
        if stop1:
            return sel1, w1, True
        sel2, w2, stop2 = batch_tree(*second, direction, depth - 1, count)
        logw = float(np.logaddexp(w1, w2))
        u = rng.random(count)
        p2 = math.exp(w2 - logw) if logw > -math.inf else 0.0
        sel = np.where(u < p2, sel2, sel1)
        stop = stop2 or cache.pair_uturn(seg_lo, seg_hi)
        return sel, logw, stop

    sel = np.zeros(n, dtype=np.int64)
    if cache.diverged(0):
        return sel
    groups: dict[tuple[int, int], np.ndarray] = {(0, 0): np.arange(n)}
    for k in range(cfg.k_m):
        next_groups: dict[tuple[int, int], np.ndarray] = {}
        for (glo, ghi), ids in groups.items():
            right = rng.random(ids.size) < 0.5
            group_logw = logsumexp(cache.logw_range(glo, ghi))
            for v_k, sub in ((1, ids[right]), (0, ids[~right])):
                if sub.size == 0:
                    continue
                step = 1 << k
                seg = (ghi + 1, ghi + step) if v_k else (glo - step, glo - 1)
                node_sel, node_logw, node_stop = batch_tree(
                    *seg, 1 if v_k else -1, k, sub.size
                )
                if node_stop:
                    continue  # these draws are finished; sel already holds their state
                u_swap = rng.random(sub.size)
                log_r = accept_log_ratio(node_logw, group_logw)
                if log_r > -math.inf:
                    swap = u_swap < math.exp(log_r)
                    sel[sub[swap]] = node_sel[swap]
                merged = (min(glo, seg[0]), max(ghi, seg[1]))
                if cache.pair_uturn(merged[0], merged[1]):
                    continue
                next_groups[merged] = sub
        groups = next_groups
        if not groups:
            break
    return sel


def nuts_exact_pmf(target: Target, cfg: KernelConfig, x0: PhasePoint) -> ExactPMF:
    """Exact one-step NUTS index law at ``x0`` by full enumeration.

    Orbit probabilities are exact dyadic rationals; index probabilities come
    from the closed-form kernel rows, evaluated in the log domain.
    """
    if cfg.k_m > 8:
        raise ValueError(f"k_m = {cfg.k_m} exceeds the exact-enumeration budget (8)")
    x0 = PhasePoint(np.asarray(x0.q, dtype=float), np.asarray(x0.p, dtype=float))
    cache = OrbitCache(target, cfg.params, x0)
    if cache.diverged(0):
        return ExactPMF(anchor=x0, entries=[(0, 1.0, x0.q)])
    probs: dict[int, float] = {}
    for iv, frac in orbit_select_pmf(cache, cfg.k_m):
        weight = float(frac)
        if len(iv) == 1:
            probs[0] = probs.get(0, 0.0) + weight
            continue
        tree = WeightTree.from_orbit(cache, iv)
        row = np.exp(tree.qhat_row_log(iv.iota(0)))
        for leaf, pr in enumerate(row):
            if pr > 0.0:
                j = iv.iota_inv(leaf)
                probs[j] = probs.get(j, 0.0) + weight * pr
    entries = [(j, pr, cache.state(j).q) for j, pr in sorted(probs.items())]
    return ExactPMF(anchor=x0, entries=entries)


# --- HMC / MALA / randomized-T HMC ------------------------------------------


def hmc_accept_prob(
    target: Target, cfg: KernelConfig, x0: PhasePoint, t: int | None = None,
    formulation: str = "metropolis",
) -> float:
    """Acceptance probability of the T-step HMC proposal from ``x0``.

    Two equivalent formulations are implemented: the Metropolis rate
    ``min(1, exp(H0 - HT))``, and the dynamic-scheme index selection on the
    two-point orbit ``{0, T}`` (accept with the weight ratio of the endpoint).
    They are cross-checked in the test suite.
    """
    t = cfg.t if t is None else t
    h0 = hamiltonian(target, cfg.mass, x0)
    x_t = leapfrog_iter(target, cfg.params, x0, t)
    if not (np.all(np.isfinite(x_t.q)) and np.all(np.isfinite(x_t.p))):
        return 0.0
    h_t = hamiltonian(target, cfg.mass, x_t)
    if formulation == "metropolis":
        if not math.isfinite(h_t):
            return 0.0
        return min(1.0, math.exp(min(0.0, h0 - h_t)))
    if formulation == "dynamic":
        return math.exp(accept_log_ratio(-h_t, -h0))
    raise ValueError(f"unknown formulation {formulation!r}")


def hmc_step(
    target: Target,
    cfg: KernelConfig,
    q: np.ndarray,
    rng: np.random.Generator,
    t: int | None = None,
) -> tuple[np.ndarray, TransitionInfo]:
    """One HMC transition with ``T`` leapfrog steps (``T = 1`` is MALA)."""
    t = cfg.t if t is None else t
    p = momentum_refresh(cfg.mass, rng)
    x0 = PhasePoint(np.asarray(q, dtype=float), p)
    h0 = hamiltonian(target, cfg.mass, x0)
    x_t = leapfrog_iter(target, cfg.params, x0, t)
    ok = bool(np.all(np.isfinite(x_t.q)) and np.all(np.isfinite(x_t.p)))
    h_t = hamiltonian(target, cfg.mass, x_t) if ok else math.inf
    diverged = not ok or not math.isfinite(h_t)
    alpha = 0.0 if diverged else min(1.0, math.exp(min(0.0, h0 - h_t)))
    accepted = bool(rng.random() < alpha)
    if accepted:
        return x_t.q, TransitionInfo(t, (0, t), 0, t + 1, diverged, accepted=True, t=t)
    return q, TransitionInfo(0, (0, t), 0, t + 1, diverged, accepted=False, t=t)


def rhmc_step(
    target: Target,
    cfg: KernelConfig,
    q: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, TransitionInfo]:
    """Randomized-T HMC: draw T from the mixture weights, then one HMC step."""
    cum = np.cumsum(cfg.weights)
    t = 1 + min(int(np.searchsorted(cum, rng.random(), side="right")), cfg.weights.size - 1)
    return hmc_step(target, cfg, q, rng, t=t)


def make_kernel(
    target: Target, cfg: KernelConfig, mutate: str | None = None
) -> Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, TransitionInfo]]:
    """Bind a config to its one-step transition callable."""
    if cfg.kind == "nuts_iterative":
        return lambda q, rng: nuts_step_iterative(target, cfg, q, rng, mutate=mutate)
    if cfg.kind == "nuts_recursive":
        return lambda q, rng: nuts_step_recursive(target, cfg, q, rng, mutate=mutate)
    if cfg.kind == "hmc":
        return lambda q, rng: hmc_step(target, cfg, q, rng)
    return lambda q, rng: rhmc_step(target, cfg, q, rng)
