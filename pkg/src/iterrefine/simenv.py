"""Synthetic compositional environment, exact oracle and Monte Carlo.

An image is a bit vector over k bindings (1 = rendered correctly). A fresh
generation gets each binding right with probability

    g(k) = p0                   if k <= c
         = p0 * alpha**(k - c)  otherwise

so prompts beyond the model's capacity ``c`` are rarely solved in one shot.
An edit targeting binding i fixes it with probability q and breaks every
other correct binding with probability r. The verifier flips correct
verdicts with probability fn and wrong ones with probability fp.

The simulated critic is deterministic given the verifier reports:
all observed correct -> STOP; score dropped since the previous candidate ->
BACKTRACK; score below ``restart_threshold`` -> RESTART; otherwise CONTINUE
on the lowest-index observed-wrong binding (sub-prompt ``fix:<i>``).

Because every binding behaves the same under these rules, the number of
correct bindings is a sufficient statistic for the noiseless chain, which
keeps the exact oracle small (``oracle_solve_rate``). ``enumerate_solve_rate``
runs the same chain over all 2**k bit vectors as an independent check, and
``monte_carlo`` simulates the bit-level process directly (noise included).
"""

from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .core import ALL_ACTIONS, Action, Budget, CriticDecision, ImageRef, TaskPrompt, VerifierReport
from .errors import ConfigError, OracleUnsupported

SIM_MEDIA_TYPE = "application/x-sim-image"
MAX_ORACLE_K = 12


@dataclass(frozen=True)
class SimParams:
    k: int = 5
    p0: float = 0.9
    c: int = 3
    alpha: float = 0.8
    q: float = 0.8
    r: float = 0.05
    fn: float = 0.0
    fp: float = 0.0
    restart_threshold: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("p0", "q", "r", "fn", "fp", "restart_threshold"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name}={value} outside [0, 1]")
        if self.k < 0:
            raise ConfigError(f"k={self.k} must be >= 0")
        if self.c < 1:
            raise ConfigError(f"c={self.c} must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha={self.alpha} outside (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> SimParams:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sim keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> SimParams:
        return SimParams(**{**asdict(self), **changes})

    @property
    def noiseless(self) -> bool:
        return self.fn == 0 and self.fp == 0


def _exact(x: float) -> Fraction:
    # decimal reading of the configured value: 0.9 -> 9/10, not the binary double
    return Fraction(repr(float(x)))


def gen_prob(params: SimParams, exact: bool = False):
    """Per-binding success probability g(k) of a fresh generation."""
    p0, alpha = (_exact(params.p0), _exact(params.alpha)) if exact else (params.p0, params.alpha)
    if params.k <= params.c:
        return p0
    return p0 * alpha ** (params.k - params.c)


# --------------------------------------------------------------------------
# single-image operations


@dataclass(frozen=True)
class SimImage:
    flags: tuple[int, ...]
    nonce: int = 0

    @property
    def k(self) -> int:
        return len(self.flags)

    @property
    def n_correct(self) -> int:
        return sum(self.flags)

    def to_ref(self) -> ImageRef:
        body = {"flags": "".join(map(str, self.flags)), "nonce": self.nonce}
        return ImageRef(data=json.dumps(body, sort_keys=True).encode(), media_type=SIM_MEDIA_TYPE)

    @classmethod
    def from_ref(cls, ref: ImageRef) -> SimImage:
        if ref.media_type != SIM_MEDIA_TYPE:
            raise ValueError(f"not a sim image: {ref.media_type}")
        body = json.loads(ref.read_bytes())
        return cls(tuple(int(ch) for ch in body["flags"]), int(body["nonce"]))


def sim_generate(params: SimParams, rng: np.random.Generator, nonce: int = 0) -> SimImage:
    flags = rng.random(params.k) < gen_prob(params)
    return SimImage(tuple(int(f) for f in flags), nonce)


def sim_edit(image: SimImage, target: int, params: SimParams, rng: np.random.Generator, nonce: int = 0) -> SimImage:
    if not 0 <= target < image.k:
        raise IndexError(f"target binding {target} outside 0..{image.k - 1}")
    fix = rng.random() < params.q
    breaks = rng.random(image.k) < params.r
    flags = []
    for i, f in enumerate(image.flags):
        if i == target:
            flags.append(1 if (f or fix) else 0)
        else:
            flags.append(1 if (f and not breaks[i]) else 0)
    return SimImage(tuple(flags), nonce)


def sim_verify(image: SimImage, params: SimParams, rng: np.random.Generator) -> tuple[int, ...]:
    """Observed per-binding verdicts."""
    u = rng.random(image.k)
    out = []
    for f, x in zip(image.flags, u):
        flip = x < (params.fn if f else params.fp)
        out.append(int(f) ^ int(flip))
    return tuple(out)


def _first_wrong(verdicts: Iterable[int]) -> int:
    for i, v in enumerate(verdicts):
        if not v:
            return i
    return 0


def sim_critic(
    report: VerifierReport,
    params: SimParams,
    previous_report: VerifierReport | None = None,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
) -> CriticDecision:
    allowed = frozenset(allowed_actions)
    verdicts = [v for _, v in report.answers]
    if all(verdicts):
        return CriticDecision(Action.STOP, "", "STOP")
    if (
        Action.BACKTRACK in allowed
        and previous_report is not None
        and report.score < previous_report.score
    ):
        target = _first_wrong(v for _, v in previous_report.answers)
        return CriticDecision(Action.BACKTRACK, f"fix:{target}", f"BACKTRACK fix:{target}")
    if Action.RESTART in allowed and report.score < _exact(params.restart_threshold):
        return CriticDecision(Action.RESTART, "restart", "RESTART")
    target = _first_wrong(verdicts)
    return CriticDecision(Action.CONTINUE, f"fix:{target}", f"CONTINUE fix:{target}")


# --------------------------------------------------------------------------
# backends


def binding_questions(k: int) -> tuple[str, ...]:
    return tuple(f"Is binding {i} rendered correctly?" for i in range(k))


def sim_task(k: int, task_id: str = "sim") -> TaskPrompt:
    return TaskPrompt(task_id, f"synthetic prompt with {k} bindings", binding_questions(k), category=f"k={k}")


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


class SimGenerator:
    def __init__(self, params: SimParams):
        self.params = params
        self.calls = 0

    def generate(self, prompt_text, sub_prompt=None, seed=None):
        self.calls += 1
        seed = 0 if seed is None else seed
        return sim_generate(self.params, _rng(self.params.seed, seed, 1), nonce=seed).to_ref()


_FIX = re.compile(r"fix:(\d+)")


class SimEditor:
    def __init__(self, params: SimParams):
        self.params = params
        self.calls = 0

    def edit(self, base, instruction, seed=None):
        self.calls += 1
        seed = 0 if seed is None else seed
        image = SimImage.from_ref(base)
        m = _FIX.search(instruction)
        target = int(m.group(1)) if m else _first_wrong(image.flags)
        if image.k == 0:
            return SimImage((), seed).to_ref()
        return sim_edit(image, min(target, image.k - 1), self.params, _rng(self.params.seed, seed, 2), nonce=seed).to_ref()


class SimVerifier:
    """Noisy per-binding verifier; noise is keyed by the image nonce."""

    def __init__(self, params: SimParams):
        self.params = params
        self.calls = 0

    def verify(self, image, task):
        self.calls += 1
        img = SimImage.from_ref(image)
        verdicts = sim_verify(img, self.params, _rng(self.params.seed, img.nonce, 3))
        questions = task.questions if len(task.questions) == img.k else binding_questions(img.k)
        return VerifierReport.binary(zip(questions, verdicts))


class TruthVerifier:
    """Noiseless final evaluator for sim runs."""

    def verify(self, image, task):
        img = SimImage.from_ref(image)
        questions = task.questions if len(task.questions) == img.k else binding_questions(img.k)
        return VerifierReport.binary(zip(questions, img.flags))


class SimCritic:
    def __init__(self, params: SimParams, allowed_actions: Iterable[Action] = ALL_ACTIONS):
        self.params = params
        self.allowed_actions = frozenset(allowed_actions)
        self.calls = 0

    def critique(self, image, task, history, report, round, max_rounds, previous_report=None):
        self.calls += 1
        return sim_critic(report, self.params, previous_report, self.allowed_actions)


@dataclass
class SimBackends:
    generator: SimGenerator
    editor: SimEditor
    verifier: SimVerifier
    critic: SimCritic
    final_evaluator: TruthVerifier = field(default_factory=TruthVerifier)

    @classmethod
    def create(cls, params: SimParams, allowed_actions: Iterable[Action] = ALL_ACTIONS) -> SimBackends:
        return cls(SimGenerator(params), SimEditor(params), SimVerifier(params), SimCritic(params, allowed_actions))


# --------------------------------------------------------------------------
# exact oracle


def _binom_pmf(n: int, p, exact: bool) -> list:
    one = Fraction(1) if exact else 1.0
    return [math.comb(n, i) * p**i * (one - p) ** (n - i) for i in range(n + 1)]


@dataclass(frozen=True)
class _Chain:
    k: int
    gen: list  # gen[j] = P(j correct)
    edit: list  # edit[b][j] = P(j correct | edit of an image with b correct)
    restart_below: Fraction  # restart when count/k < this
    backtrack: bool
    restart: bool


def _build_chain(params: SimParams, allowed: frozenset, exact: bool) -> _Chain:
    k = params.k
    conv = _exact if exact else float
    q, r = conv(params.q), conv(params.r)
    one = Fraction(1) if exact else 1.0
    gen = _binom_pmf(k, gen_prob(params, exact), exact)
    edit = []
    for b in range(k + 1):
        dist = [0 * one] * (k + 1)
        if b < k:
            keep = _binom_pmf(b, one - r, exact)
            for j, pj in enumerate(keep):
                dist[j + 1] += pj * q
                dist[j] += pj * (one - q)
        else:
            keep = _binom_pmf(k - 1, one - r, exact)
            for j, pj in enumerate(keep):
                dist[j + 1] += pj
        edit.append(dist)
    return _Chain(k, gen, edit, _exact(params.restart_threshold), Action.BACKTRACK in allowed, Action.RESTART in allowed)


def _decide(chain: _Chain, prev: int | None, cur: int) -> tuple[str, int | None]:
    """Critic decision on counts: returns (kind, edit base count)."""
    if chain.backtrack and prev is not None and cur < prev:
        return "edit", prev
    if chain.restart and chain.k and Fraction(cur, chain.k) < chain.restart_below:
        return "gen", None
    return "edit", cur


def _check_oracle_supported(params: SimParams, continue_from_global_best: bool) -> None:
    if params.k > MAX_ORACLE_K:
        raise OracleUnsupported(f"k={params.k} > {MAX_ORACLE_K}")
    if not params.noiseless:
        raise OracleUnsupported("oracle requires a noiseless verifier (fn = fp = 0)")
    if continue_from_global_best:
        raise OracleUnsupported("cross-stream CONTINUE couples streams")


def stream_best_distribution(
    params: SimParams,
    rounds: int,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
    exact: bool = True,
) -> list:
    """Distribution of the best correct-count reached by one stream in ``rounds`` rounds."""
    _check_oracle_supported(params, False)
    chain = _build_chain(params, frozenset(allowed_actions), exact)
    k = params.k
    zero = Fraction(0) if exact else 0.0
    # state: (prev, cur, best); prev None before the first edit
    states: dict = defaultdict(lambda: zero)
    for j, pj in enumerate(chain.gen):
        if pj:
            states[(None, j, j)] += pj
    for _ in range(2, rounds + 1):
        nxt: dict = defaultdict(lambda: zero)
        for (prev, cur, best), p in states.items():
            if cur == k:
                nxt[(prev, cur, best)] += p
                continue
            kind, base = _decide(chain, prev, cur)
            dist = chain.gen if kind == "gen" else chain.edit[base]
            for j, pj in enumerate(dist):
                if pj:
                    nxt[(cur, j, max(best, j))] += p * pj
        states = nxt
    out = [zero] * (k + 1)
    for (_, _, best), p in states.items():
        out[best] += p
    return out


def stream_solve_probability(
    params: SimParams,
    rounds: int,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
    exact: bool = True,
):
    """P(one stream reaches an all-correct image within ``rounds`` rounds)."""
    _check_oracle_supported(params, False)
    chain = _build_chain(params, frozenset(allowed_actions), exact)
    k = params.k
    zero = Fraction(0) if exact else 0.0
    solved = zero
    states: dict = defaultdict(lambda: zero)
    for j, pj in enumerate(chain.gen):
        if j == k:
            solved += pj
        elif pj:
            states[(None, j)] += pj
    for _ in range(2, rounds + 1):
        nxt: dict = defaultdict(lambda: zero)
        for (prev, cur), p in states.items():
            kind, base = _decide(chain, prev, cur)
            dist = chain.gen if kind == "gen" else chain.edit[base]
            for j, pj in enumerate(dist):
                if not pj:
                    continue
                if j == k:
                    solved += p * pj
                else:
                    nxt[(cur, j)] += p * pj
        states = nxt
    return solved


def oracle_solve_rate(
    params: SimParams,
    budget: Budget,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
    continue_from_global_best: bool = False,
    exact: bool = True,
):
    """Exact full-solve probability of the engine running the sim critic."""
    _check_oracle_supported(params, continue_from_global_best)
    p = stream_solve_probability(params, budget.rounds, allowed_actions, exact)
    one = Fraction(1) if exact else 1.0
    return one - (one - p) ** budget.streams


def oracle_mean_score(
    params: SimParams,
    budget: Budget,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
    exact: bool = True,
):
    """Expected true score of the selected candidate (noiseless verifier)."""
    if params.k == 0:
        return Fraction(1) if exact else 1.0
    dist = stream_best_distribution(params, budget.rounds, allowed_actions, exact)
    zero = Fraction(0) if exact else 0.0
    cdf, acc = [], zero
    for p in dist:
        acc += p
        cdf.append(acc)
    mean = zero
    for j in range(params.k + 1):
        below = cdf[j - 1] ** budget.streams if j else zero
        mean += j * (cdf[j] ** budget.streams - below)
    return mean / params.k


def pass_at_m(params: SimParams, m: int, exact: bool = True):
    """Closed form for pure parallel sampling: 1 - (1 - g(k)**k)**m."""
    one = Fraction(1) if exact else 1.0
    return one - (one - gen_prob(params, exact) ** params.k) ** m


def enumerate_solve_rate(params: SimParams, budget: Budget, allowed_actions: Iterable[Action] = ALL_ACTIONS) -> Fraction:
    """Brute-force oracle over full bit vectors (2**k states); for small k only.

    Independent of the count-lumped chain: it tracks the exact binding
    pattern, applies the lowest-index targeting rule literally and only
    uses per-binding probabilities.
    """
    if params.k > 8:
        raise OracleUnsupported("enumeration limited to k <= 8")
    _check_oracle_supported(params, False)
    allowed = frozenset(allowed_actions)
    k = params.k
    g, q, r = gen_prob(params, True), _exact(params.q), _exact(params.r)
    thr = _exact(params.restart_threshold)
    full = (1 << k) - 1
    ones = [bin(x).count("1") for x in range(1 << k)]

    def prob_vec(pattern_probs):
        out = defaultdict(Fraction)
        for x in range(1 << k):
            p = Fraction(1)
            for i in range(k):
                p *= pattern_probs[i] if x >> i & 1 else 1 - pattern_probs[i]
            if p:
                out[x] += p
        return out

    gen = prob_vec([g] * k)

    def edit(x):
        target = next((i for i in range(k) if not x >> i & 1), 0)
        probs = [(1 - r) if x >> i & 1 else Fraction(0) for i in range(k)]
        probs[target] = Fraction(1) if x >> target & 1 else q
        return prob_vec(probs)

    edit_cache: dict = {}
    solved = Fraction(0)
    states = defaultdict(Fraction)
    for x, p in gen.items():
        if x == full:
            solved += p
        else:
            states[(None, x)] += p
    for _ in range(2, budget.rounds + 1):
        nxt = defaultdict(Fraction)
        for (prev, cur), p in states.items():
            if Action.BACKTRACK in allowed and prev is not None and ones[cur] < ones[prev]:
                dist = edit_cache.setdefault(prev, edit(prev))
            elif Action.RESTART in allowed and k and Fraction(ones[cur], k) < thr:
                dist = gen
            else:
                dist = edit_cache.setdefault(cur, edit(cur))
            for y, py in dist.items():
                if y == full:
                    solved += p * py
                else:
                    nxt[(cur, y)] += p * py
        states = nxt
    return 1 - (1 - solved) ** budget.streams


# --------------------------------------------------------------------------
# vectorized Monte Carlo


@dataclass(frozen=True)
class MonteCarloResult:
    solve_rate: float
    mean_score: float
    n_trials: int
    n_solved: int

    def sigma(self, p: float) -> float:
        return math.sqrt(p * (1 - p) / self.n_trials)


def monte_carlo(
    params: SimParams,
    budget: Budget,
    n_trials: int,
    seed: int = 0,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
) -> MonteCarloResult:
    """Simulate the engine's sim policy on bit vectors, all trials at once.

    Selection follows the engine: highest observed score, ties to the lower
    stream and the earlier candidate. Solved means the selected candidate
    is truly all-correct.
    """
    allowed = frozenset(allowed_actions)
    rng = np.random.default_rng([seed, params.seed])
    N, M, k = n_trials, budget.streams, params.k
    if k == 0:
        return MonteCarloResult(1.0, 1.0, N, N)
    g = gen_prob(params)
    thr = _exact(params.restart_threshold)

    def verify(x):
        u = rng.random(x.shape)
        flip = np.where(x, u < params.fn, u < params.fp)
        return x ^ flip

    cur = rng.random((N, M, k)) < g
    obs = verify(cur)
    prev = np.zeros_like(cur)
    prev_obs = np.zeros_like(cur)
    has_prev = np.zeros((N, M), dtype=bool)
    stopped = np.zeros((N, M), dtype=bool)
    best_obs = obs.sum(-1)
    best_true = cur.sum(-1)
    idx = np.arange(k)

    for _ in range(2, budget.rounds + 1):
        score = obs.sum(-1)
        stopped |= score == k
        act = ~stopped
        if not act.any():
            break
        backtrack = act & has_prev & (score < prev_obs.sum(-1)) if Action.BACKTRACK in allowed else np.zeros_like(act)
        if Action.RESTART in allowed and k:
            low = score * thr.denominator < thr.numerator * k
            restart = act & ~backtrack & low
        else:
            restart = np.zeros_like(act)
        base = np.where(backtrack[..., None], prev, cur)
        base_obs = np.where(backtrack[..., None], prev_obs, obs)
        wrong = ~base_obs
        target = np.where(wrong.any(-1), wrong.argmax(-1), 0)
        onehot = idx == target[..., None]
        fix = rng.random((N, M)) < params.q
        survive = rng.random((N, M, k)) >= params.r
        edited = np.where(onehot, base | fix[..., None], base & survive)
        fresh = rng.random((N, M, k)) < g
        new = np.where(restart[..., None], fresh, edited)
        new_obs = verify(new)
        upd = act[..., None]
        prev = np.where(upd, cur, prev)
        prev_obs = np.where(upd, obs, prev_obs)
        has_prev |= act
        cur = np.where(upd, new, cur)
        obs = np.where(upd, new_obs, obs)
        s_obs = new_obs.sum(-1)
        better = act & (s_obs > best_obs)
        best_obs = np.where(better, s_obs, best_obs)
        best_true = np.where(better, new.sum(-1), best_true)

    winner = best_obs.argmax(-1)
    sel_true = np.take_along_axis(best_true, winner[:, None], axis=1)[:, 0]
    solved = sel_true == k
    mean_score = float(sel_true.mean() / k) if k else 1.0
    return MonteCarloResult(float(solved.mean()), mean_score, N, int(solved.sum()))


def engine_monte_carlo(
    params: SimParams,
    budget: Budget,
    n_trials: int,
    seed: int = 0,
    allowed_actions: Iterable[Action] = ALL_ACTIONS,
) -> MonteCarloResult:
    """Monte Carlo through the real engine and sim backends (slower)."""
    from .engine import EngineConfig, derive_seed, run_refinement

    task = sim_task(params.k)
    truth = TruthVerifier()
    solved, total = 0, Fraction(0)
    for trial in range(n_trials):
        trial_params = params.with_(seed=derive_seed(params.seed, seed, trial))
        b = SimBackends.create(trial_params, allowed_actions)
        cfg = EngineConfig(budget, frozenset(allowed_actions) | {Action.CONTINUE, Action.STOP},
                           seed=derive_seed(seed, trial, 0))
        result = run_refinement(task, cfg, b.generator, b.editor, b.verifier, b.critic)
        final = truth.verify(result.best.image, task)
        solved += final.perfect
        total += final.score
    return MonteCarloResult(solved / n_trials, float(total / n_trials), n_trials, solved)
