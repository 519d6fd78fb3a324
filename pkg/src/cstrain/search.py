"""Two-extreme-point coordinate search with weight bundling.

Every variable lives in a box ``[lower, upper]`` and has a current value
(the box midpoint once it has been shrunk at least once).  One iteration
reshuffles the variables into bundles; for each bundle the whole bundle is
pushed to its lower bounds and to its upper bounds, the two candidates are
compared, and every box in the bundle loses ``bsf`` of its width on the
losing side.

State is stored as flat numpy arrays so that networks with hundreds of
thousands of weights stay cheap; :class:`BoxInterval` is the scalar view.
"""
from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

STATE_FORMAT = "cstrain-search-state"
STATE_VERSION = 1


class Winner(enum.Enum):
    LOWER = "lower"
    UPPER = "upper"
    TIE = "tie"


# candidate sides reuse the winner labels
Side = Winner


class SearchAborted(RuntimeError):
    """Raised when the fitness returns a non-finite loss."""

    def __init__(self, bundle_index: int, nfc: int, value: float):
        super().__init__(
            f"non-finite fitness {value!r} at bundle {bundle_index} (nfc={nfc})")
        self.bundle_index = bundle_index
        self.nfc = nfc
        self.value = value


@dataclass(frozen=True)
class BoxInterval:
    lower: float
    upper: float
    current: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


# -- initialization schemes -------------------------------------------------

@dataclass(frozen=True)
class Center:
    def __str__(self):
        return "center"


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"uniform init needs lo < hi, got [{self.lo}, {self.hi}]")

    def __str__(self):
        return f"uniform:{self.lo:g},{self.hi:g}"


@dataclass(frozen=True)
class CenterNormal:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"normal init needs sigma > 0, got {self.sigma}")

    def __str__(self):
        return f"normal:{self.mu:g},{self.sigma:g}"


InitScheme = Union[Center, Uniform, CenterNormal]


def parse_init(text: str) -> InitScheme:
    """Parse ``center``, ``uniform:lo,hi`` or ``normal:mu,sigma``."""
    name, _, args = text.strip().partition(":")
    name = name.lower()
    if name == "center" and not args:
        return Center()
    try:
        values = [float(v) for v in args.split(",")] if args else []
    except ValueError:
        raise ValueError(f"bad init scheme {text!r}") from None
    if name == "uniform" and len(values) == 2:
        return Uniform(*values)
    if name == "normal" and len(values) == 2:
        return CenterNormal(*values)
    raise ValueError(f"bad init scheme {text!r}; expected center, uniform:lo,hi "
                     "or normal:mu,sigma")


def parse_schedule(text: str) -> list[tuple[int, int]]:
    """Parse ``5x25,20x100`` into ``[(5, 25), (20, 100)]``."""
    schedule = []
    for part in text.split(","):
        count, sep, size = part.strip().lower().partition("x")
        if not sep:
            raise ValueError(f"bad schedule entry {part!r}; expected COUNTxSIZE")
        schedule.append((int(count), int(size)))
    return schedule


@dataclass
class CsConfig:
    dimension: int
    iterations: int
    bundle_schedule: Sequence[tuple[int, int]]
    bsf: float = 0.05
    init_scheme: InitScheme = field(default_factory=Center)
    initial_lower: float = -1.0
    initial_upper: float = 1.0
    seed: int = 0

    @classmethod
    def from_schedule(cls, dimension: int, schedule: Sequence[tuple[int, int]], **kwargs) -> "CsConfig":
        return cls(dimension=dimension, iterations=sum(c for c, _ in schedule),
                   bundle_schedule=list(schedule), **kwargs)

    def validate(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not 0 < self.bsf < 0.5:
            raise ValueError(f"bsf must lie in (0, 0.5), got {self.bsf}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (math.isfinite(self.initial_lower) and math.isfinite(self.initial_upper)):
            raise ValueError("initial bounds must be finite")
        if not self.initial_lower < self.initial_upper:
            raise ValueError("initial_lower must be < initial_upper")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        for count, size in self.bundle_schedule:
            if count < 1 or size < 1:
                raise ValueError(f"schedule entry ({count}, {size}) must be positive")
            if size > self.dimension:
                raise ValueError(f"bundle size {size} exceeds dimension {self.dimension}")
        total = sum(count for count, _ in self.bundle_schedule)
        if total != self.iterations:
            raise ValueError(f"schedule covers {total} iterations, config says {self.iterations}")

    def bundle_size_at(self, iteration: int) -> int:
        """Bundle size used by the zero-based ``iteration``."""
        for count, size in self.bundle_schedule:
            if iteration < count:
                return size
            iteration -= count
        raise IndexError("iteration beyond schedule")


@dataclass
class SearchState:
    lower: np.ndarray
    upper: np.ndarray
    current: np.ndarray
    best_value: float
    best_params: np.ndarray
    nfc: int
    iteration: int
    rng: np.random.Generator

    @property
    def dimension(self) -> int:
        return self.current.size

    @property
    def intervals(self) -> list[BoxInterval]:
        return [BoxInterval(float(lo), float(up), float(c))
                for lo, up, c in zip(self.lower, self.upper, self.current)]

    def interval(self, i: int) -> BoxInterval:
        return BoxInterval(float(self.lower[i]), float(self.upper[i]), float(self.current[i]))


def init_state(config: CsConfig) -> SearchState:
    config.validate()
    d = config.dimension
    rng = np.random.default_rng(config.seed)
    lower = np.full(d, float(config.initial_lower))
    upper = np.full(d, float(config.initial_upper))
    current = initial_values(config.init_scheme, lower, upper, rng)
    return SearchState(lower=lower, upper=upper, current=current,
                       best_value=math.inf, best_params=current.copy(),
                       nfc=0, iteration=0, rng=rng)


def initial_values(scheme: InitScheme, lower: np.ndarray, upper: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Starting point for every variable; random draws are clamped into the box."""
    d = lower.size
    if isinstance(scheme, Center):
        return (lower + upper) / 2
    if isinstance(scheme, Uniform):
        return np.clip(rng.uniform(scheme.lo, scheme.hi, size=d), lower, upper)
    if isinstance(scheme, CenterNormal):
        return np.clip(rng.normal(scheme.mu, scheme.sigma, size=d), lower, upper)
    raise TypeError(f"unknown init scheme {scheme!r}")


def make_bundles(state: SearchState, bundle_size: int) -> list[np.ndarray]:
    """Shuffle all variable indices and cut them into bundles.

    The last bundle is smaller when ``bundle_size`` does not divide the
    dimension.  Advances ``state.rng``.
    """
    d = state.dimension
    if not 1 <= bundle_size <= d:
        raise ValueError(f"bundle size must be in [1, {d}], got {bundle_size}")
    perm = state.rng.permutation(d)
    return [perm[i:i + bundle_size] for i in range(0, d, bundle_size)]


def candidate_params(state: SearchState, bundle, side: Winner) -> np.ndarray:
    x = state.current.copy()
    if side is Winner.LOWER:
        x[bundle] = state.lower[bundle]
    elif side is Winner.UPPER:
        x[bundle] = state.upper[bundle]
    else:
        raise ValueError(f"side must be LOWER or UPPER, got {side}")
    return x


def shrink(interval: BoxInterval, winner: Winner, bsf: float) -> BoxInterval:
    lower, upper = interval.lower, interval.upper
    width = upper - lower
    if winner is Winner.LOWER:
        upper = upper - width * bsf
    elif winner is Winner.UPPER:
        lower = lower + width * bsf
    else:
        return interval
    return BoxInterval(lower, upper, (lower + upper) / 2)


def _shrink_bundle(state: SearchState, bundle: np.ndarray, winner: Winner, bsf: float) -> None:
    # same arithmetic as shrink(), applied to a whole bundle
    if winner is Winner.TIE:
        return
    lower = state.lower[bundle]
    upper = state.upper[bundle]
    width = upper - lower
    if winner is Winner.LOWER:
        upper = upper - width * bsf
        state.upper[bundle] = upper
    else:
        lower = lower + width * bsf
        state.lower[bundle] = lower
    state.current[bundle] = (lower + upper) / 2


def compare(low_value: float, high_value: float) -> Winner:
    if low_value < high_value:
        return Winner.LOWER
    if low_value > high_value:
        return Winner.UPPER
    return Winner.TIE


def run_iteration(state: SearchState, fitness: Callable[[np.ndarray], float],
                  bundle_size: int, bsf: float,
                  fold_hook: Optional[Callable[[], None]] = None) -> SearchState:
    """One sweep over freshly shuffled bundles; mutates and returns ``state``.

    Both candidates of a bundle are scored before ``fold_hook`` runs, so a
    data-feeding fitness compares them on the same fold.
    """
    for b, bundle in enumerate(make_bundles(state, bundle_size)):
        x_low = candidate_params(state, bundle, Winner.LOWER)
        x_high = candidate_params(state, bundle, Winner.UPPER)
        f_low = float(fitness(x_low))
        f_high = float(fitness(x_high))
        state.nfc += 2
        for value in (f_low, f_high):
            if not math.isfinite(value):
                raise SearchAborted(b, state.nfc, value)
        _shrink_bundle(state, bundle, compare(f_low, f_high), bsf)
        if f_low < state.best_value or f_high < state.best_value:
            if f_low <= f_high:
                state.best_value, state.best_params = f_low, x_low
            else:
                state.best_value, state.best_params = f_high, x_high
        if fold_hook is not None:
            fold_hook()
    state.iteration += 1
    return state


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    bundle_size: int
    nfc: int
    best_value: float
    elapsed_s: float


@dataclass
class OptimizeResult:
    x: np.ndarray
    best_params: np.ndarray
    best_value: float
    log: list[IterationRecord]
    state: SearchState

    @property
    def nfc(self) -> int:
        return self.state.nfc


def optimize(fitness: Callable[[np.ndarray], float], config: CsConfig,
             per_iteration_callback: Optional[Callable[[SearchState, IterationRecord], Optional[bool]]] = None,
             fold_hook: Optional[Callable[[], None]] = None,
             state: Optional[SearchState] = None) -> OptimizeResult:
    """Minimize ``fitness`` following ``config.bundle_schedule``.

    ``per_iteration_callback(state, record)`` runs after every iteration;
    returning ``True`` stops the run early.  Passing a ``state`` (e.g. from
    :func:`load_state`) resumes at ``state.iteration``.

    Returns both the final vector of current values (``x``) and the best
    candidate ever evaluated (``best_params``/``best_value``).
    """
    config.validate()
    if state is None:
        state = init_state(config)
    elif state.dimension != config.dimension:
        raise ValueError("resumed state does not match config dimension")
    log: list[IterationRecord] = []
    start = time.perf_counter()
    while state.iteration < config.iterations:
        bs = config.bundle_size_at(state.iteration)
        run_iteration(state, fitness, bs, config.bsf, fold_hook)
        record = IterationRecord(state.iteration, bs, state.nfc, state.best_value,
                                 time.perf_counter() - start)
        log.append(record)
        if per_iteration_callback is not None and per_iteration_callback(state, record):
            break
    return OptimizeResult(x=state.current.copy(), best_params=state.best_params.copy(),
                          best_value=state.best_value, log=log, state=state)


def expected_nfc(dimension: int, schedule: Sequence[tuple[int, int]]) -> int:
    return 2 * sum(count * -(-dimension // size) for count, size in schedule)


# -- checkpointing ----------------------------------------------------------
# npz archive: "format" (str), "version" (int), float64 arrays lower/upper/
# current/best_params, scalars best_value/nfc/iteration, and "rng" holding the
# JSON-encoded numpy bit-generator state.

def save_state(path, state: SearchState) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, format=np.array(STATE_FORMAT), version=np.array(STATE_VERSION),
                 lower=state.lower, upper=state.upper, current=state.current,
                 best_params=state.best_params, best_value=np.array(state.best_value),
                 nfc=np.array(state.nfc), iteration=np.array(state.iteration),
                 rng=np.array(json.dumps(state.rng.bit_generator.state)))


def load_state(path) -> SearchState:
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != STATE_FORMAT:
            raise ValueError(f"{path}: not a search-state checkpoint")
        version = int(data["version"])
        if version != STATE_VERSION:
            raise ValueError(f"{path}: unsupported search-state version {version}")
        rng_state = json.loads(str(data["rng"]))
        bit_gen = getattr(np.random, rng_state["bit_generator"])()
        bit_gen.state = rng_state
        return SearchState(lower=data["lower"].copy(), upper=data["upper"].copy(),
                           current=data["current"].copy(),
                           best_value=float(data["best_value"]),
                           best_params=data["best_params"].copy(),
                           nfc=int(data["nfc"]), iteration=int(data["iteration"]),
                           rng=np.random.Generator(bit_gen))
