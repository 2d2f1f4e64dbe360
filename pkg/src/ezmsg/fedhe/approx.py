import math
import typing

from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import Chebyshev
from numpy.polynomial import chebyshev as cheb

import ezmsg.core as ez

from .ledger import Evaluator, CT
from .errors import ApproximationError, LevelExhaustedError

MAX_DEGREE = 31
GRID_POINTS = 1000
FIT_POINTS = 4096
EXPANSION_DEGREE = 1023
DEFAULT_INTERVAL = (-8.0, 8.0)

# Coefficients smaller than this fraction of the largest are dropped
COEFF_CUTOFF = 1e-12

# Scale bits a folded interval map leaves to the leaf constants
FOLD_MARGIN_BITS = 16

Refresher = typing.Callable[[CT], CT]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sqrt(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(x, 0.0))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _softmax(x: np.ndarray, classes: int = 2) -> np.ndarray:
    """ One logit against classes - 1 logits at zero """
    return _sigmoid(x - math.log(classes - 1)) if classes > 2 else _sigmoid(x)


TARGETS: typing.Dict[str, typing.Callable[[np.ndarray], np.ndarray]] = {
    'sigmoid': _sigmoid,
    'tanh': np.tanh,
    'softplus': _softplus,
    'sqrt': _sqrt,
    'square': np.square,
    'identity': lambda x: np.asarray(x, dtype = float),
    'softmax': _softmax,
    'sqrt_relu': _relu,
}

DERIVATIVES: typing.Dict[str, typing.Callable[[np.ndarray], np.ndarray]] = {
    'sigmoid': lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
    'tanh': lambda x: 1.0 - np.tanh(x) ** 2,
    'softplus': _sigmoid,
    'square': lambda x: 2.0 * x,
    'identity': np.ones_like,
    'softmax': lambda x: _softmax(x) * (1.0 - _softmax(x)),
    'sqrt_relu': lambda x: (x > 0).astype(float),
}

ALIASES = {
    'smooth_relu': 'softplus',
    'smoothrelu': 'softplus',
    'linear': 'identity',
    'relu': 'sqrt_relu',
    'softmax_component': 'softmax',
}

# ReLU-like activations get He initialization
RELU_FAMILY = frozenset({'softplus', 'sqrt_relu', 'square'})

# Degree of the inner square root of sqrt_relu
SQRT_RELU_INNER_DEGREE = 7


def canonical_name(name: str) -> str:
    key = name.lower()
    key = ALIASES.get(key, key)
    if key not in TARGETS:
        raise ApproximationError(f'Unknown activation {name!r}')
    return key


@dataclass(frozen = True)
class ApproxPoly:
    """
    Polynomial over interval, stored as coefficients in the variable
    t = (2x - a - b) / (b - a) which runs over [-1, 1].
    """
    coeffs: typing.Tuple[float, ...]
    interval: typing.Tuple[float, float] = (-1.0, 1.0)
    basis: str = 'chebyshev'
    target: str = 'custom'
    mode: str = 'value'
    fit_error: float = 0.0

    def __post_init__(self) -> None:
        if self.basis not in ('chebyshev', 'power'):
            raise ApproximationError(f'Unknown basis {self.basis!r}')
        a, b = self.interval
        if not b > a:
            raise ApproximationError(f'Empty interval {self.interval}')
        object.__setattr__(self, 'coeffs', tuple(float(c) for c in self.coeffs))
        object.__setattr__(self, 'interval', (float(a), float(b)))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def chebyshev_coeffs(self) -> np.ndarray:
        c = np.asarray(self.coeffs, dtype = float)
        return c if self.basis == 'chebyshev' else cheb.poly2cheb(c)

    @property
    def effective_degree(self) -> int:
        nonzero = np.flatnonzero(self.chebyshev_coeffs)
        return int(nonzero[-1]) if nonzero.size else 0

    @property
    def depth(self) -> int:
        """ Levels consumed by the encrypted evaluation """
        return math.ceil(math.log2(self.effective_degree + 1))

    @property
    def on_unit_interval(self) -> bool:
        return self.interval == (-1.0, 1.0)

    def to_unit(self, x) -> np.ndarray:
        a, b = self.interval
        return (2.0 * np.asarray(x, dtype = float) - a - b) / (b - a)

    def __call__(self, x) -> np.ndarray:
        return cheb.chebval(self.to_unit(x), self.chebyshev_coeffs)

    def series(self) -> Chebyshev:
        return Chebyshev(self.chebyshev_coeffs, domain = list(self.interval))

    def derivative(self) -> 'ApproxPoly':
        """ Formal derivative in x, one degree lower """
        coeffs = self.series().deriv().coef if self.degree > 0 else np.zeros(1)
        return ApproxPoly(tuple(coeffs), self.interval, target = self.target, mode = 'derivative')

    def scaled(self, factor: float) -> 'ApproxPoly':
        return replace(
            self, coeffs = tuple(factor * c for c in self.chebyshev_coeffs),
            basis = 'chebyshev', fit_error = abs(factor) * self.fit_error
        )

    def to_config(self) -> typing.Dict[str, typing.Any]:
        return dict(
            target = self.target, mode = self.mode, basis = self.basis,
            interval = list(self.interval), coeffs = list(self.coeffs),
            degree = self.degree, fit_error = self.fit_error
        )

    @classmethod
    def from_config(cls, config: typing.Mapping[str, typing.Any]) -> 'ApproxPoly':
        try:
            return cls(
                coeffs = tuple(config['coeffs']),
                interval = tuple(config.get('interval', (-1.0, 1.0))),
                basis = config.get('basis', 'chebyshev'),
                target = config.get('target', 'custom'),
                mode = config.get('mode', 'value'),
                fit_error = float(config.get('fit_error', 0.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ApproximationError(f'Bad polynomial config: {e}') from e


def bsgs_mul_count(degree: int) -> int:
    """ Ciphertext multiplications of the baby-step giant-step evaluation """
    m = math.ceil(math.log2(degree + 1))
    kappa = m // 2
    return 2 ** kappa + m - kappa - 3 + math.ceil((degree + 1) / 2 ** kappa)


# Fitting

def _resolve(target) -> typing.Tuple[str, typing.Callable[[np.ndarray], np.ndarray]]:
    if callable(target):
        return getattr(target, '__name__', 'custom'), target
    name = canonical_name(target)
    return name, TARGETS[name]


def _check(interval, degree: int) -> typing.Tuple[float, float]:
    a, b = (float(v) for v in interval)
    if not b > a:
        raise ApproximationError(f'Empty interval {interval}')
    if not 0 <= degree <= MAX_DEGREE:
        raise ApproximationError(f'{degree=} outside 0..{MAX_DEGREE}')
    return a, b


def grid_error(poly: ApproxPoly, fn: typing.Callable[[np.ndarray], np.ndarray]) -> float:
    x = np.linspace(*poly.interval, GRID_POINTS)
    err = np.abs(poly(x) - fn(x))
    err = err[np.isfinite(err)]
    return float(err.max()) if err.size else math.nan


def _finish(name: str, fn, coeffs: np.ndarray, interval, mode: str = 'value') -> ApproxPoly:
    coeffs = np.array(coeffs, dtype = float)
    cutoff = COEFF_CUTOFF * np.abs(coeffs).max(initial = 0.0)
    coeffs[np.abs(coeffs) < cutoff] = 0.0
    poly = ApproxPoly(tuple(coeffs), tuple(interval), target = name, mode = mode)
    return replace(poly, fit_error = grid_error(poly, fn))


def fit_least_squares(target, interval = DEFAULT_INTERVAL, degree: int = 3) -> ApproxPoly:
    """ Discrete least squares on a uniform grid, Chebyshev basis """
    name, fn = _resolve(target)
    a, b = _check(interval, degree)
    x = np.linspace(a, b, FIT_POINTS)
    series, (_, rank, _, _) = Chebyshev.fit(x, fn(x), degree, domain = [a, b], full = True)
    if rank < degree + 1:
        raise ApproximationError(f'Least squares fit of {name} is rank deficient at {degree=} ({rank=})')
    return _finish(name, fn, series.coef, (a, b))


def fit_chebyshev(target, interval = DEFAULT_INTERVAL, degree: int = 3) -> ApproxPoly:
    """
    Truncated Chebyshev expansion, close to minimax. The coefficients are
    read off an oversampled interpolant, so a square root singularity at an
    endpoint costs only the tail of the series: 2 / (pi (2 degree + 1)) for
    sqrt on [0, 1], against 1 / (2 degree + 2) for plain interpolation.
    """
    name, fn = _resolve(target)
    a, b = _check(interval, degree)
    series = Chebyshev.interpolate(fn, EXPANSION_DEGREE, domain = [a, b]).truncate(degree + 1)
    return _finish(name, fn, series.coef, (a, b))


FITTERS = {
    'least_squares': fit_least_squares,
    'chebyshev': fit_chebyshev,
}


def _sqrt_relu(interval, fitter) -> ApproxPoly:
    """ 0.5 * (x + sqrt(x^2)) with a low degree square root, expanded in x """
    a, b = interval
    reach = max(abs(a), abs(b))
    inner = fitter('sqrt', (0.0, reach * reach), SQRT_RELU_INNER_DEGREE)
    composed = Chebyshev.interpolate(
        lambda x: 0.5 * (x + inner(x * x)), 2 * SQRT_RELU_INNER_DEGREE, domain = [a, b]
    )
    return _finish('sqrt_relu', _relu, composed.coef, (a, b))


def activation(
    name: str,
    mode: str = 'value',
    degree: int = 3,
    interval = DEFAULT_INTERVAL,
    method: str = 'least_squares'
) -> ApproxPoly:
    """
    Fitted activation (mode='value') or its derivative (mode='derivative').
    Derivatives are formal derivatives of the fit, except softplus whose
    derivative is a fresh sigmoid fit one degree lower.
    """
    key = canonical_name(name)
    if method not in FITTERS:
        raise ApproximationError(f'Unknown fitting method {method!r}')
    if mode not in ('value', 'derivative'):
        raise ApproximationError(f'Unknown activation mode {mode!r}')
    fitter = FITTERS[method]

    if key == 'softplus' and mode == 'derivative':
        return replace(fitter('sigmoid', interval, max(degree - 1, 1)), mode = 'derivative')

    if key == 'square':
        value = fit_chebyshev('square', interval, 2)
    elif key == 'identity':
        value = fit_chebyshev('identity', interval, 1)
    elif key == 'sqrt_relu':
        value = _sqrt_relu(interval, fitter)
    else:
        value = fitter(key, interval, degree)

    if mode == 'value':
        return value
    deriv = value.derivative()
    fn = DERIVATIVES.get(key)
    return replace(deriv, fit_error = grid_error(deriv, fn) if fn is not None else math.nan)


# Encrypted evaluation

class _BabyGiant(typing.Generic[CT]):
    """
    Chebyshev baby-step giant-step evaluation. Baby steps T_1..T_B with
    B = 2^floor(m / 2), giant steps T_2B, T_4B, .. and recursive division
    p = q + T_n * r. The leaf multiplied by every giant step uses a
    pre-scaled T_3 so the whole evaluation stays at depth m.

    Powers may sit off their canonical scale (T_1 does when the interval map
    was folded into its scale). Each branch is evaluated at a deviation `dev`
    from the canonical scale, and the leaf constants absorb what the giant
    steps above them carry, so the result lands back on the canonical scale.
    """

    def __init__(self, ev: Evaluator[CT], t: CT, coeffs: np.ndarray) -> None:
        self.ev = ev
        degree = len(coeffs) - 1
        self.m = math.ceil(math.log2(degree + 1))
        self.baby = 2 ** (self.m // 2)
        self.coeffs = np.zeros(2 ** self.m)
        self.coeffs[: degree + 1] = coeffs
        self.cutoff = COEFF_CUTOFF * np.abs(coeffs).max()
        self.T: typing.Dict[int, CT] = {1: t}
        self.t3_factor = 1.0

    def _deviation(self, ct: CT) -> float:
        return ct.scale / self.ev.canonical_scale(ct.level)

    def _scale(self, level: int, dev: float) -> float:
        return self.ev.canonical_scale(level) * dev

    def _double(self, x: CT) -> CT:
        """ T_2n = 2 T_n^2 - 1 """
        ev = self.ev
        return ev.add_const(ev.mul_int(ev.res(ev.mul_ct(x, x)), 2), -1.0)

    def _top_leaf(self) -> np.ndarray:
        c = self.coeffs
        while len(c) > self.baby:
            _, c = self._divide(c)
        return c

    def _top_dev(self) -> float:
        """ Deviation the top leaf is evaluated at """
        dev, n = 1.0, len(self.coeffs)
        while n > self.baby:
            n //= 2
            dev /= self._deviation(self.T[n])
        return dev

    def _powers(self) -> None:
        ev, T = self.ev, self.T
        T[2] = self._double(T[1])
        n = 2
        if self.baby == 4:
            T[4] = self._double(T[2])
            n = 4
        while 2 * n < len(self.coeffs):
            T[2 * n] = self._double(T[n])
            n *= 2
        if self.baby == 4:
            e = self._top_leaf()[3]
            if abs(e) <= self.cutoff:
                e = 1.0
            self.t3_factor = e
            # e * T_3 = 2 (e T_1) T_2 - e T_1, landing at the top leaf's deviation
            if e == 1.0:
                et1 = T[1]
            else:
                q = ev.params.modulus_chain[T[2].level]
                scale = self._scale(T[2].level - 1, self._top_dev()) * q / T[2].scale
                et1 = ev.mul_const(T[1], e, scale = scale)
            T[3] = ev.sub(ev.mul_int(ev.res(ev.mul_ct(et1, T[2])), 2), et1)

    @staticmethod
    def _divide(c: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
        """ c = low + T_n * high with n = len(c) / 2 """
        n = len(c) // 2
        high = c[n:].copy()
        high[1:] *= 2.0
        low = c[:n].copy()
        low[1:] -= c[2 * n - 1: n: -1]
        return low, high

    def _leaf(self, c: np.ndarray, top: bool, dev: float) -> typing.Union[CT, float]:
        ev = self.ev
        acc = None
        for i in range(len(c) - 1, 0, -1):
            ci = float(c[i])
            if abs(ci) <= self.cutoff:
                continue
            base = self.T[i]
            if i == 3 and top and ci == self.t3_factor:
                term = base
            else:
                factor = self.t3_factor if i == 3 else 1.0
                term = ev.mul_const(base, ci / factor, scale = self._scale(base.level - 1, dev))
            acc = term if acc is None else ev.add(acc, term)
        c0 = float(c[0]) if abs(c[0]) > self.cutoff else 0.0
        if acc is None:
            return c0
        return ev.add_const(acc, c0) if c0 != 0.0 else acc

    def _product(self, giant: CT, r: CT, dev: float) -> CT:
        """ giant * r at the lower of their levels, rescaled onto dev """
        ev = self.ev
        level = min(giant.level, r.level)
        q = ev.params.modulus_chain[level]
        target = self._scale(level - 1, dev) * q
        if giant.level > level:
            giant = ev.bring_down(giant, level, target / r.scale)
        elif r.level > level:
            r = ev.bring_down(r, level, target / giant.scale)
        return ev.res(ev.mul_ct(giant, r))

    def _eval(self, c: np.ndarray, top: bool, dev: float) -> typing.Union[CT, float]:
        if len(c) <= self.baby:
            return self._leaf(c, top, dev)
        low, high = self._divide(c)
        giant = self.T[len(c) // 2]
        q = self._eval(low, False, dev)
        r = self._eval(high, top, dev / self._deviation(giant))
        ev = self.ev
        if isinstance(r, float):
            prod = ev.mul_const(giant, r, scale = self._scale(giant.level - 1, dev)) if r != 0.0 else None
        else:
            prod = self._product(giant, r, dev)
        if prod is None:
            return q
        if isinstance(q, float):
            return ev.add_const(prod, q) if q != 0.0 else prod
        return ev.add(q, prod)

    def run(self) -> typing.Union[CT, float]:
        if len(self.coeffs) <= 2:
            return self._leaf(self.coeffs, False, 1.0)
        self._powers()
        return self._eval(self.coeffs, True, 1.0)


def fold_interval(ev: Evaluator[CT], ct: CT, interval: typing.Tuple[float, float]) -> CT:
    """
    t = (2x - a - b) / (b - a) without a level: the slope goes into the
    scale label and the offset is a plain addition.
    """
    a, b = interval
    ct = ev.relabel(ct, (b - a) / 2.0)
    offset = -(a + b) / (b - a)
    return ev.add_const(ct, offset) if offset != 0.0 else ct


def eval_poly_encrypted(ev: Evaluator[CT], ct: CT, poly: ApproxPoly, prepared: bool = False) -> CT:
    """
    Evaluate poly on every slot of ct, consuming exactly poly.depth levels.
    With prepared=True ct already holds t. Otherwise the map onto [-1, 1] is
    folded into the scale; the powers of t then carry the slope's growth
    through the modulus, so wide intervals at high degree lose precision on
    the lattice backend and are better mapped ahead of time.
    """
    coeffs = poly.chebyshev_coeffs
    degree = poly.effective_degree
    if degree > MAX_DEGREE:
        raise ApproximationError(f'{degree=} exceeds {MAX_DEGREE}')
    need = max(poly.depth, 1)
    if ct.level < need:
        raise LevelExhaustedError(
            f'Polynomial of {degree=} needs {need} levels but the input is at level {ct.level}; bootstrap first'
        )
    if not (prepared or poly.on_unit_interval):
        a, b = poly.interval
        spent = (2 ** need - 1) * abs(math.log2((b - a) / 2.0))
        if spent > math.log2(ev.canonical_scale(ct.level)) - FOLD_MARGIN_BITS:
            ez.logger.warning(
                f'Folding {poly.interval} into a degree {degree} evaluation spends {spent:.0f} bits of scale'
            )
        ct = fold_interval(ev, ct, poly.interval)

    if degree == 0:
        return ev.add_const(ev.mul_const(ct, 0.0), float(coeffs[0]))
    out = _BabyGiant(ev, ct, coeffs[: degree + 1]).run()
    if isinstance(out, float):
        return ev.add_const(ev.mul_const(ct, 0.0), out)
    return out


def _peek(ct) -> typing.Optional[np.ndarray]:
    """ Slot values when the backend keeps them in the clear """
    return getattr(ct, 'values', None)


def approx_max(ev: Evaluator[CT], a: CT, b: CT, sqrt_poly: ApproxPoly) -> CT:
    """
    max(a, b) = (a + b) / 2 + sqrt((a - b)^2) / 2 with the square root
    approximated by sqrt_poly over its interval [lo, hi].
    """
    lo, hi = sqrt_poly.interval
    va, vb = _peek(a), _peek(b)
    if va is not None and vb is not None:
        span = float(np.max((va - vb) ** 2))
        if span > hi:
            ez.logger.warning(f'approx_max inputs leave the square root interval: {span=} {hi=}')

    diff = ev.sub(a, b)
    sq = ev.res(ev.mul_ct(diff, diff))
    slope = 2.0 / (hi - lo)
    if slope >= 1.0 and slope.is_integer() and (int(slope) & (int(slope) - 1)) == 0:
        t = ev.mul_int(sq, int(slope))
    else:
        t = ev.mul_const(sq, slope)
    t = ev.add_const(t, -(hi + lo) / (hi - lo))
    half_root = eval_poly_encrypted(ev, t, sqrt_poly.scaled(0.5), prepared = True)
    half_sum = ev.mul_const(ev.add(a, b), 0.5)
    return ev.add(half_sum, half_root)


def max_pool(
    ev: Evaluator[CT],
    ct: CT,
    width: int,
    kernel: int,
    sqrt_poly: ApproxPoly,
    refresh: Refresher
) -> CT:
    """
    Windowed max over a row-major image of the given width. The maximum of
    each kernel x kernel window lands on its top-left slot after log2(kernel^2)
    rounds, each refreshed since a round consumes the usable levels.
    """
    if kernel < 1 or kernel & (kernel - 1):
        raise ApproximationError(f'{kernel=} must be a power of two')
    offsets = []
    step = 1
    while step < kernel:
        offsets.append(step)
        step *= 2
    offsets = offsets + [o * width for o in offsets]
    for offset in offsets:
        ct = approx_max(ev, ct, ev.rot_l(ct, offset), sqrt_poly)
        ct = refresh(ct)
        ez.logger.debug(f'Max pool round {offset=} done at level {ct.level}')
    return ct
