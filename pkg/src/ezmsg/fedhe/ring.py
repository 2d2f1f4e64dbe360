import typing
import functools

import numpy as np
import sympy

from .params import RingParams, MAX_MODULUS_BITS
from .errors import ScaleOverflowError

DIGIT_BITS = 21
DIGIT_MASK = (1 << DIGIT_BITS) - 1
DIGITS_PER_PRIME = -(-MAX_MODULUS_BITS // DIGIT_BITS)


def mulmod(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    """ a * b mod q for int64 residues below 2^42, splitting b in 21-bit halves """
    hi = ((a * (b >> DIGIT_BITS)) % q) << DIGIT_BITS
    return (hi % q + (a * (b & DIGIT_MASK)) % q) % q


def _powers(base: int, count: int, q: int) -> typing.List[int]:
    out = [1]
    for _ in range(count - 1):
        out.append(out[-1] * base % q)
    return out


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype = np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class NTTTables:
    """ Negacyclic NTT over several primes at once; rows of the input select primes """

    def __init__(self, ring_dim: int, moduli: typing.Sequence[int]) -> None:
        N = ring_dim
        self.ring_dim = N
        self.moduli = tuple(int(q) for q in moduli)
        self.q = np.array(self.moduli, dtype = np.int64)[:, None]

        psi_pows, psi_inv_pows, omega_pows, omega_inv_pows, n_inv = [], [], [], [], []
        for q in self.moduli:
            g = int(sympy.primitive_root(q))
            psi = pow(g, (q - 1) // (2 * N), q)
            psi_inv = pow(psi, -1, q)
            psi_pows.append(_powers(psi, N, q))
            psi_inv_pows.append(_powers(psi_inv, N, q))
            omega_pows.append(_powers(psi * psi % q, N // 2, q))
            omega_inv_pows.append(_powers(psi_inv * psi_inv % q, N // 2, q))
            n_inv.append(pow(N, -1, q))

        self.psi_pows = np.array(psi_pows, dtype = np.int64)
        self.psi_inv_pows = np.array(psi_inv_pows, dtype = np.int64)
        self.omega_pows = np.array(omega_pows, dtype = np.int64)
        self.omega_inv_pows = np.array(omega_inv_pows, dtype = np.int64)
        self.n_inv = np.array(n_inv, dtype = np.int64)[:, None]
        self.bitrev = _bit_reverse(N)

    def forward(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        q = self.q[rows]
        x = mulmod(a, self.psi_pows[rows], q)
        return self._transform(x, self.omega_pows[rows], q)

    def inverse(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        q = self.q[rows]
        x = self._transform(a, self.omega_inv_pows[rows], q)
        x = mulmod(x, self.n_inv[rows], q)
        return mulmod(x, self.psi_inv_pows[rows], q)

    def _transform(self, x: np.ndarray, twiddles: np.ndarray, q: np.ndarray) -> np.ndarray:
        N = self.ring_dim
        x = x[..., self.bitrev]
        lead = x.shape[:-1]
        q3 = q[:, :, None]
        m = 2
        while m <= N:
            half = m // 2
            tw = twiddles[:, :: N // m][:, :half][:, None, :]
            x = x.reshape(lead + (N // m, m))
            u = x[..., :half]
            v = mulmod(x[..., half:], tw, q3)
            x = np.concatenate([(u + v) % q3, (u - v) % q3], axis = -1)
            m *= 2
        return x.reshape(lead + (N,))


class SlotEncoder:
    """ Canonical embedding restricted to the 5^j orbit; slot j sits at zeta^(5^j) """

    def __init__(self, ring_dim: int) -> None:
        self.ring_dim = ring_dim
        self.slots = ring_dim // 2
        self.rot_group = np.array(
            _powers(5, self.slots, 2 * ring_dim), dtype = np.int64
        )

    def embed(self, coeffs: np.ndarray) -> np.ndarray:
        """ Real coefficients to complex slot values """
        N = self.ring_dim
        padded = np.concatenate([np.asarray(coeffs, dtype = float), np.zeros(N)])
        evals = np.fft.ifft(padded) * (2 * N)
        return evals[self.rot_group]

    def unembed(self, values: np.ndarray) -> np.ndarray:
        """ Slot values to real coefficients """
        N = self.ring_dim
        spectrum = np.zeros(2 * N, dtype = complex)
        spectrum[self.rot_group] = values
        spectrum[2 * N - self.rot_group] = np.conj(values)
        return np.fft.fft(spectrum)[:N].real / N

    def galois(self, offset: int) -> int:
        """ Galois element that rotates slots left by offset """
        return pow(5, offset % self.slots, 2 * self.ring_dim)


class RNSRing:
    """
    Polynomials of Z[X]/(X^N + 1) held as residue rows, one row per prime.
    Row i < len(chain) is q_i; the last row index is the key-switching prime.
    Arrays are kept in coefficient form.
    """

    def __init__(self, params: RingParams) -> None:
        self.params = params
        self.N = params.ring_dim
        self.moduli = tuple(params.modulus_chain) + (params.special_prime,)
        self.special_row = len(params.modulus_chain)
        self.tables = NTTTables(self.N, self.moduli)
        self.encoder = SlotEncoder(self.N)

    def rows(self, level: int, special: bool = False) -> np.ndarray:
        rows = list(range(level + 1))
        if special:
            rows.append(self.special_row)
        return np.array(rows, dtype = np.int64)

    def q(self, rows: np.ndarray) -> np.ndarray:
        return self.tables.q[rows]

    def add(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return (a + b) % self.q(rows)

    def sub(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return (a - b) % self.q(rows)

    def neg(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return (-a) % self.q(rows)

    def ntt(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return self.tables.forward(a, rows)

    def intt(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return self.tables.inverse(a, rows)

    def mul(self, a: np.ndarray, b: np.ndarray, rows: np.ndarray) -> np.ndarray:
        q = self.q(rows)
        return self.intt(mulmod(self.ntt(a, rows), self.ntt(b, rows), q), rows)

    def mul_int(self, a: np.ndarray, k: int, rows: np.ndarray) -> np.ndarray:
        """ Multiply by an arbitrary (possibly huge or negative) integer """
        factors = np.array([int(k) % self.moduli[r] for r in rows], dtype = np.int64)[:, None]
        return mulmod(a, factors, self.q(rows))

    def from_small(self, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """ Signed int64 coefficients """
        return np.asarray(values, dtype = np.int64)[None, :] % self.q(rows)

    def from_big(self, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """ Arbitrary Python integer coefficients """
        values = np.asarray(values, dtype = object)
        return np.stack([
            (values % self.moduli[r]).astype(np.int64) for r in rows
        ])

    def crt(self, a: np.ndarray, rows: np.ndarray) -> typing.Tuple[np.ndarray, int]:
        """ Reconstruct integers in [0, Q) from residues """
        Q = 1
        for r in rows:
            Q *= self.moduli[r]
        acc = np.zeros(self.N, dtype = object)
        for i, r in enumerate(rows):
            q = self.moduli[r]
            Qi = Q // q
            acc = acc + a[i].astype(object) * (Qi * pow(Qi, -1, q))
        return acc % Q, Q

    def to_big(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """ Centered integer coefficients in (-Q/2, Q/2] """
        x, Q = self.crt(a, rows)
        return np.where(x > Q // 2, x - Q, x)

    def drop_last(self, a: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """ Divide by the last prime of rows with rounding, removing that row """
        last = self.moduli[rows[-1]]
        tail = a[-1]
        tail = np.where(tail > last // 2, tail - last, tail)
        head_rows = rows[:-1]
        q = self.q(head_rows)
        inv = np.array([pow(last, -1, self.moduli[r]) for r in head_rows], dtype = np.int64)[:, None]
        return mulmod((a[:-1] - tail[None, :]) % q, inv, q)

    def decompose(self, a: np.ndarray) -> np.ndarray:
        """ Base-2^21 digits of each residue row: shape (rows * DIGITS_PER_PRIME, N) """
        digits = [(a >> (DIGIT_BITS * t)) & DIGIT_MASK for t in range(DIGITS_PER_PRIME)]
        return np.stack(digits, axis = 1).reshape(-1, self.N)

    @functools.lru_cache(maxsize = None)
    def _automorphism_map(self, galois: int) -> typing.Tuple[np.ndarray, np.ndarray]:
        N = self.N
        dest = (np.arange(N) * galois) % (2 * N)
        negate = dest >= N
        return dest % N, negate

    def automorphism(self, a: np.ndarray, galois: int, rows: np.ndarray) -> np.ndarray:
        """ a(X) -> a(X^galois) """
        dest, negate = self._automorphism_map(galois)
        src = np.where(negate[None, :], (-a) % self.q(rows), a)
        out = np.empty_like(a)
        out[..., dest] = src
        return out

    def encode(self, values: np.ndarray, scale: float, rows: np.ndarray) -> np.ndarray:
        padded = np.zeros(self.N // 2, dtype = complex)
        values = np.ravel(values)
        padded[: len(values)] = values
        values = padded
        coeffs = np.rint(self.encoder.unembed(values) * scale)
        bound = np.abs(coeffs).max(initial = 0.0)
        Q = 1
        for r in rows:
            Q *= self.moduli[r]
        if bound >= Q / 2:
            raise ScaleOverflowError(f'Encoding needs {bound:.3g} but Q/2 is {Q / 2:.3g}')
        if bound < 2.0 ** 62:
            return self.from_small(coeffs.astype(np.int64), rows)
        return self.from_big(np.array([int(c) for c in coeffs], dtype = object), rows)

    def decode(self, a: np.ndarray, scale: float, rows: np.ndarray) -> np.ndarray:
        coeffs = self.to_big(a, rows).astype(float)
        return self.encoder.embed(coeffs).real / scale


def sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size = n, dtype = np.int64)


def sample_gaussian(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    bound = int(6 * sigma)
    return np.clip(np.rint(rng.normal(0.0, sigma, n)), -bound, bound).astype(np.int64)


def sample_uniform(rng: np.random.Generator, ring: RNSRing, rows: np.ndarray) -> np.ndarray:
    return rng.integers(0, ring.q(rows), size = (len(rows), ring.N), dtype = np.int64)


def sample_big_uniform(rng: np.random.Generator, n: int, bits: int) -> np.ndarray:
    """ Uniform Python integers in [0, 2^bits) """
    acc = np.zeros(n, dtype = object)
    for limb in range(-(-bits // 62)):
        acc = acc + (rng.integers(0, 2 ** 62, size = n, dtype = np.int64).astype(object) << (62 * limb))
    return acc & ((1 << bits) - 1)
