"""Per-trial random streams.

Every trial owns a xoshiro256** stream whose 256-bit state is derived from
``(master_seed, trial_index, sub)`` through splitmix64 hashing, so a trial's
draws never depend on which worker ran it or on how many trials ran before.
The generator state is a ``uint64[4]`` array that the jitted kernels mutate
in place.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / 9007199254740992.0


# -- python-int reference implementation (also the no-numba path) ----------

def _splitmix64_py(x):
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _rotl_py(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def _next_u64_py(s):
    s0, s1, s2, s3 = int(s[0]), int(s[1]), int(s[2]), int(s[3])
    result = (_rotl_py((s1 * 5) & MASK64, 7) * 9) & MASK64
    t = (s1 << 17) & MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl_py(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3
    return result


def _trial_key_py(master, index, sub):
    k = _splitmix64_py(int(master) & MASK64)
    k = _splitmix64_py(k ^ (int(index) & MASK64))
    return _splitmix64_py(k ^ ((int(sub) * _GOLDEN) & MASK64))


def _seed_state_py(key, s):
    x = int(key) & MASK64
    for i in range(4):
        s[i] = _splitmix64_py(x)
        x = (x + _GOLDEN) & MASK64


def _uniform_py(s):
    return (_next_u64_py(s) >> 11) * _INV_2_53


# -- uint64 implementation for numba ----------------------------------------
# Helpers below call the module-level names, which numba resolves to the
# jitted versions at compile time.

_U_GOLDEN = np.uint64(_GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)


def _splitmix64_nb(x):
    z = x + _U_GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _U_M1
    z = (z ^ (z >> np.uint64(27))) * _U_M2
    return z ^ (z >> np.uint64(31))


def _next_u64_nb(s):
    s1 = s[1]
    x = s1 * np.uint64(5)
    result = ((x << np.uint64(7)) | (x >> np.uint64(57))) * np.uint64(9)
    t = s1 << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s3 = s[3]
    s[3] = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    return result


def _trial_key_nb(master, index, sub):
    k = splitmix64(np.uint64(master))
    k = splitmix64(k ^ np.uint64(index))
    return splitmix64(k ^ (np.uint64(sub) * _U_GOLDEN))


def _seed_state_nb(key, s):
    x = np.uint64(key)
    for i in range(4):
        s[i] = splitmix64(x)
        x = x + _U_GOLDEN


def _uniform_nb(s):
    return np.float64(next_u64(s) >> np.uint64(11)) * _INV_2_53


if USE_NUMBA:
    splitmix64 = njit(_splitmix64_nb)
    next_u64 = njit(_next_u64_nb)
    trial_key = njit(_trial_key_nb)
    seed_state = njit(_seed_state_nb)
    uniform = njit(_uniform_nb)
else:
    splitmix64 = _splitmix64_py
    next_u64 = _next_u64_py
    trial_key = _trial_key_py
    seed_state = _seed_state_py
    uniform = _uniform_py


@njit(inline="always")
def uniform_open(s):
    """Uniform on the open interval (0, 1)."""
    u = uniform(s)
    while u == 0.0:
        u = uniform(s)
    return u


# -- standard normals: ziggurat with 128 layers ------------------------------

def _zig_tables(c=128, r=3.442619855899, v=9.91256303526217e-3):
    x = np.zeros(c + 1)
    f = math.exp(-0.5 * r * r)
    x[0] = v / f
    x[1] = r
    for i in range(2, c):
        x[i] = math.sqrt(-2.0 * math.log(v / x[i - 1] + f))
        f = math.exp(-0.5 * x[i] * x[i])
    ratio = x[1:] / x[:-1]
    return x, ratio


_ZIG_X, _ZIG_RATIO = _zig_tables()
_ZIG_R = 3.442619855899


@njit(inline="always")
def _normal_tail(s, negative):
    while True:
        x = math.log(uniform_open(s)) / _ZIG_R
        y = math.log(uniform_open(s))
        if -2.0 * y >= x * x:
            break
    return x - _ZIG_R if negative else _ZIG_R - x


@njit(inline="always")
def _normal_slow(s, i, u):
    zx = _ZIG_X
    zr = _ZIG_RATIO
    while True:
        if abs(u) < zr[i]:
            return u * zx[i]
        if i == 0:
            return _normal_tail(s, u < 0.0)
        x0 = u * zx[i]
        f0 = math.exp(-0.5 * (zx[i] * zx[i] - x0 * x0))
        f1 = math.exp(-0.5 * (zx[i + 1] * zx[i + 1] - x0 * x0))
        if f1 + uniform(s) * (f0 - f1) < 1.0:
            return x0
        bits = next_u64(s)
        i = int(bits & np.uint64(127))
        u = 2.0 * (np.float64(bits >> np.uint64(11)) * _INV_2_53) - 1.0


@njit(inline="always")
def normal(s):
    """Standard normal variate (ziggurat)."""
    bits = next_u64(s)
    i = int(bits & np.uint64(127))
    u = 2.0 * (np.float64(bits >> np.uint64(11)) * _INV_2_53) - 1.0
    if abs(u) < _ZIG_RATIO[i]:
        return u * _ZIG_X[i]
    return _normal_slow(s, i, u)


@njit(inline="always")
def fill_normal(s, out):
    for i in range(out.shape[0]):
        out[i] = normal(s)


@njit
def new_state(master, index, sub):
    s = np.zeros(4, dtype=np.uint64)
    seed_state(trial_key(master, index, sub), s)
    return s


@njit
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = uniform(s)


@njit
def _fill_normal_flat(s, out):
    fill_normal(s, out)


class Stream:
    """A reproducible random stream for one trial (or one sub-task of it).

    Parameters
    ----------
    master_seed, index, sub : int
        Stream identity.  Two streams with the same triple produce the same
        draws; any other triple gives an independent-looking stream.
    """

    def __init__(self, master_seed=0, index=0, sub=0):
        self.master_seed = int(master_seed)
        self.index = int(index)
        self.sub = int(sub)
        self.state = np.zeros(4, dtype=np.uint64)
        _seed_state_py(_trial_key_py(self.master_seed, self.index, self.sub), self.state)

    @property
    def tag(self):
        return (self.master_seed, self.index, self.sub)

    def spawn(self, sub):
        """Independent child stream sharing this stream's (master, index)."""
        return Stream(self.master_seed, self.index, self.sub * 1_000_003 + int(sub) + 1)

    def uniform(self, size=None):
        if size is None:
            return float(uniform(self.state))
        out = np.empty(int(np.prod(size)), dtype=np.float64)
        _fill_uniform(self.state, out)
        return out.reshape(size)

    def normal(self, size=None):
        if size is None:
            return float(normal(self.state))
        out = np.empty(int(np.prod(size)), dtype=np.float64)
        _fill_normal_flat(self.state, out)
        return out.reshape(size)

    def __repr__(self):
        return f"Stream(master_seed={self.master_seed}, index={self.index}, sub={self.sub})"


def as_stream(rng):
    """Accept a :class:`Stream`, an int seed, or ``None``."""
    if isinstance(rng, Stream):
        return rng
    if rng is None:
        return Stream(0)
    return Stream(int(rng))
