"""Deterministic RNG derivation.

Two mechanisms, both pure functions of integer keys:

* ``derive_rng`` builds a numpy PCG64 generator from a SeedSequence key.
  Used for once-per-run or once-per-epoch draws (init, shuffles, dataset
  synthesis) where construction cost does not matter.

* ``DrawStream`` is a counter-based splitmix64 stream used by the
  augmentation layer, which needs many thousands of tiny independent
  streams per training step. Draw i of stream k is mix64(k ^ mix64(i + C)),
  so any draw can be recomputed in isolation, which also keeps golden
  tests hand-steppable.

Streams are keyed by integer tags plus context ints (sample id, epoch,
variant index, ...); no generator is ever shared or advanced across call
sites.
"""

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes
# every derived stream.
TAG_TWO_MOONS = 11
TAG_SPLIT = 12
TAG_LABELED_SHUFFLE = 13
TAG_UNLABELED_SHUFFLE = 14
TAG_WEAK = 21
TAG_STRONG = 22
TAG_INIT = 31
TAG_K_CHOICE = 41
TAG_FOLD = 51
TAG_THETA0 = 61
TAG_GRAD_NOISE = 62
TAG_PROX_START = 63

_MASK64 = (1 << 64) - 1
_PHI = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_KEY_SEED = 0x5555555555555555
_COUNTER_SALT = 0x632BE59BD9B4E019
_TWO_PI = 2.0 * np.pi


def seed_sequence(*parts) -> np.random.SeedSequence:
    """Build a SeedSequence from non-negative integer key parts."""
    key = tuple(int(p) for p in parts)
    if any(p < 0 for p in key):
        raise ValueError(f"seed key parts must be non-negative, got {key}")
    return np.random.SeedSequence(key)


def derive_rng(*parts) -> np.random.Generator:
    """PCG64 generator keyed by the given integers."""
    return np.random.default_rng(seed_sequence(*parts))


def derive_int(*parts) -> int:
    """A stable 32-bit integer derived from the key, for nested seeding."""
    return int(seed_sequence(*parts).generate_state(1)[0])


# ---------------------------------------------------------------------------
# counter-based streams

def mix64(x: int) -> int:
    """splitmix64 finalizer on python ints (mod 2^64)."""
    x = (x + _PHI) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(_PHI)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
        return z ^ (z >> np.uint64(31))


def fold_key(*parts) -> int:
    """Combine integer key parts into one 64-bit stream key."""
    h = _KEY_SEED
    for p in parts:
        p = int(p)
        if p < 0:
            raise ValueError(f"seed key parts must be non-negative, got {parts}")
        h = mix64(h ^ mix64(p))
    return h


def fold_step(key: int, part) -> int:
    """Extend a folded key by one part; fold_step(fold_key(a, b), c) == fold_key(a, b, c)."""
    return mix64(key ^ mix64(int(part)))


def fold_step_arrays(key: int, *part_arrays) -> np.ndarray:
    """Vectorized fold of per-element key parts onto a shared prefix key."""
    h = np.full(len(part_arrays[0]), key, dtype=np.uint64)
    for arr in part_arrays:
        h = _mix64_array(h ^ _mix64_array(np.asarray(arr, dtype=np.uint64)))
    return h


def _u64_to_unit(u: np.ndarray) -> np.ndarray:
    # strictly inside (0, 1): 53 mantissa bits, offset by half an ulp
    return ((u >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


class DrawStream:
    """Random access into one keyed stream; draw i never depends on draw j."""

    __slots__ = ("key",)

    def __init__(self, key: int):
        self.key = int(key) & _MASK64

    def u64(self, counter) -> int:
        return mix64(self.key ^ mix64((int(counter) + _COUNTER_SALT) & _MASK64))

    def integer(self, counter, n) -> int:
        """Draw in [0, n). Modulo bias is ~n / 2^64, irrelevant here."""
        return self.u64(counter) % int(n)

    def uniform(self, counter) -> float:
        # same arithmetic as _u64_to_unit so scalar and array paths bit-match
        return ((self.u64(counter) >> 11) + 0.5) * (2.0 ** -53)

    def uniforms(self, start, n) -> np.ndarray:
        counters = (np.arange(start, start + n, dtype=np.uint64)
                    + np.uint64(_COUNTER_SALT))
        u = _mix64_array(np.uint64(self.key) ^ _mix64_array(counters))
        return _u64_to_unit(u)

    def normals(self, start, shape) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2 draws per value.

        Draw i pairs uniform counters (start + i, start + n + i), matching
        batch_normals. Small sizes take a scalar path to dodge numpy
        overhead; the values are bit-identical either way.
        """
        n = int(np.prod(shape)) if shape else 1
        if n <= 8:
            import math
            vals = [math.sqrt(-2.0 * math.log(self.uniform(start + i)))
                    * math.cos(_TWO_PI * self.uniform(start + n + i)) for i in range(n)]
            return np.array(vals).reshape(shape)
        u = self.uniforms(start, 2 * n)
        r = np.sqrt(-2.0 * np.log(u[:n]))
        return (r * np.cos(_TWO_PI * u[n:])).reshape(shape)

    def subkey(self, salt) -> int:
        return mix64(self.key ^ mix64(int(salt)))


def batch_u64(keys: np.ndarray, counter) -> np.ndarray:
    """One draw at a fixed counter from many streams at once."""
    mixed_c = np.uint64(mix64((int(counter) + _COUNTER_SALT) & _MASK64))
    return _mix64_array(keys.astype(np.uint64) ^ mixed_c)


def batch_normals(keys: np.ndarray, start, per_stream) -> np.ndarray:
    """(len(keys), per_stream) standard normals, vectorized over streams."""
    k = keys.astype(np.uint64)[:, None]
    counters = (np.arange(start, start + 2 * per_stream, dtype=np.uint64)
                + np.uint64(_COUNTER_SALT))[None, :]
    u = _u64_to_unit(_mix64_array(k ^ _mix64_array(np.broadcast_to(counters, (len(keys), 2 * per_stream)))))
    r = np.sqrt(-2.0 * np.log(u[:, :per_stream]))
    return r * np.cos(_TWO_PI * u[:, per_stream:])
