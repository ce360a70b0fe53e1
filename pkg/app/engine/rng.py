from typing import Sequence, Tuple, Union

import numpy as np

Shape = Union[int, Tuple[int, ...]]


class Rng:
    """Seeded random source on numpy's counter-based Philox generator.

    Normal draws use Box-Muller on the generator's uniforms so the sequence does
    not depend on numpy's normal sampling algorithm. Children derived with
    `child(*keys)` are independent streams fixed by (seed, *keys).
    """

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys]
        self._generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    def uniform(self, size: Shape = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def normal(self, size: Shape = (), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        # 1 - U lies in (0, 1], keeping the log finite
        u1 = 1.0 - self._generator.random(pairs)
        u2 = self._generator.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def beta(self, a: float, b: float, size: Shape = ()) -> np.ndarray:
        return self._generator.beta(a, b, size)
