"""Order-fixed streaming moments (mean and central moments up to order four)."""

import numpy as np

Z3 = 3.0  # pass/fail threshold in standard errors


class RunningMoments:
    """Per-element sample moments of an array-valued quantity.

    Batches are merged with the pairwise update formulas of Pebay (2008), so the
    result depends only on the batch sequence, never on the thread that
    produced a batch.
    """

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)
        self.m3 = np.zeros(shape)
        self.m4 = np.zeros(shape)

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=float)
        out = cls(samples.shape[1:])
        n = samples.shape[0]
        if n == 0:
            return out
        mean = samples.mean(axis=0)
        d = samples - mean
        d2 = d * d
        out.count = n
        out.mean = mean
        out.m2 = d2.sum(axis=0)
        out.m3 = (d2 * d).sum(axis=0)
        out.m4 = (d2 * d2).sum(axis=0)
        return out

    def merge(self, other):
        na, nb = self.count, other.count
        if nb == 0:
            return self
        if na == 0:
            self.count, self.mean, self.m2, self.m3, self.m4 = (
                nb, other.mean.copy(), other.m2.copy(), other.m3.copy(), other.m4.copy()
            )
            return self
        n = na + nb
        delta = other.mean - self.mean
        d_n = delta / n
        m2 = self.m2 + other.m2 + delta * d_n * na * nb
        m3 = (
            self.m3 + other.m3
            + delta * d_n * d_n * na * nb * (na - nb)
            + 3.0 * d_n * (na * other.m2 - nb * self.m2)
        )
        m4 = (
            self.m4 + other.m4
            + delta * d_n**3 * na * nb * (na * na - na * nb + nb * nb)
            + 6.0 * d_n * d_n * (na * na * other.m2 + nb * nb * self.m2)
            + 4.0 * d_n * (na * other.m3 - nb * self.m3)
        )
        self.mean = self.mean + d_n * nb
        self.m2, self.m3, self.m4 = m2, m3, m4
        self.count = n
        return self

    def variance(self):
        """Unbiased sample variance."""
        return self.m2 / max(self.count - 1, 1)

    def std_error(self):
        """Standard error of the mean."""
        return np.sqrt(self.variance() / max(self.count, 1))

    def variance_std_error(self):
        """Large-sample standard error of the sample variance."""
        n = max(self.count, 1)
        mu2 = self.m2 / n
        mu4 = self.m4 / n
        return np.sqrt(np.maximum(mu4 - mu2 * mu2, 0.0) / n)
