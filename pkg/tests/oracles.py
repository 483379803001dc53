"""Independent reference computations shared by the tests."""

from fractions import Fraction

MASK = (1 << 64) - 1


def pascal_row(n):
    row = [1]
    for _ in range(n):
        row = [a + b for a, b in zip([0] + row, row + [0])]
    return row


def tail_oracle(n, k):
    """P[Binomial(n, 1/2) >= k] as an exact Fraction via Pascal's triangle."""
    row = pascal_row(n)
    return Fraction(sum(row[max(k, 0):]), 2**n)


def min_k_oracle(n, fpr):
    for k in range(n + 1):
        if tail_oracle(n, k) <= Fraction(fpr):
            return k
    return None


def splitmix_scalar(seed, count):
    out = []
    state = seed & MASK
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out
