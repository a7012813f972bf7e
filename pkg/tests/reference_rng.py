"""Independent SplitMix64 used only as a test oracle.

Written from the published algorithm with plain modular arithmetic, without
sharing any code with the package.
"""

M = 2 ** 64


def splitmix64_outputs(seed, count):
    state = seed % M
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) % M
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % M
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % M
        out.append(z ^ (z >> 31))
    return out


def fisher_yates(n, seed):
    stream = iter(splitmix64_outputs(seed, max(n - 1, 0)))
    a = list(range(n))
    i = n - 1
    while i >= 1:
        j = next(stream) % (i + 1)
        a[i], a[j] = a[j], a[i]
        i -= 1
    return a


# Published SplitMix64 outputs for seed 0 (Vigna's reference generator).
SEED0_REFERENCE = [
    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F, 0xF88BB8A8724C81EC,
    0x1B39896A51A8749B, 0x53CB9F0C747EA2EA, 0x2C829ABE1F4532E1, 0xC584133AC916AB3C,
    0x3EE5789041C98AC3, 0xF3B8488C368CB0A6,
]
