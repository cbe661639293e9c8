#!/usr/bin/env python3
"""Independent reference for the splitmix64 generator and the stream mixer.

Prints the constants frozen into tensor_test.cpp. The uniform mapping
(u64 >> 11) * 2^-53 is exact in binary64, so the C++ side must match bit for
bit; normals go through libm (log/cos) and are compared at 1e-12.
"""
import math

MASK = (1 << 64) - 1


def splitmix64_next(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def mix(seed, tag):
    z = seed ^ ((tag * 0xD1B54A32D192ED03 + 0x8CB92BA72F3D8DD7) & MASK)
    z = (z + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def uniform(state):
    state, u = splitmix64_next(state)
    return state, (u >> 11) * 2.0**-53


def normal(state):
    state, u = splitmix64_next(state)
    u1 = ((u >> 11) + 1.0) * 2.0**-53
    state, u2 = uniform(state)
    return state, math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def main():
    s = 42
    words = []
    for _ in range(4):
        s, w = splitmix64_next(s)
        words.append(w)
    print("seed 42, first u64 words:")
    for w in words:
        print(f"  {w}ull")

    s = 42
    print("seed 42, first uniforms (exact):")
    for _ in range(3):
        s, u = uniform(s)
        print(f"  {u!r}")

    s = 7
    print("seed 7, first normals (1e-12):")
    for _ in range(3):
        s, g = normal(s)
        print(f"  {g!r}")

    print("mix oracle:")
    for seed, tag in [(0, 0), (42, 7), (0xDEADBEEF, 0x100000)]:
        print(f"  mix({seed}, {tag}) = {mix(seed, tag)}ull")


if __name__ == "__main__":
    main()
