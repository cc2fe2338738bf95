#!/usr/bin/env python3
"""Brute-force check of the shipped ripple fixture.

Rebuilds the 64 state frequencies of the standard schedule (60-66 GHz, two
subbands, 100 MHz guard, 80 MHz chirps), evaluates the normalized ripple
shape at each, and counts states whose SNR (13 dB minus a 10 dB-peak ripple)
is not above the 10 dB threshold. Expected: 20 below, 44 usable.
"""
import math

BAND = (60e9, 66e9)
GUARD = 100e6
CHIRP_BW = 80e6
STATES = 64
COMPONENTS = [(1.0, 275e6, 1.0), (0.2, 3.1e9, 2.7)]
PEAK_DB = 10.0
FIXED_SNR_DB = 20.0 - 7.0
THRESHOLD_DB = 10.0


def raw(f):
    return sum(a * math.sin(2 * math.pi * f / p + ph) for a, p, ph in COMPONENTS)


def main():
    width = (BAND[1] - BAND[0] - GUARD) / 2
    subbands = [(BAND[0], BAND[0] + width), (BAND[1] - width, BAND[1])]
    n = 60001
    lo, hi = subbands[0][0], subbands[1][1]
    scale = max(abs(raw(lo + (hi - lo) * i / (n - 1))) for i in range(n))

    freqs = []
    per_sub = STATES // len(subbands)
    for s_lo, s_hi in subbands:
        step = (s_hi - s_lo - CHIRP_BW) / (per_sub - 1)
        freqs += [s_lo + CHIRP_BW / 2 + i * step for i in range(per_sub)]

    snr = [FIXED_SNR_DB - PEAK_DB * max(-1.0, min(1.0, raw(f) / scale)) for f in freqs]
    below = [m for m, s in enumerate(snr) if not s > THRESHOLD_DB]
    usable = [s for s in snr if s > THRESHOLD_DB]
    print(f"below threshold: {len(below)} states {below}")
    print(f"worst usable {min(usable):.3f} dB, best unusable {max(snr[m] for m in below):.3f} dB")
    assert len(below) == 20, len(below)


if __name__ == "__main__":
    main()
