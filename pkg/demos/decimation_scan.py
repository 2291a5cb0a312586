"""Decimated Ising conditionals: a 1-D chain against a 2-D strip.

Prints the gap between plus-filled and minus-filled conditionals of the
image spin at the origin, with an alternating annulus of radius M.
"""

from renormlab.lattice import Interaction, Region, all_minus, all_plus, alternating, spin
from renormlab.renormalization import RenormalizedStrip, Transformation


def gaps(strip, region, f, Ms, d):
    out = []
    for M in Ms:
        up = strip.filled_kernel(region, alternating(d), M, all_plus(d)).expect(f)
        down = strip.filled_kernel(region, alternating(d), M, all_minus(d)).expect(f)
        out.append(up - down)
    return out


Ms = range(1, 13)
chain = RenormalizedStrip(Interaction(1, 0, 1.0), Transformation.decimation(2))
one_d = gaps(chain, Region.of([0]), spin((0,)), Ms, 1)

rows = {}
for beta in (0.2, 0.8):
    strip = RenormalizedStrip(Interaction(1, 0, beta), Transformation.decimation(2, d=2), width=4)
    rows[beta] = gaps(strip, Region.of([(0, 0), (0, 1)]), spin((0, 0)), Ms, 2)

print(f"{'M':>3} {'1-D beta=1':>12} {'strip 0.2':>12} {'strip 0.8':>12}")
for i, M in enumerate(Ms):
    print(f"{M:>3} {one_d[i]:12.3e} {rows[0.2][i]:12.3e} {rows[0.8][i]:12.3e}")

# The decimated chain is Markov, so the fill is screened off at once.  The
# cold strip remembers its fill over many columns, but a strip of finite
# width has no phase transition and the gap still decays in M.
