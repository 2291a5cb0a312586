"""A function that is continuous along every fixed direction but not at omega.

f(eta) = m/(n+m) when eta is all plus on [-n, n] and follows the tail chi^(m)
outside.  Splicing omega with a fixed tail and growing the window drives f
to 0, while the sup over tails stays near 1 at every radius.
"""

from renormlab.lattice import all_minus, alternating, cube, splice
from renormlab.quasilocality import TailFamily, chi, counterexample_f, variation_at

family = TailFamily()
F = lambda eta: counterexample_f(eta, family)  # noqa: E731

print(f"{'n':>5} {'variation':>10} {'chi(3) tail':>12} {'chi(100) tail':>14} {'minus tail':>11}")
for n in (0, 1, 10, 100, 1000):
    v = variation_at(F, family.base, n)
    along = [F(splice(family.base, sigma, cube(n))) for sigma in (chi(3), chi(100), all_minus())]
    print(f"{n:>5} {v.value:10.6f} {along[0]:12.6f} {along[1]:14.6f} {along[2]:11.1f}")

print("alternating tail at n=50:", F(splice(family.base, alternating(), cube(50))))
