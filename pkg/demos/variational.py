"""Pressure, relative entropy rate and the variational principle on a chain.

For nu the beta=0.5 Ising chain and f = s_0 s_1, the pressure equals the
best value of mu(f) - h(mu|nu) over Markov chains mu.  Product trials fall
short.
"""

import numpy as np

from renormlab.engines import MarkovChain1D
from renormlab.lattice import Interaction, spin_product
from renormlab.thermo import entropy_density_series, legendre_gap, markov_entropy_rate

nu = MarkovChain1D.gibbs(Interaction(1, 0, 0.5))
mu = MarkovChain1D.gibbs(Interaction(1, 0, 1.0))
f = spin_product([(0,), (1,)])

series = entropy_density_series(mu, nu, 8)
print("H per site:", np.round(series.per_site, 6))
print("increments:", np.round(series.increments[1:], 6))
print("rate      :", round(markov_entropy_rate(mu, nu), 6))

for family in ("markov1", "product"):
    res = legendre_gap(f, nu, family=family)
    print(f"{family:8s} pressure {res.pressure:.9f} best {res.best_trial_value:.9f} gap {res.gap:.2e}")
