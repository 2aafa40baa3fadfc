"""Monte Carlo and finite-difference tools for mean-field forward-backward SDEs.

Modules:
    stochastic_engine: time grids, counter-based Brownian paths, empirical laws.
    meanfield_sde: McKean-Vlasov and N-particle Euler schemes.
    meanfield_bsde: regression Monte Carlo for classical and mean-field BSDEs.
    comparison_lab: comparison-principle property suites and counterexamples.
    fbsde_value: the value function, backward semigroup and DPP checks.
    nonlocal_pde: finite differences for the nonlocal PDE and growth diagnostics.
    cli_runner: scenario files and the ``mf-fbsde`` command.
"""

__version__ = "0.1.0"
