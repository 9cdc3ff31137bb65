"""Package-wide statistical tolerance conventions.

Almost-sure identities are only testable through Monte Carlo surrogates, so
every check in this package reports a violation magnitude together with a
tolerance of the form

    max(3 * bootstrap_SE, ABS_FLOOR * scale)

where the bootstrap resamples paths. Checks against inequalities that hold
with strict slack additionally allow the declared regression tolerance
REGRESSION_RTOL, the package-level figure for relative projection error of
the regression schemes at desk-scale ensemble sizes.
"""

N_BOOTSTRAP = 200
ABS_FLOOR = 1e-6
REGRESSION_RTOL = 1e-2
