"""Physical constants and conventions shared by every module."""

# CODATA 2018, SI units.
HBAR = 1.054571817e-34  # J s
C_LIGHT = 2.99792458e8  # m / s
M_NUCLEON = 1.67262192e-27  # kg, proton mass used as the nucleon reference

# Weight of a delta function sitting on the endpoint of an integration
# interval: int_0^t delta(t - tau) f(tau) dtau = DELTA_ENDPOINT_WEIGHT * f(t).
# Memory integrals, decoherence exponents, F and the HPZ coefficients all use
# this single value so that their predictions stay mutually consistent.
DELTA_ENDPOINT_WEIGHT = 0.5

DEFAULT_SEED = 0x5EED

HERMITIAN_ATOL = 1e-12
COMMUTATION_TOL = 1e-10
