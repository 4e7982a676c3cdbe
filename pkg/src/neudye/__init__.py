"""neudye: neural dynamic equivalents for power system transient simulation.

The package splits a transmission grid into an internal study system and an
external system, learns a continuous-time neural surrogate of the external
system from boundary measurements, and replays transients with the surrogate
coupled to the internal physics model.  Sub-modules:

grid        network data model, admittance assembly, power flow, partitioning
dynamics    machine dynamics and the differential-algebraic network interface
simulator   trapezoidal transient simulation, full and hybrid
neuralnet   small dense/recurrent networks with analytic jacobians
training    continuous-time adjoint training and the discrete baseline
dp          driving-port decomposition (event-based D matrix estimation)
evaluation  scenario generation, error metrics, modal analysis
fixtures    built-in benchmark grids
cli         command line entry point
"""

from neudye.errors import NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "__version__"]
