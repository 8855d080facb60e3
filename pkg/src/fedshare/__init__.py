"""Performance models and a sharing market for federations of small clouds.

The package has three tiers:

* ``ctmc`` -- generic sparse continuous-time Markov chain machinery
  (steady state, uniformization, transient analysis).
* ``solo`` / ``detailed`` / ``layered`` / ``simulate`` -- performance models
  of a federation of small clouds under SLA-driven forwarding, from the
  single-cloud baseline up to the hierarchical approximation, plus a
  discrete-event simulator used as the reference oracle.
* ``market`` -- the economic layer: operating cost, sharing utility, the
  repeated best-response game, alpha-fair welfare and price sweeps.

``cli`` exposes the scenario-driven command line front end.
"""

from .clouds import FederationSpec, PerfEstimates, SmallCloudSpec, SolverSettings

__all__ = [
    "SmallCloudSpec",
    "FederationSpec",
    "PerfEstimates",
    "SolverSettings",
]

__version__ = "0.1.0"
