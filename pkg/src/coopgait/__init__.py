"""Cooperative locomotion of two legged agents joined by a rigid bar.

Submodules: ``model`` (kinematic trees), ``dynamics`` (constrained dynamics
and impacts), ``hybrid`` (gait graphs and the event-driven executor),
``gait`` (periodic reference trajectories), ``control`` (nominal and
distributed controllers), ``qp``, ``analysis`` (return maps, audits) and
``cli``.
"""

__version__ = "0.1.0"
