"""Learning-based online MPC for urban driving.

A policy network emits an 8-dimensional decision vector (a reference state
plus diagonal tracking weights) that modulates the cost of a nonlinear MPC
at every control step.  The policy is trained with soft actor-critic inside
a 2D kinematic traffic simulator.
"""

__version__ = "0.1.0"
