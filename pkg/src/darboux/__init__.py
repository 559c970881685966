"""Solver and hypothesis checker for overdetermined first-order systems
``r_i(u_alpha) = f_i^alpha(x, u)`` with data on transversal manifolds."""

__version__ = "0.1.0"
