"""Monolithic 2D solver for coupled free flow and poroelasticity with
weakly enforced interfacial mass conservation."""

__version__ = "0.1.0"
