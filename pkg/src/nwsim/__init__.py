"""nwsim: semi-empirical tight-binding + NEGF simulator for gated nanowires."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    basis,
    electrostatics,
    geometry,
    hamiltonian,
    outputs,
    runner,
    scf,
    sktable,
    transport,
    twocenter,
    units,
)
