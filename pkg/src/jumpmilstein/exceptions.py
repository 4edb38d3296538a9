class JumpMilsteinError(Exception):
    pass


class ModelError(JumpMilsteinError, ValueError):
    """Ill-formed problem data (ordering of discontinuities, non-finite values, ...)."""


class RegistryError(JumpMilsteinError, KeyError):
    def __init__(self, name, available):
        self.name = name
        self.available = tuple(available)
        super().__init__(f"unknown problem {name!r}; available: {', '.join(self.available)}")

    def __str__(self):
        return self.args[0]


class NonDegeneracyError(ModelError):
    """The diffusion coefficient vanishes at a drift discontinuity."""


class ParameterError(JumpMilsteinError, ValueError):
    pass


class InversionError(JumpMilsteinError, ArithmeticError):
    def __init__(self, y, residual):
        self.y = y
        self.residual = residual
        super().__init__(f"inverse transformation did not converge at y={y!r} (residual {residual!r})")


class BlowUpError(JumpMilsteinError, ArithmeticError):
    def __init__(self, z, dt, dw):
        self.z, self.dt, self.dw = z, dt, dw
        super().__init__(f"non-finite scheme state from z={z!r}, dt={dt!r}, dW={dw!r}")


class RunawayGridError(JumpMilsteinError, RuntimeError):
    pass


class CouplingError(JumpMilsteinError, ValueError):
    """Trajectories compared against each other were driven by different noise."""


class ConfigError(JumpMilsteinError, ValueError):
    pass


class ExperimentFailure(JumpMilsteinError, RuntimeError):
    pass
