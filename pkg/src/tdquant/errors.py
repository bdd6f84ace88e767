"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text: configuration and validation problems
exit 2, numerical failures exit 3, and an unsatisfiable bit budget exits 4.
"""

from __future__ import annotations


class TdqError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(TdqError, ValueError):
    """An argument violated a documented precondition."""


class ShapeError(TdqError, ValueError):
    """Operands have incompatible or malformed shapes."""


class PluginShapeError(ShapeError):
    """A layer plugin returned arrays of the wrong shape."""

    def __init__(self, t: int, layer: int, detail: str):
        self.t = t
        self.layer = layer
        super().__init__(f"plugin output invalid at timestep {t}, layer {layer}: {detail}")


class ConfigError(TdqError, ValueError):
    """A pipeline configuration document failed validation."""


class NumericalError(TdqError, RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


class SingularHessianError(NumericalError):
    """Cholesky factorization hit a non-positive pivot.

    ``pivot`` is the zero-based index of the failing diagonal entry.
    """

    def __init__(self, pivot: int, detail: str = ""):
        self.pivot = pivot
        msg = f"singular Hessian: non-positive pivot at index {pivot}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MissingTimestepsError(TdqError, ValueError):
    """A trace stream did not cover every required timestep."""

    def __init__(self, missing, layer: int | None = None):
        self.missing = sorted(missing)
        self.layer = layer
        where = f" for layer {layer}" if layer is not None else ""
        super().__init__(f"traces missing timesteps {self.missing}{where}")


class InfeasibleBudgetError(TdqError, RuntimeError):
    """No bit assignment satisfies the requested average-bit budget."""

    def __init__(self, target: float, closest: float):
        self.target = target
        self.closest = closest
        super().__init__(
            f"bit budget {target:g} infeasible; closest achievable average is {closest:g}"
        )
