class LabError(Exception):
    """Base class for failures raised by the numerical lab."""

    exit_code = 1


class ConstraintError(LabError, ValueError):
    """A precondition or lemma hypothesis was violated.

    ``constraint`` carries the violated condition written the way it is
    reported to the user, e.g. ``"2 < q"``.
    """

    exit_code = 2

    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        self.detail = detail
        message = f"constraint violated: {constraint}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GridError(ConstraintError):
    """The torus grid cannot host the requested bands or modes."""


class SpectralMismatchError(LabError):
    """The quartic roots and the matrix eigenvalues disagree."""

    def __init__(self, xi, quartic_roots, matrix_eigenvalues, deviation: float):
        self.xi = xi
        self.quartic_roots = quartic_roots
        self.matrix_eigenvalues = matrix_eigenvalues
        self.deviation = deviation
        super().__init__(f"eigenvalue routes disagree at xi={list(xi)} deviation={deviation:.3e}")


class DecayViolation(LabError):
    """A mode inside the validity region does not decay at the guaranteed rate."""

    def __init__(self, xi, bound: float, abscissa: float, fitted_rate: float):
        self.xi = xi
        self.bound = bound
        self.abscissa = abscissa
        self.fitted_rate = fitted_rate
        super().__init__(
            f"decay violated at xi={list(xi)} bound={bound:.6e} "
            f"abscissa={abscissa:.6e} fitted={fitted_rate:.6e}"
        )


class InstabilityError(LabError):
    """A time integration produced non-finite values.

    ``partial`` holds whatever series was recorded before the failure so the
    caller can still persist it.
    """

    exit_code = 3

    def __init__(self, message: str, *, failure_time: float, partial=None):
        self.failure_time = failure_time
        self.partial = partial
        super().__init__(message)


class PositivityError(InstabilityError):
    """The density ``1 + eps*a`` dropped below the configured floor."""


class ArtifactError(LabError):
    """Reading a config or writing an artifact failed."""

    exit_code = 4
